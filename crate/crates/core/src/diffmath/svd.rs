use nalgebra::{Matrix3, Vector3, SVD};

/// Two singular values closer than this flag the decomposition as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-9;

/// Added to the magnitude of every pairwise denominator in the backward pass.
pub const BACKWARD_REGULARIZER: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    /// Descending, non-negative.
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
    /// Two singular values lie within [`DEGENERACY_GAP`] of each other.
    pub degenerate: bool,
}

/// `h = U diag(S) Vᵀ` with singular values sorted in descending order.
pub fn svd3(h: &Matrix3<f64>) -> Svd3 {
    let svd = SVD::new(*h, true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let sv = svd.singular_values;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let mut out_u = Matrix3::zeros();
    let mut out_v = Matrix3::zeros();
    let mut s = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        // nalgebra already returns non-negative values; keep the sign in U to be safe.
        let sign = if sv[src] < 0.0 { -1.0 } else { 1.0 };
        s[dst] = sv[src].abs();
        out_u.set_column(dst, &(u.column(src) * sign));
        out_v.set_column(dst, &v.column(src));
    }
    let degenerate = (s[0] - s[1]).abs() < DEGENERACY_GAP || (s[1] - s[2]).abs() < DEGENERACY_GAP;
    Svd3 {
        u: out_u,
        s,
        v: out_v,
        degenerate,
    }
}

/// Proper rotation `V diag(1, 1, det(V Uᵀ)) Uᵀ` closest to the map `H` takes
/// source offsets to target offsets, together with the reflection sign.
pub fn rotation_from_svd(svd: &Svd3) -> (Matrix3<f64>, f64) {
    let d = if (svd.v * svd.u.transpose()).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    (svd.v * dm * svd.u.transpose(), d)
}

fn regularized(x: f64) -> f64 {
    if x >= 0.0 {
        x + BACKWARD_REGULARIZER
    } else {
        x - BACKWARD_REGULARIZER
    }
}

/// Pullback of `R = V D Uᵀ` through the SVD of `H`.
///
/// With `P = Uᵀ dH V` the rotation perturbation is `dR = V X Uᵀ`, where for
/// `i != j`
///
/// * `X_ij = d_i (P_ji - P_ij) / (s_i + s_j)` when `d_i = d_j`, and
/// * `X_ij = d_i (P_ij + P_ji) / (s_i - s_j)` across the reflection sign.
///
/// This is the U/V perturbation formula specialised to the rotation factor;
/// every denominator has [`BACKWARD_REGULARIZER`] added to its magnitude.
pub fn rotation_backward(svd: &Svd3, d: f64, grad_r: &Matrix3<f64>) -> Matrix3<f64> {
    let signs = [1.0, 1.0, d];
    let y = svd.v.transpose() * grad_r * svd.u;
    let mut z = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let yij = y[(i, j)];
            if signs[i] == signs[j] {
                let c = signs[i] / regularized(svd.s[i] + svd.s[j]);
                z[(j, i)] += yij * c;
                z[(i, j)] -= yij * c;
            } else {
                let e = signs[i] / regularized(svd.s[i] - svd.s[j]);
                z[(i, j)] += yij * e;
                z[(j, i)] += yij * e;
            }
        }
    }
    svd.u * z * svd.v.transpose()
}
