//! Weighted rigid alignment, the overlap bias reweighting, iterative
//! registration with a trained model, and the ICP baseline.

use log::warn;
use nalgebra::Matrix3;
use rand::Rng;

use crate::diffmath::{rotation_from_svd, svd3, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, RigidTransform, Vec3};
use crate::model::{Diagnostics, Model};

/// Second singular value below this fraction of the first marks a rank < 2
/// cross-covariance.
pub const RANK_TOLERANCE: f64 = 1e-12;

fn check_weights(n: usize, weights: &[f64]) -> Result<f64> {
    if weights.len() != n {
        return Err(Error::shape("weighted_kabsch", format!("{} weights for {n} pairs", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("weights are all zero".into()));
    }
    Ok(total)
}

/// Rigid transform minimising `Σ wᵢ ‖R srcᵢ + t − dstᵢ‖²`.
pub fn weighted_kabsch(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::shape("weighted_kabsch", format!("{} vs {} points", src.len(), dst.len())));
    }
    let total = check_weights(src.len(), weights)?;
    let mut mu_s = Vec3::zeros();
    let mut mu_d = Vec3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        mu_s += s * (w / total);
        mu_d += d * (w / total);
    }
    let mut h = Matrix3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        h += (s - mu_s) * (d - mu_d).transpose() * (w / total);
    }
    let svd = svd3(&h);
    if svd.s[1] <= RANK_TOLERANCE * svd.s[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(format!(
            "cross-covariance rank < 2 (singular values {:?})",
            svd.s.as_slice()
        )));
    }
    let (r, _) = rotation_from_svd(&svd);
    RigidTransform::new(r, mu_d - r * mu_s)
}

/// Recorded rotation (`3 x 3`) and translation (`1 x 3`).
#[derive(Debug, Clone, Copy)]
pub struct TapeTransform {
    pub rotation: Var,
    pub translation: Var,
}

impl TapeTransform {
    pub fn value(&self, tape: &Tape) -> Result<RigidTransform> {
        let r = tape.value(self.rotation);
        let t = tape.value(self.translation);
        RigidTransform::new(Mat3::from_row_slice(r.data()), Vec3::from_row_slice(t.data()))
    }

    /// Applies the transform to the rows of `points` (`n x 3`).
    pub fn apply(&self, tape: &Tape, points: Var) -> Result<Var> {
        let rt = tape.transpose(self.rotation)?;
        let rotated = tape.matmul(points, rt)?;
        tape.add_row(rotated, self.translation)
    }
}

/// [`weighted_kabsch`] on the tape: `src`, `dst` are `n x 3`, `weights` is
/// `n x 1`. With `stop_gradient` the rotation is held constant in the
/// backward pass (the translation still depends on the centroids).
pub fn weighted_kabsch_tape(
    tape: &Tape,
    src: Var,
    dst: Var,
    weights: Var,
    stop_gradient: bool,
) -> Result<TapeTransform> {
    let n = tape.value(src).rows();
    check_weights(n, tape.value(weights).data())?;
    let total = tape.sum(weights)?;
    let inv = tape.recip(total)?;
    let u = tape.mul_scalar(weights, inv)?;
    let ut = tape.transpose(u)?;
    let mu_s = tape.matmul(ut, src)?;
    let mu_d = tape.matmul(ut, dst)?;
    let sc = tape.sub_row(src, mu_s)?;
    let dc = tape.sub_row(dst, mu_d)?;
    let weighted = tape.mul_col(sc, u)?;
    let wt = tape.transpose(weighted)?;
    let h = tape.matmul(wt, dc)?;
    let rotation = tape.svd_rotation(h, stop_gradient)?;
    let rt = tape.transpose(rotation)?;
    let moved = tape.matmul(mu_s, rt)?;
    let translation = tape.sub(mu_d, moved)?;
    Ok(TapeTransform { rotation, translation })
}

/// `wᵢ ← α wᵢ` for `i` in `mask`, unchanged elsewhere.
pub fn apply_bias_weights(weights: &[f64], mask: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("bias coefficient must be > 0, got {alpha}")));
    }
    if mask.is_empty() {
        warn!("empty overlap mask; bias coefficient ignored");
    }
    let mut out = weights.to_vec();
    for &i in mask {
        let slot = out.get_mut(i).ok_or(Error::IndexOutOfRange {
            op: "apply_bias",
            index: i,
            extent: weights.len(),
        })?;
        *slot *= alpha;
    }
    Ok(out)
}

/// [`apply_bias_weights`] on the tape: `w ⊙ (1 + (α − 1)·mask)`.
pub fn apply_bias(tape: &Tape, weights: Var, mask: &[usize], alpha: Var) -> Result<Var> {
    let n = tape.value(weights).numel();
    if !(tape.value(alpha).item() > 0.0) {
        return Err(Error::InvalidInput("bias coefficient must be > 0".into()));
    }
    if mask.is_empty() {
        warn!("empty overlap mask; bias coefficient ignored");
        return Ok(weights);
    }
    let mut indicator = vec![0.0; n];
    for &i in mask {
        *indicator.get_mut(i).ok_or(Error::IndexOutOfRange {
            op: "apply_bias",
            index: i,
            extent: n,
        })? = 1.0;
    }
    let indicator = tape.constant(Tensor::from_vec(tape.value(weights).shape().to_vec(), indicator)?);
    let am1 = tape.add_const(alpha, -1.0)?;
    let factor = tape.mul_scalar(indicator, am1)?;
    let factor = tape.add_const(factor, 1.0)?;
    tape.mul(weights, factor)
}

#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub transform: RigidTransform,
    pub alpha: Option<f64>,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub per_iteration: Vec<IterationTrace>,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationConfig {
    pub n_iter: usize,
    pub early_stop_rot_deg: f64,
    pub early_stop_trans: f64,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            n_iter: 3,
            early_stop_rot_deg: 0.01,
            early_stop_trans: 1e-4,
        }
    }
}

/// One inference pass of the model on `(p, q)`.
pub fn register_once(
    model: &Model,
    p: &PointCloud,
    q: &PointCloud,
    rng: &mut impl Rng,
) -> Result<(RigidTransform, Diagnostics)> {
    model.infer(p, q, rng)
}

/// Repeats [`register_once`] on the progressively aligned source and
/// left-composes the per-iteration estimates.
pub fn register_iterative(
    model: &Model,
    p: &PointCloud,
    q: &PointCloud,
    config: &IterationConfig,
    rng: &mut impl Rng,
) -> Result<RegistrationResult> {
    if config.n_iter == 0 {
        return Err(Error::InvalidInput("n_iter must be >= 1".into()));
    }
    let mut total = RigidTransform::identity();
    let mut current = p.clone();
    let mut per_iteration = Vec::with_capacity(config.n_iter);
    for _ in 0..config.n_iter {
        let (step, diag) = register_once(model, &current, q, rng)?;
        total = step.compose(&total);
        current = p.transformed(&total);
        per_iteration.push(IterationTrace {
            transform: step,
            alpha: diag.alpha,
            mean_confidence: diag.mean_confidence,
        });
        if step.angle_deg() < config.early_stop_rot_deg && step.translation().norm() < config.early_stop_trans {
            break;
        }
    }
    Ok(RegistrationResult {
        transform: total,
        iterations_used: per_iteration.len(),
        per_iteration,
    })
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub mse: f64,
}

fn nearest(points: &[Vec3], base: &[Vec3]) -> (Vec<Vec3>, f64) {
    let mut total = 0.0;
    let matched = points
        .iter()
        .map(|p| {
            let (mut best, mut bd) = (0, f64::INFINITY);
            for (j, b) in base.iter().enumerate() {
                let d = (p - b).norm_squared();
                if d < bd {
                    bd = d;
                    best = j;
                }
            }
            total += bd;
            base[best]
        })
        .collect();
    (matched, total / points.len() as f64)
}

/// Point-to-point ICP from the identity: nearest-neighbour correspondences
/// and uniform-weight Kabsch until the mean squared residual improves by
/// less than `tol`.
pub fn icp_baseline(p: &PointCloud, q: &PointCloud, max_iter: usize, tol: f64) -> Result<IcpResult> {
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be >= 1".into()));
    }
    let uniform = vec![1.0; p.len()];
    let mut xf = RigidTransform::identity();
    let (_, mut prev) = nearest(p.points(), q.points());
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let moved: Vec<Vec3> = p.points().iter().map(|x| xf.apply_point(x)).collect();
        let (matched, _) = nearest(&moved, q.points());
        xf = weighted_kabsch(p.points(), &matched, &uniform)?;
        let moved: Vec<Vec3> = p.points().iter().map(|x| xf.apply_point(x)).collect();
        let (_, mse) = nearest(&moved, q.points());
        let improvement = prev - mse;
        prev = mse;
        if improvement < tol {
            break;
        }
    }
    Ok(IcpResult {
        transform: xf,
        iterations,
        mse: prev,
    })
}
