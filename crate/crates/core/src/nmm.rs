//! Neighbor map matching: a feature-distance matching map refined by
//! neighbourhood consensus, and the pseudo-target correspondences it yields.
//!
//! With `P = softmax_rows(−M)` and coordinate neighbourhoods `𝒩(pᵢ)`,
//! `𝒩(qⱼ)` of size `k`, the consensus of source neighbour `a` of `pᵢ` with
//! target `qⱼ` is
//!
//! ```text
//! R[(i,a), j] = Σ_{b ∈ 𝒩(qⱼ)} P[a, b]
//! ```
//!
//! i.e. how much of neighbour `a`'s matching mass lands in the neighbourhood
//! of `qⱼ`. The weighted distance is the squared consensus deficit
//! `d[i,j] = Σ_a (1 − R[(i,a), j])²`, which is small exactly when the
//! neighbourhoods agree; `D` row-normalises `1/(d + 1e-12) + β`. The score is
//! `S = D ⊙ (Σ_a R[(i,a), ·]) / k` and the refined map is
//! `Mʳ = softmax_rows(−exp(γ − S) ⊙ M)`.
//!
//! Writing the deficit rather than the raw squared consensus keeps the
//! ordering the refinement relies on: consistent neighbourhoods get the
//! larger `D` and `S`, and a larger `S` lowers the effective distance.

use crate::diffmath::{knn_indices, KnnIndices, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::PointCloud;
use crate::obmm::{argmax, rows_on_simplex};

/// Regulariser keeping `1/d` finite when the deficit vanishes.
pub const DISTANCE_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NmmConfig {
    pub k_match: usize,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for NmmConfig {
    fn default() -> Self {
        Self {
            k_match: 8,
            gamma: 1.0,
            beta: 1e-6,
        }
    }
}

/// Every stage of the refinement, recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct MatchingMap {
    /// Feature distances `M` (`N x M`).
    pub m_raw: Var,
    /// Row softmax of `−M`.
    pub m_prime: Var,
    /// Neighbourhood consensus `R` (`(N·k) x M`).
    pub consensus: Var,
    pub d_weights: Var,
    pub s_scores: Var,
    pub m_refined: Var,
}

#[derive(Debug, Clone)]
pub struct PseudoCorrespondence {
    /// `Q′ = Mʳ Q` (`N x 3`).
    pub pseudo_targets: Var,
    /// Confidences `w` (`N x 1`), mean 1.
    pub confidences: Var,
    /// `argmax_j Mʳ[i, j]` per source point.
    pub best_match: Vec<usize>,
}

fn debug_check_simplex(tape: &Tape, v: Var, what: &str) {
    debug_assert!(
        rows_on_simplex(&tape.value(v), SIMPLEX_TOL),
        "{what} rows are not on the simplex"
    );
}

/// `M[i, j] = ‖Φ_P[i] − Φ_Q[j]‖₂`.
pub fn raw_distance_map(tape: &Tape, phi_p: Var, phi_q: Var) -> Result<Var> {
    let sq = tape.pairwise_sqdist(phi_p, phi_q)?;
    // Rounding can push exact zeros slightly negative.
    let sq = tape.relu(sq)?;
    tape.sqrt(sq)
}

/// Row softmax of `−M`, followed by the source-neighbourhood gather: row
/// `(i, a)` of the second output is row `src_idx[i, a]` of the softmax.
pub fn matching_map_prime(tape: &Tape, m_raw: Var, src_idx: &KnnIndices) -> Result<(Var, Var)> {
    let n = tape.value(m_raw).rows();
    if src_idx.rows() != n {
        return Err(Error::shape(
            "matching_map_prime",
            format!("{} neighbourhoods for {n} rows", src_idx.rows()),
        ));
    }
    let neg = tape.neg(m_raw)?;
    let p = tape.softmax(neg, 1)?;
    debug_check_simplex(tape, p, "softmax(-M)");
    let expanded = tape.gather_rows(p, &src_idx.indices)?;
    Ok((p, expanded))
}

/// Consensus `R[(i,a), j] = Σ_{b ∈ tgt_idx[j]} expanded[(i,a), b]`.
pub fn neighborhood_consensus(tape: &Tape, expanded: Var, tgt_idx: &KnnIndices) -> Result<Var> {
    let m = tape.value(expanded).cols();
    if tgt_idx.rows() != m {
        return Err(Error::shape(
            "neighborhood_consensus",
            format!("{} neighbourhoods for {m} columns", tgt_idx.rows()),
        ));
    }
    tape.gather_cols_sum(expanded, tgt_idx)
}

/// Deficit distances `d` and their row-normalised inverse weights `D`.
pub fn weighted_distance(tape: &Tape, consensus: Var, k: usize, beta: f64) -> Result<(Var, Var)> {
    if !(beta > 0.0) {
        return Err(Error::InvalidInput(format!("beta must be > 0, got {beta}")));
    }
    let deficit = tape.neg(consensus)?;
    let deficit = tape.add_const(deficit, 1.0)?;
    let deficit = tape.square(deficit)?;
    let d = tape.sum_row_groups(deficit, k)?;
    let inv = tape.add_const(d, DISTANCE_FLOOR)?;
    let inv = tape.recip(inv)?;
    let inv = tape.add_const(inv, beta)?;
    let big_d = tape.row_normalize(inv)?;
    debug_check_simplex(tape, big_d, "D");
    Ok((d, big_d))
}

/// `S = D ⊙ (Σ_a R[(i,a), ·]) / k`.
pub fn neighborhood_scores(tape: &Tape, consensus: Var, d_weights: Var, k: usize) -> Result<Var> {
    let summed = tape.sum_row_groups(consensus, k)?;
    let s = tape.mul(d_weights, summed)?;
    tape.scale(s, 1.0 / k as f64)
}

/// `Mᵉ = exp(γ − S) ⊙ M` and `Mʳ = softmax_rows(−Mᵉ)`.
pub fn refined_map(tape: &Tape, m_raw: Var, s_scores: Var, gamma: f64) -> Result<(Var, Var)> {
    let e = tape.neg(s_scores)?;
    let e = tape.add_const(e, gamma)?;
    let e = tape.exp(e)?;
    let m_e = tape.mul(e, m_raw)?;
    let neg = tape.neg(m_e)?;
    let m_r = tape.softmax(neg, 1)?;
    debug_check_simplex(tape, m_r, "refined map");
    Ok((m_e, m_r))
}

/// Pseudo targets `Q′ = Mʳ Q` and confidences
/// `wᵢ = S[i, j*] / mean_i S[i, j*]` with `j* = argmax_j Mʳ[i, j]`.
pub fn pseudo_correspondences(
    tape: &Tape,
    m_refined: Var,
    s_scores: Var,
    q: &PointCloud,
) -> Result<PseudoCorrespondence> {
    let mr = tape.value(m_refined);
    if mr.cols() != q.len() {
        return Err(Error::shape(
            "pseudo_correspondences",
            format!("map has {} columns for {} target points", mr.cols(), q.len()),
        ));
    }
    let best_match: Vec<usize> = (0..mr.rows()).map(|i| argmax(mr.row(i))).collect();
    let qt = tape.constant(q.to_tensor());
    let pseudo_targets = tape.matmul(m_refined, qt)?;
    let picked = tape.pick_per_row(s_scores, &best_match)?;
    let confidences = normalize_mean(tape, picked)?;
    Ok(PseudoCorrespondence {
        pseudo_targets,
        confidences,
        best_match,
    })
}

/// Scales a positive column to mean 1.
pub(crate) fn normalize_mean(tape: &Tape, col: Var) -> Result<Var> {
    let mean = tape.mean(col)?;
    if !(tape.value(mean).item() > 0.0) {
        return Err(Error::Degenerate("confidences have non-positive mean".into()));
    }
    let inv = tape.recip(mean)?;
    tape.mul_scalar(col, inv)
}

/// Coordinate neighbourhoods used by the matching stages.
pub fn coordinate_neighborhoods(cloud: &PointCloud, k: usize) -> Result<KnnIndices> {
    let t = cloud.to_tensor();
    knn_indices(&t, &t, k)
}

/// The full refinement chain on precomputed neighbourhoods.
pub fn refine_matching(
    tape: &Tape,
    config: &NmmConfig,
    phi_p: Var,
    phi_q: Var,
    src_idx: &KnnIndices,
    tgt_idx: &KnnIndices,
) -> Result<MatchingMap> {
    if src_idx.k != tgt_idx.k {
        return Err(Error::shape(
            "refine_matching",
            format!("source k = {}, target k = {}", src_idx.k, tgt_idx.k),
        ));
    }
    let k = src_idx.k;
    let m_raw = raw_distance_map(tape, phi_p, phi_q)?;
    let (m_prime, expanded) = matching_map_prime(tape, m_raw, src_idx)?;
    let consensus = neighborhood_consensus(tape, expanded, tgt_idx)?;
    let (_, d_weights) = weighted_distance(tape, consensus, k, config.beta)?;
    let s_scores = neighborhood_scores(tape, consensus, d_weights, k)?;
    let (_, m_refined) = refined_map(tape, m_raw, s_scores, config.gamma)?;
    Ok(MatchingMap {
        m_raw,
        m_prime,
        consensus,
        d_weights,
        s_scores,
        m_refined,
    })
}

/// Builds coordinate neighbourhoods and runs [`refine_matching`].
pub fn neighbor_map_matching(
    tape: &Tape,
    config: &NmmConfig,
    p: &PointCloud,
    q: &PointCloud,
    phi_p: &FeatureMap,
    phi_q: &FeatureMap,
) -> Result<MatchingMap> {
    let k = config.k_match.min(p.len()).min(q.len());
    let src_idx = coordinate_neighborhoods(p, k)?;
    let tgt_idx = coordinate_neighborhoods(q, k)?;
    refine_matching(tape, config, phi_p.values, phi_q.values, &src_idx, &tgt_idx)
}

/// Row entropy of a row-stochastic matrix, averaged over rows.
pub fn mean_row_entropy(map: &Tensor) -> f64 {
    let n = map.rows().max(1);
    (0..map.rows())
        .map(|r| -map.row(r).iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64
}
