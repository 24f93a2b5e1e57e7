//! The unsupervised training objective: a robust bidirectional alignment
//! term, a neighbourhood agreement term over the most confident pairs, and a
//! cross-entropy term sharpening the refined matching map.

use crate::diffmath::{knn_indices, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::obmm::argmax;
use crate::solver::TapeTransform;

/// Floor applied to matching probabilities before the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub huber_delta: f64,
    pub softmin_sharpness: f64,
    pub topk_pairs: usize,
    pub k_neighbors: usize,
    pub use_global: bool,
    pub use_neighborhood: bool,
    pub use_spatial: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1.0,
            softmin_sharpness: 1e4,
            topk_pairs: 64,
            k_neighbors: 8,
            use_global: true,
            use_neighborhood: true,
            use_spatial: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_global || self.use_neighborhood || self.use_spatial) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if !(self.huber_delta > 0.0) || !(self.softmin_sharpness > 0.0) {
            return Err(Error::Config("huber_delta and softmin_sharpness must be > 0".into()));
        }
        if self.topk_pairs == 0 || self.k_neighbors == 0 {
            return Err(Error::Config("topk_pairs and k_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MinMode {
    /// Log-sum-exp soft minimum with the given sharpness.
    Soft(f64),
    Hard,
}

fn row_min(tape: &Tape, sq: Var, mode: MinMode) -> Result<Var> {
    match mode {
        MinMode::Soft(s) => {
            let m = tape.softmin_rows(sq, s)?;
            // The soft minimum undershoots the true one and can go negative.
            tape.relu(m)
        }
        MinMode::Hard => {
            let v = tape.value(sq);
            let cols: Vec<usize> = (0..v.rows())
                .map(|r| {
                    let row = v.row(r);
                    let mut best = 0;
                    for (j, &x) in row.iter().enumerate() {
                        if x < row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            tape.pick_per_row(sq, &cols)
        }
    }
}

/// `Σ_{p′} ϑ(min_q ‖p′ − q‖²) + Σ_q ϑ(min_{p′} ‖q − p′‖²)` with the Huber
/// penalty `ϑ`. `p_transformed` is `N x 3`, `q` is `M x 3`.
pub fn global_alignment_loss(tape: &Tape, p_transformed: Var, q: Var, delta: f64, mode: MinMode) -> Result<Var> {
    let sq = tape.pairwise_sqdist(p_transformed, q)?;
    let forward = row_min(tape, sq, mode)?;
    let sq_t = tape.transpose(sq)?;
    let backward = row_min(tape, sq_t, mode)?;
    let hf = tape.huber(forward, delta)?;
    let hb = tape.huber(backward, delta)?;
    let a = tape.sum(hf)?;
    let b = tape.sum(hb)?;
    tape.add(a, b)
}

/// Indices of the `k` largest confidences, largest first, ties to the lower
/// index.
pub fn top_k_indices(confidences: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..confidences.len()).collect();
    idx.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Σ over selected pairs `(xᵢ, yᵢ)` and rank `r` of
/// `‖R p_{n_r(xᵢ)} + t − q_{n_r(yᵢ)}‖`, where `n_r(x)` is the `r`-th nearest
/// neighbour of `x` in its own cloud. `x_idx` selects source points; `y` are
/// the matching pseudo targets (one row per selected index).
pub fn neighborhood_agreement_loss(
    tape: &Tape,
    p: &PointCloud,
    q: &PointCloud,
    x_idx: &[usize],
    y: &Tensor,
    transform: &TapeTransform,
    k: usize,
) -> Result<Var> {
    if x_idx.is_empty() {
        return Err(Error::InvalidInput("neighbourhood loss needs at least one pair".into()));
    }
    if y.rows() != x_idx.len() {
        return Err(Error::shape("neighborhood_agreement_loss", format!("{} pairs, {} targets", x_idx.len(), y.rows())));
    }
    if k > p.len() || k > q.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds cloud sizes {} / {}",
            p.len(),
            q.len()
        )));
    }
    let pt = p.to_tensor();
    let qt = q.to_tensor();
    let x = p.select(x_idx)?.to_tensor();
    let nx = knn_indices(&x, &pt, k)?;
    let ny = knn_indices(y, &qt, k)?;
    let gather = |base: &Tensor, idx: &[usize]| {
        let data = idx.iter().flat_map(|&i| base.row(i).iter().copied()).collect();
        Tensor::matrix(idx.len(), 3, data)
    };
    let src = tape.constant(gather(&pt, &nx.indices)?);
    let dst = tape.constant(gather(&qt, &ny.indices)?);
    let moved = transform.apply(tape, src)?;
    let r = tape.sub(moved, dst)?;
    let sq = tape.square(r)?;
    let norms = tape.sum_axis(sq, 1)?;
    let norms = tape.sqrt(norms)?;
    tape.sum(norms)
}

/// `−mean_i ln max_j Mʳ[i, j]` over the selected rows.
pub fn spatial_consistency_loss(tape: &Tape, m_refined: Var, rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("spatial consistency loss needs at least one row".into()));
    }
    let selected = tape.gather_rows(m_refined, rows)?;
    let v = tape.value(selected);
    let best: Vec<usize> = (0..v.rows()).map(|r| argmax(v.row(r))).collect();
    let picked = tape.pick_per_row(selected, &best)?;
    let logs = tape.ln_floor(picked, LOG_FLOOR)?;
    let mean = tape.mean(logs)?;
    tape.neg(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_g: f64,
    pub l_n: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(l_g: f64, l_n: f64, l_s: f64) -> Result<Self> {
        let total = l_g + l_n + l_s;
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        Ok(Self { l_g, l_n, l_s, total })
    }
}

/// Unweighted sum of the enabled terms, with the per-term values.
pub fn total_loss(tape: &Tape, l_g: Option<Var>, l_n: Option<Var>, l_s: Option<Var>) -> Result<(Var, LossBreakdown)> {
    let parts: Vec<Var> = [l_g, l_n, l_s].into_iter().flatten().collect();
    let Some((&first, rest)) = parts.split_first() else {
        return Err(Error::Config("no loss term enabled".into()));
    };
    let mut total = first;
    for &v in rest {
        total = tape.add(total, v)?;
    }
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let breakdown = LossBreakdown::from_parts(val(l_g), val(l_n), val(l_s))?;
    Ok((total, breakdown))
}
