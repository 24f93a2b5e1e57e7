//! Overlap bias matching: differentiable overlap sampling with the
//! Gumbel-Softmax relaxation, and prediction of the positive bias
//! coefficient `α` that reweights overlap correspondences in the solver.
//!
//! Interpretation notes:
//! * Each cloud gets its own class distribution `π`, computed from its point
//!   features blended with the max-pooled global feature of the other cloud.
//! * The up-sampling map applied to sampled features is a learned affine map
//!   `D -> D` applied per sample row.
//! * `α` is one scalar per cloud pair.

use rand::distr::Open01;
use rand::Rng;

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::PointCloud;
use crate::params::{Bound, ParamSet};

/// Probabilities are floored here before taking logs.
pub const PI_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ObmmConfig {
    /// `K = round(sample_fraction * min(N, M))` unless `k_samples` is set.
    pub sample_fraction: f64,
    pub k_samples: Option<usize>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub class_hidden_width: usize,
    pub bias_hidden_width: usize,
}

impl Default for ObmmConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 0.7,
            k_samples: None,
            tau_start: 1.0,
            tau_end: 0.1,
            class_hidden_width: 64,
            bias_hidden_width: 64,
        }
    }
}

impl ObmmConfig {
    pub fn num_samples(&self, n: usize, m: usize) -> usize {
        self.k_samples
            .unwrap_or_else(|| (self.sample_fraction * n.min(m) as f64).round() as usize)
            .max(1)
    }

    /// Linear temperature anneal from `tau_start` (epoch 0) to `tau_end`
    /// (last epoch).
    pub fn tau_at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.tau_start;
        }
        let f = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
        self.tau_start + f * (self.tau_end - self.tau_start)
    }

    pub fn init_params(&self, feature_dim: usize, params: &mut ParamSet, rng: &mut impl Rng) {
        params.init_linear("obmm.class.l0", 2 * feature_dim, self.class_hidden_width, rng);
        params.init_linear("obmm.class.out", self.class_hidden_width, 1, rng);
        params.init_linear("obmm.up", feature_dim, feature_dim, rng);
        params.init_linear("obmm.bias.l0", 4, self.bias_hidden_width, rng);
        params.init_linear("obmm.bias.l1", self.bias_hidden_width, self.bias_hidden_width, rng);
        params.init_linear("obmm.bias.out", self.bias_hidden_width, 1, rng);
    }
}

/// Distribution over the points of one cloud (`N x 1`, on the simplex).
#[derive(Debug, Clone, Copy)]
pub struct ClassProbabilities {
    pub pi: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct OverlapSample {
    /// `K x N`, one relaxed one-hot row per sample.
    pub sample_weights: Var,
    /// `K x 3`.
    pub sampled_points: Var,
    /// `K x D`.
    pub sampled_features: Var,
    pub tau: f64,
}

impl OverlapSample {
    /// Distinct per-sample argmax indices, ascending.
    pub fn hard_indices(&self, tape: &Tape) -> Vec<usize> {
        let w = tape.value(self.sample_weights);
        let mut idx: Vec<usize> = (0..w.rows())
            .map(|r| argmax(w.row(r)))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiasCoefficient {
    /// `1 x 1`, strictly positive.
    pub alpha: Var,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn broadcast_row(tape: &Tape, row: Var, n: usize) -> Result<Var> {
    tape.gather_rows(row, &vec![0; n])
}

fn class_logits(tape: &Tape, bound: &Bound, own: Var, other: Var) -> Result<Var> {
    let n = tape.value(own).rows();
    let global = tape.max_rows(other)?;
    let global = broadcast_row(tape, global, n)?;
    let blended = tape.concat_cols(&[own, global])?;
    let h = bound.linear(tape, "obmm.class.l0", blended)?;
    let h = tape.relu(h)?;
    bound.linear(tape, "obmm.class.out", h)
}

/// Per-cloud class probabilities over points.
pub fn class_probabilities(
    tape: &Tape,
    bound: &Bound,
    phi_p: &FeatureMap,
    phi_q: &FeatureMap,
) -> Result<(ClassProbabilities, ClassProbabilities)> {
    let (dp, dq) = (tape.value(phi_p.values).cols(), tape.value(phi_q.values).cols());
    let expected = tape.value(bound.var("obmm.class.l0.weight")?).rows();
    if dp != dq || 2 * dp != expected {
        return Err(Error::shape(
            "class_probabilities",
            format!("feature dims {dp}/{dq}, head expects {}", expected / 2),
        ));
    }
    let lp = class_logits(tape, bound, phi_p.values, phi_q.values)?;
    let lq = class_logits(tape, bound, phi_q.values, phi_p.values)?;
    Ok((
        ClassProbabilities { pi: tape.softmax(lp, 0)? },
        ClassProbabilities { pi: tape.softmax(lq, 0)? },
    ))
}

/// `k x n` matrix of standard Gumbel draws `−ln(−ln u)`, row by row.
pub fn gumbel_noise(k: usize, n: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..k * n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(k, n, data).expect("noise shape")
}

/// `k` independent relaxed samples `softmax((g + ln π) / τ)` as a `k x N`
/// matrix, differentiable with respect to `π` (`N x 1`).
pub fn gumbel_softmax_samples(
    tape: &Tape,
    pi: Var,
    k: usize,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be > 0, got {tau}")));
    }
    let n = tape.value(pi).numel();
    let log_pi = tape.ln_floor(pi, PI_FLOOR)?;
    let log_pi = tape.reshape(log_pi, vec![1, n])?;
    let noise = tape.constant(gumbel_noise(k, n, rng));
    let logits = tape.add_row(noise, log_pi)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    tape.softmax(logits, 1)
}

/// A single relaxed one-hot sample (`1 x N`).
pub fn gumbel_softmax_sample(tape: &Tape, pi: Var, tau: f64, rng: &mut impl Rng) -> Result<Var> {
    gumbel_softmax_samples(tape, pi, 1, tau, rng)
}

/// Hard categorical draw `argmax_j (g_j + ln π_j)`.
pub fn gumbel_hard_sample(pi: &[f64], rng: &mut impl Rng) -> usize {
    let scores: Vec<f64> = pi
        .iter()
        .map(|&p| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln() + p.max(PI_FLOOR).ln()
        })
        .collect();
    argmax(&scores)
}

/// Draws `k` relaxed samples from one cloud and forms its sampled points and
/// up-mapped sampled features.
pub fn sample_cloud(
    tape: &Tape,
    bound: &Bound,
    probs: &ClassProbabilities,
    points: &PointCloud,
    phi: &FeatureMap,
    k: usize,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<OverlapSample> {
    if k == 0 {
        return Err(Error::InvalidInput("overlap sampling needs K >= 1".into()));
    }
    let weights = gumbel_softmax_samples(tape, probs.pi, k, tau, rng)?;
    debug_assert!(rows_on_simplex(&tape.value(weights), 1e-6));
    let pts = tape.constant(points.to_tensor());
    let sampled_points = tape.matmul(weights, pts)?;
    let pooled = tape.matmul(weights, phi.values)?;
    let sampled_features = bound.linear(tape, "obmm.up", pooled)?;
    Ok(OverlapSample {
        sample_weights: weights,
        sampled_points,
        sampled_features,
        tau,
    })
}

/// Overlap sampling for both clouds; the source draws its noise first.
#[allow(clippy::too_many_arguments)]
pub fn overlap_sampling(
    tape: &Tape,
    bound: &Bound,
    p: &PointCloud,
    q: &PointCloud,
    phi_p: &FeatureMap,
    phi_q: &FeatureMap,
    k: usize,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<(OverlapSample, OverlapSample)> {
    let (pi_p, pi_q) = class_probabilities(tape, bound, phi_p, phi_q)?;
    let sp = sample_cloud(tape, bound, &pi_p, p, phi_p, k, tau, rng)?;
    let sq = sample_cloud(tape, bound, &pi_q, q, phi_q, k, tau, rng)?;
    Ok((sp, sq))
}

/// Stacks the sampled points of both clouds into a `(2K) x 4` matrix whose
/// last column marks the origin (0 for the source, 1 for the target), runs
/// the per-row MLP, max-pools over rows and maps the pooled vector to
/// `α = softplus(·) > 0`.
pub fn bias_prediction(
    tape: &Tape,
    bound: &Bound,
    p_overlap: &OverlapSample,
    q_overlap: &OverlapSample,
) -> Result<BiasCoefficient> {
    let rows = |s: &OverlapSample, flag: f64| -> Result<Var> {
        let k = tape.value(s.sampled_points).rows();
        let col = tape.constant(Tensor::full(&[k, 1], flag));
        tape.concat_cols(&[s.sampled_points, col])
    };
    let stacked = tape.concat_rows(&[rows(p_overlap, 0.0)?, rows(q_overlap, 1.0)?])?;
    let h = bound.linear(tape, "obmm.bias.l0", stacked)?;
    let h = tape.relu(h)?;
    let h = bound.linear(tape, "obmm.bias.l1", h)?;
    let h = tape.relu(h)?;
    let pooled = tape.max_rows(h)?;
    let raw = bound.linear(tape, "obmm.bias.out", pooled)?;
    Ok(BiasCoefficient {
        alpha: tape.softplus(raw)?,
    })
}

/// True when every row is non-negative and sums to one within `tol`.
pub fn rows_on_simplex(t: &Tensor, tol: f64) -> bool {
    (0..t.rows()).all(|r| {
        let row = t.row(r);
        row.iter().all(|&v| (0.0..=1.0 + tol).contains(&v)) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
    })
}
