//! The full registration network: feature extraction, overlap sampling and
//! bias prediction, neighbour map matching, biased weighted alignment and the
//! training objective. Training and inference share [`Model::forward`].
//!
//! The sampled overlap features are fused back into the point features used
//! for matching: every row of a cloud's feature map gets the max-pooled
//! sampled features of that cloud added. With overlap sampling disabled the
//! raw point features are matched directly; with neighbour map matching
//! disabled the refined map is the plain softmax of negative feature
//! distances and the confidences are its row maxima, normalised to mean 1.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureConfig, FeatureMap};
use crate::geometry::{PointCloud, RigidTransform};
use crate::losses::{
    global_alignment_loss, neighborhood_agreement_loss, spatial_consistency_loss, top_k_indices, total_loss,
    LossBreakdown, LossConfig, MinMode,
};
use crate::nmm::{self, mean_row_entropy, neighbor_map_matching, pseudo_correspondences, NmmConfig};
use crate::obmm::{argmax, bias_prediction, overlap_sampling, ObmmConfig};
use crate::params::{Bound, ParamSet};
use crate::solver::{apply_bias, weighted_kabsch_tape, TapeTransform};

/// Which architectural components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub overlap_sampling: bool,
    pub bias_prediction: bool,
    pub nmm: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            overlap_sampling: true,
            bias_prediction: true,
            nmm: true,
        }
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.overlap_sampling {
            parts.push("OS");
        }
        if self.bias_prediction {
            parts.push("BP");
        }
        if self.nmm {
            parts.push("NMM");
        }
        if parts.is_empty() {
            write!(f, "baseline")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub obmm: ObmmConfig,
    pub nmm: NmmConfig,
    pub loss: LossConfig,
    pub components: Components,
    pub svd_stop_gradient: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            obmm: ObmmConfig::default(),
            nmm: NmmConfig::default(),
            loss: LossConfig::default(),
            components: Components::default(),
            svd_stop_gradient: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.components.bias_prediction && !self.components.overlap_sampling {
            return Err(Error::Config("bias prediction needs overlap sampling".into()));
        }
        if self.features.k_feat == 0 || self.features.widths.is_empty() || self.features.out_dim == 0 {
            return Err(Error::Config("feature extractor needs k_feat, widths and out_dim".into()));
        }
        if self.nmm.k_match == 0 || !(self.nmm.beta > 0.0) {
            return Err(Error::Config("k_match must be >= 1 and beta > 0".into()));
        }
        if !(self.obmm.tau_start > 0.0 && self.obmm.tau_end > 0.0) {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        if !(self.obmm.sample_fraction > 0.0 && self.obmm.sample_fraction <= 1.0) {
            return Err(Error::Config("sample fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything one forward pass records.
#[derive(Debug, Clone)]
pub struct Forward {
    pub transform: TapeTransform,
    pub m_refined: Var,
    pub pseudo_targets: Var,
    /// Confidences before the bias reweighting (`N x 1`).
    pub confidences: Var,
    /// Weights handed to the solver (`N x 1`).
    pub weights: Var,
    pub alpha: Option<Var>,
    pub overlap_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub alpha: Option<f64>,
    pub mean_confidence: f64,
    pub min_confidence: f64,
    pub max_confidence: f64,
    pub refined_entropy: f64,
    pub overlap_points: usize,
}

impl Diagnostics {
    pub fn from_forward(tape: &Tape, fwd: &Forward) -> Self {
        let w = tape.value(fwd.confidences);
        let d = w.data();
        Self {
            alpha: fwd.alpha.map(|a| tape.value(a).item()),
            mean_confidence: d.iter().sum::<f64>() / d.len() as f64,
            min_confidence: d.iter().copied().fold(f64::INFINITY, f64::min),
            max_confidence: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            refined_entropy: mean_row_entropy(&tape.value(fwd.m_refined)),
            overlap_points: fwd.overlap_indices.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn fuse(tape: &Tape, phi: &FeatureMap, sampled: Var) -> Result<FeatureMap> {
    let pooled = tape.max_rows(sampled)?;
    Ok(FeatureMap {
        values: tape.add_row(phi.values, pooled)?,
    })
}

impl Model {
    /// Validates `config` and draws fresh parameters for every component,
    /// whether or not it is enabled, so toggles never change the draw order.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        config.features.init_params(&mut params, rng);
        config.obmm.init_params(config.features.out_dim, &mut params, rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamSet::new();
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        config.features.init_params(&mut expected, &mut dummy);
        config.obmm.init_params(config.features.out_dim, &mut expected, &mut dummy);
        for (name, value) in expected.iter() {
            match params.get(name) {
                Some(v) if v.shape() == value.shape() => {}
                Some(v) => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        v.shape(),
                        value.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        p: &PointCloud,
        q: &PointCloud,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let phi_p = extract_features(tape, bound, &cfg.features, p)?;
        let phi_q = extract_features(tape, bound, &cfg.features, q)?;

        let (mut match_p, mut match_q) = (phi_p, phi_q);
        let mut alpha = None;
        let mut overlap_indices = Vec::new();
        if cfg.components.overlap_sampling {
            let k = cfg.obmm.num_samples(p.len(), q.len());
            let (sp, sq) = overlap_sampling(tape, bound, p, q, &phi_p, &phi_q, k, tau, rng)?;
            match_p = fuse(tape, &phi_p, sp.sampled_features)?;
            match_q = fuse(tape, &phi_q, sq.sampled_features)?;
            overlap_indices = sp.hard_indices(tape);
            if cfg.components.bias_prediction {
                alpha = Some(bias_prediction(tape, bound, &sp, &sq)?.alpha);
            }
        }

        let (m_refined, pseudo_targets, confidences) = if cfg.components.nmm {
            let map = neighbor_map_matching(tape, &cfg.nmm, p, q, &match_p, &match_q)?;
            let pc = pseudo_correspondences(tape, map.m_refined, map.s_scores, q)?;
            (map.m_refined, pc.pseudo_targets, pc.confidences)
        } else {
            let m_raw = nmm::raw_distance_map(tape, match_p.values, match_q.values)?;
            let neg = tape.neg(m_raw)?;
            let map = tape.softmax(neg, 1)?;
            let v = tape.value(map);
            let best: Vec<usize> = (0..v.rows()).map(|r| argmax(v.row(r))).collect();
            let picked = tape.pick_per_row(map, &best)?;
            let conf = nmm::normalize_mean(tape, picked)?;
            let qt = tape.constant(q.to_tensor());
            (map, tape.matmul(map, qt)?, conf)
        };

        let weights = match alpha {
            Some(a) => apply_bias(tape, confidences, &overlap_indices, a)?,
            None => confidences,
        };
        let src = tape.constant(p.to_tensor());
        let transform = weighted_kabsch_tape(tape, src, pseudo_targets, weights, cfg.svd_stop_gradient)?;
        Ok(Forward {
            transform,
            m_refined,
            pseudo_targets,
            confidences,
            weights,
            alpha,
            overlap_indices,
        })
    }

    /// The enabled loss terms for a recorded forward pass.
    pub fn loss(&self, tape: &Tape, fwd: &Forward, p: &PointCloud, q: &PointCloud, mode: MinMode) -> Result<(Var, LossBreakdown)> {
        let lc = &self.config.loss;
        let src = tape.constant(p.to_tensor());
        let moved = fwd.transform.apply(tape, src)?;
        let qt = tape.constant(q.to_tensor());
        let l_g = if lc.use_global {
            Some(global_alignment_loss(tape, moved, qt, lc.huber_delta, mode)?)
        } else {
            None
        };
        let top = top_k_indices(tape.value(fwd.weights).data(), lc.topk_pairs.min(p.len()));
        let l_n = if lc.use_neighborhood {
            let y = tape.value(fwd.pseudo_targets);
            let rows: Vec<f64> = top.iter().flat_map(|&i| y.row(i).to_vec()).collect();
            let y = crate::diffmath::Tensor::matrix(top.len(), 3, rows)?;
            let k = lc.k_neighbors.min(p.len()).min(q.len());
            Some(neighborhood_agreement_loss(tape, p, q, &top, &y, &fwd.transform, k)?)
        } else {
            None
        };
        let l_s = if lc.use_spatial {
            Some(spatial_consistency_loss(tape, fwd.m_refined, &top)?)
        } else {
            None
        };
        total_loss(tape, l_g, l_n, l_s)
    }

    /// Single inference pass at the final temperature with frozen parameters.
    pub fn infer(&self, p: &PointCloud, q: &PointCloud, rng: &mut impl Rng) -> Result<(RigidTransform, Diagnostics)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let fwd = self.forward(&tape, &bound, p, q, self.config.obmm.tau_end, rng)?;
        Ok((fwd.transform.value(&tape)?, Diagnostics::from_forward(&tape, &fwd)))
    }
}
