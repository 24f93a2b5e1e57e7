//! Unsupervised training: ADAM, the learning-rate schedule, the epoch loop,
//! checkpoints and component/loss ablations.
//!
//! Every random draw is a function of the run seed and the epoch: epoch `e`
//! uses ChaCha stream `e + 1` of the run seed for the pair order and the
//! Gumbel noise, and validation seeds each pair's inference from the pair's
//! own seed. A run resumed from a checkpoint therefore continues exactly as
//! the uninterrupted run would.

pub mod ablate;
pub mod adam;
pub mod checkpoint;
pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablate::{ablate, AblationRow, Variant};
pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use config::{lr_schedule, TrainConfig};

use crate::data::ScenePair;
use crate::diffmath::Tape;
use crate::error::{Error, Result};
use crate::geometry::{registration_metrics, RegistrationMetrics};
use crate::losses::{LossBreakdown, MinMode};
use crate::model::Model;
use crate::solver::{register_iterative, IterationConfig};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Per-epoch means of the loss terms plus held-out medians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub l_g: f64,
    pub l_n: f64,
    pub l_s: f64,
    pub total: f64,
    /// Median MIE(R) in degrees over the validation pairs; NaN without them.
    pub val_mie_r: f64,
    pub val_mie_t: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,tau,l_g,l_n,l_s,total,val_mie_r,val_mie_t";

    pub(crate) fn to_fields(&self) -> Vec<String> {
        let mut f = vec![self.epoch.to_string()];
        f.extend(
            [self.lr, self.tau, self.l_g, self.l_n, self.l_s, self.total, self.val_mie_r, self.val_mie_t]
                .iter()
                .map(|v| format!("{v:.16e}")),
        );
        f
    }

    pub(crate) fn from_fields(f: &[&str]) -> Option<Self> {
        if f.len() != 9 {
            return None;
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().ok()).collect::<Option<_>>()?;
        Some(Self {
            epoch: f[0].parse().ok()?,
            lr: v[0],
            tau: v[1],
            l_g: v[2],
            l_n: v[3],
            l_s: v[4],
            total: v[5],
            val_mie_r: v[6],
            val_mie_t: v[7],
        })
    }
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in history {
        out.push_str(&r.to_fields().join(","));
        out.push('\n');
    }
    out
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Registers every pair with `iters` refinement passes, seeding each pair's
/// inference from its own seed.
pub fn evaluate(model: &Model, pairs: &[ScenePair], iters: usize) -> Result<Vec<RegistrationMetrics>> {
    let cfg = IterationConfig {
        n_iter: iters,
        ..IterationConfig::default()
    };
    pairs
        .iter()
        .map(|pair| {
            let mut rng = ChaCha8Rng::seed_from_u64(pair.seed);
            let res = register_iterative(model, &pair.source, &pair.target, &cfg, &mut rng)?;
            Ok(registration_metrics(&res.transform, &pair.gt_transform))
        })
        .collect()
}

/// Owns the model and optimizer across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamState,
    pub epochs_done: usize,
    pub best: Option<(usize, f64)>,
    pub best_params: Option<crate::params::ParamSet>,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let optimizer = AdamState::new(&model.params);
        Ok(Self {
            config,
            model,
            optimizer,
            epochs_done: 0,
            best: None,
            best_params: None,
            history: Vec::new(),
        })
    }

    /// Resumes from a checkpoint; `epochs` may be raised to extend the run.
    pub fn from_checkpoint(ckpt: Checkpoint, epochs: Option<usize>) -> Result<Self> {
        let mut config = ckpt.config;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        config.validate()?;
        let model = Model::from_parts(config.model.clone(), ckpt.params)?;
        let optimizer = ckpt.optimizer.unwrap_or_else(|| AdamState::new(&model.params));
        Ok(Self {
            config,
            model,
            optimizer,
            epochs_done: ckpt.epochs_done,
            best: ckpt.best,
            best_params: None,
            history: ckpt.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.model.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            epochs_done: self.epochs_done,
            best: self.best,
            history: self.history.clone(),
        }
    }

    /// Forward, loss, backward and one ADAM step on a single pair.
    pub fn step(&mut self, pair: &ScenePair, lr: f64, tau: f64, epoch: usize, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let bound = self.model.params.bind(&tape, true);
        let mode = MinMode::Soft(self.config.model.loss.softmin_sharpness);
        let numerical = |e: Error| {
            if e.is_numerical() {
                Error::NanLoss { seed: pair.seed, epoch }
            } else {
                e
            }
        };
        let fwd = self
            .model
            .forward(&tape, &bound, &pair.source, &pair.target, tau, rng)
            .map_err(numerical)?;
        let (loss, parts) = self
            .model
            .loss(&tape, &fwd, &pair.source, &pair.target, mode)
            .map_err(numerical)?;
        if !parts.total.is_finite() {
            return Err(Error::NanLoss { seed: pair.seed, epoch });
        }
        tape.backward(loss).map_err(numerical)?;
        let grads = bound.gradients(&tape, &self.model.params);
        adam_step(&mut self.model.params, &grads, &mut self.optimizer, lr).inspect_err(|e| {
            if let Error::NanGradient { name } = e {
                warn!("non-finite gradient for `{name}` on pair seed {} (epoch {epoch})", pair.seed);
            }
        })?;
        Ok(parts)
    }

    /// Trains one epoch over `train` and scores up to `config.val_pairs`
    /// pairs of `val`.
    pub fn run_epoch(&mut self, train: &[ScenePair], val: &[ScenePair]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::InvalidInput("no training pairs".into()));
        }
        let epoch = self.epochs_done;
        let lr = lr_schedule(epoch, &self.config);
        let tau = self.config.model.obmm.tau_at(epoch, self.config.epochs);
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for &i in &order {
            let parts = self.step(&train[i], lr, tau, epoch, &mut rng).inspect_err(|e| {
                if let Error::NanLoss { seed, .. } = e {
                    warn!("aborting: non-finite loss on pair seed {seed} (epoch {epoch})");
                }
            })?;
            for (s, v) in sums.iter_mut().zip([parts.l_g, parts.l_n, parts.l_s, parts.total]) {
                *s += v;
            }
        }
        let n = train.len() as f64;
        let val = &val[..val.len().min(self.config.val_pairs)];
        let (val_mie_r, val_mie_t) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = evaluate(&self.model, val, 1)?;
            (
                median(&m.iter().map(|x| x.mie_r).collect::<Vec<_>>()),
                median(&m.iter().map(|x| x.mie_t).collect::<Vec<_>>()),
            )
        };
        let record = EpochRecord {
            epoch,
            lr,
            tau,
            l_g: sums[0] / n,
            l_n: sums[1] / n,
            l_s: sums[2] / n,
            total: sums[3] / n,
            val_mie_r,
            val_mie_t,
        };
        // Validation MIE(R) when available, otherwise the training loss.
        let score = if val_mie_r.is_finite() { val_mie_r } else { record.total };
        if self.best.is_none_or(|(_, b)| score < b) {
            self.best = Some((epoch, score));
            self.best_params = Some(self.model.params.clone());
        }
        self.epochs_done += 1;
        self.history.push(record);
        Ok(record)
    }

    /// Runs the remaining epochs. With `out_dir`, rewrites the metrics CSV
    /// and the last checkpoint after every epoch, and the best checkpoint
    /// whenever validation improves.
    pub fn train(&mut self, train: &[ScenePair], val: &[ScenePair], out_dir: Option<&Path>) -> Result<()> {
        self.train_until(self.config.epochs, train, val, out_dir)
    }

    /// Like [`Trainer::train`] but stops once `stop` epochs are done. The
    /// schedule still spans `config.epochs`, so the run can be resumed.
    pub fn train_until(&mut self, stop: usize, train: &[ScenePair], val: &[ScenePair], out_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        while self.epochs_done < stop.min(self.config.epochs) {
            let start = Instant::now();
            let best_before = self.best;
            let r = self.run_epoch(train, val)?;
            info!(
                "epoch {:>3} lr {:.2e} tau {:.3} L_g {:.4} L_n {:.4} L_s {:.4} total {:.4} val MIE(R) {:.3} MIE(t) {:.4} ({:.1}s)",
                r.epoch,
                r.lr,
                r.tau,
                r.l_g,
                r.l_n,
                r.l_s,
                r.total,
                r.val_mie_r,
                r.val_mie_t,
                start.elapsed().as_secs_f64()
            );
            if let Some(dir) = out_dir {
                fs::write(dir.join(METRICS_FILE), metrics_csv(&self.history))?;
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join(LAST_CHECKPOINT))?;
                if self.best != best_before {
                    let best = Checkpoint {
                        params: self.best_params.clone().unwrap_or_else(|| self.model.params.clone()),
                        ..ckpt
                    };
                    best.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        Ok(())
    }
}

/// Paths written by [`Trainer::train`] into `dir`.
pub fn output_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join(LAST_CHECKPOINT), dir.join(BEST_CHECKPOINT), dir.join(METRICS_FILE)]
}

/// One-line human summary of an epoch history.
pub fn summarize(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        write!(
            s,
            "{} epochs, total loss {:.4} -> {:.4}, final val MIE(R) {:.3}",
            history.len(),
            first.total,
            last.total,
            last.val_mie_r
        )
        .unwrap();
    }
    s
}
