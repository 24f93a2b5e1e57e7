use std::fmt::Write as _;

use super::config::{losses_to_string, parse_components, parse_losses, TrainConfig};
use super::{evaluate, median, Trainer};
use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::model::Components;

/// One architecture/loss combination to train and score.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub components: Components,
    /// (global, neighbourhood, spatial)
    pub losses: (bool, bool, bool),
}

impl Variant {
    /// `components` as in `OS+BP+NMM` or `baseline`, `losses` as in `L_g+L_s`.
    pub fn new(label: &str, components: &str, losses: &str) -> Result<Self> {
        let v = Self {
            label: label.to_string(),
            components: parse_components(components)?,
            losses: parse_losses(losses)?,
        };
        v.apply(&TrainConfig::default())?;
        Ok(v)
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        cfg.model.components = self.components;
        (cfg.model.loss.use_global, cfg.model.loss.use_neighborhood, cfg.model.loss.use_spatial) = self.losses;
        cfg.validate()
            .map_err(|e| Error::Config(format!("variant `{}`: {e}", self.label)))?;
        Ok(cfg)
    }

    /// Full model plus the component and loss ablations; the first row is
    /// the comparison anchor.
    pub fn standard_set() -> Vec<Variant> {
        [
            ("full", "OS+BP+NMM", "L_g+L_n+L_s"),
            ("no-NMM", "OS+BP", "L_g+L_n+L_s"),
            ("baseline", "baseline", "L_g+L_n+L_s"),
            ("L_g+L_s", "OS+BP+NMM", "L_g+L_s"),
            ("L_g", "OS+BP+NMM", "L_g"),
        ]
        .into_iter()
        .map(|(l, c, s)| Variant::new(l, c, s).expect("standard variants are valid"))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub components: String,
    pub losses: String,
    pub mae_r: f64,
    pub mae_t: f64,
    pub median_mie_r: f64,
    pub median_mie_t: f64,
    pub final_loss: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,components,losses,mae_r,mae_t,median_mie_r,median_mie_t,final_loss";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.label,
            self.components,
            self.losses,
            self.mae_r,
            self.mae_t,
            self.median_mie_r,
            self.median_mie_t,
            self.final_loss
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        writeln!(out, "{}", r.csv_line()).unwrap();
    }
    out
}

/// Trains every variant from the same seed on `train` and scores it on `test`.
pub fn ablate(base: &TrainConfig, variants: &[Variant], train: &[ScenePair], test: &[ScenePair], iters: usize) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants".into()));
    }
    if test.is_empty() {
        return Err(Error::InvalidInput("no evaluation pairs".into()));
    }
    let configs = variants.iter().map(|v| v.apply(base)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(variants.len());
    for (variant, cfg) in variants.iter().zip(configs) {
        log::info!("ablation variant `{}`", variant.label);
        let mut trainer = Trainer::new(cfg)?;
        trainer.train(train, &[], None)?;
        let metrics = evaluate(&trainer.model, test, iters)?;
        let n = metrics.len() as f64;
        let (g, l, s) = variant.losses;
        rows.push(AblationRow {
            label: variant.label.clone(),
            components: variant.components.to_string(),
            losses: losses_to_string(g, l, s),
            mae_r: metrics.iter().map(|m| m.mae_r).sum::<f64>() / n,
            mae_t: metrics.iter().map(|m| m.mae_t).sum::<f64>() / n,
            median_mie_r: median(&metrics.iter().map(|m| m.mie_r).collect::<Vec<_>>()),
            median_mie_t: median(&metrics.iter().map(|m| m.mie_t).collect::<Vec<_>>()),
            final_loss: trainer.history.last().map_or(f64::NAN, |h| h.total),
        });
    }
    Ok(rows)
}
