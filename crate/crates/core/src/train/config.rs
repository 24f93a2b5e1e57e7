//! Plain-text `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. List
//! values are comma-separated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Components, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs at which the learning rate is multiplied by the decay factor.
    pub lr_decay_epochs: Vec<usize>,
    pub seed: u64,
    /// Cap on validation pairs scored per epoch (0 disables validation).
    pub val_pairs: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.001,
            lr_decay_factor: 0.7,
            lr_decay_epochs: vec![25],
            seed: 0,
            val_pairs: 20,
            model: ModelConfig::default(),
        }
    }
}

/// `lr₀ · factor^(number of decay epochs ≤ epoch)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    config.lr * config.lr_decay_factor.powi(passed as i32)
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Parses `OS+BP+NMM`-style component lists; `baseline` or `none` disables all.
pub fn parse_components(value: &str) -> Result<Components> {
    let mut c = Components {
        overlap_sampling: false,
        bias_prediction: false,
        nmm: false,
    };
    if matches!(value.trim(), "baseline" | "none" | "") {
        return Ok(c);
    }
    for part in value.split(['+', ',']).map(str::trim) {
        match part.to_ascii_uppercase().as_str() {
            "OS" => c.overlap_sampling = true,
            "BP" => c.bias_prediction = true,
            "NMM" => c.nmm = true,
            _ => return Err(Error::Config(format!("unknown component `{part}`"))),
        }
    }
    Ok(c)
}

/// Parses `L_g+L_n+L_s`-style loss lists into (global, neighbourhood, spatial).
pub fn parse_losses(value: &str) -> Result<(bool, bool, bool)> {
    let mut on = (false, false, false);
    for part in value.split(['+', ',']).map(str::trim).filter(|s| !s.is_empty()) {
        match part.to_ascii_lowercase().as_str() {
            "l_g" | "lg" | "global" => on.0 = true,
            "l_n" | "ln" | "neighborhood" => on.1 = true,
            "l_s" | "ls" | "spatial" => on.2 = true,
            _ => return Err(Error::Config(format!("unknown loss `{part}`"))),
        }
    }
    Ok(on)
}

pub fn losses_to_string(global: bool, neighborhood: bool, spatial: bool) -> String {
    let names: Vec<&str> = [(global, "L_g"), (neighborhood, "L_n"), (spatial, "L_s")]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
    names.join("+")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.model.validate()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "val_pairs" => self.val_pairs = parse(key, v)?,
            "k_feat" => m.features.k_feat = parse(key, v)?,
            "widths" => m.features.widths = parse_list(key, v)?,
            "out_dim" => m.features.out_dim = parse(key, v)?,
            "sample_fraction" => m.obmm.sample_fraction = parse(key, v)?,
            "k_samples" => {
                m.obmm.k_samples = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "tau_start" => m.obmm.tau_start = parse(key, v)?,
            "tau_end" => m.obmm.tau_end = parse(key, v)?,
            "class_hidden_width" => m.obmm.class_hidden_width = parse(key, v)?,
            "bias_hidden_width" => m.obmm.bias_hidden_width = parse(key, v)?,
            "k_match" => m.nmm.k_match = parse(key, v)?,
            "gamma" => m.nmm.gamma = parse(key, v)?,
            "beta" => m.nmm.beta = parse(key, v)?,
            "huber_delta" => m.loss.huber_delta = parse(key, v)?,
            "softmin_sharpness" => m.loss.softmin_sharpness = parse(key, v)?,
            "topk_pairs" => m.loss.topk_pairs = parse(key, v)?,
            "k_neighbors" => m.loss.k_neighbors = parse(key, v)?,
            "losses" => {
                let (g, n, s) = parse_losses(v)?;
                m.loss.use_global = g;
                m.loss.use_neighborhood = n;
                m.loss.use_spatial = s;
            }
            "components" => m.components = parse_components(v)?,
            "svd_stop_gradient" => m.svd_stop_gradient = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key, so `parse(to_text())` reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay_factor", self.lr_decay_factor.to_string());
        kv("lr_decay_epochs", list(&self.lr_decay_epochs));
        kv("seed", self.seed.to_string());
        kv("val_pairs", self.val_pairs.to_string());
        kv("k_feat", m.features.k_feat.to_string());
        kv("widths", list(&m.features.widths));
        kv("out_dim", m.features.out_dim.to_string());
        kv("sample_fraction", m.obmm.sample_fraction.to_string());
        kv("k_samples", m.obmm.k_samples.map_or("auto".into(), |k| k.to_string()));
        kv("tau_start", m.obmm.tau_start.to_string());
        kv("tau_end", m.obmm.tau_end.to_string());
        kv("class_hidden_width", m.obmm.class_hidden_width.to_string());
        kv("bias_hidden_width", m.obmm.bias_hidden_width.to_string());
        kv("k_match", m.nmm.k_match.to_string());
        kv("gamma", m.nmm.gamma.to_string());
        kv("beta", m.nmm.beta.to_string());
        kv("huber_delta", m.loss.huber_delta.to_string());
        kv("softmin_sharpness", m.loss.softmin_sharpness.to_string());
        kv("topk_pairs", m.loss.topk_pairs.to_string());
        kv("k_neighbors", m.loss.k_neighbors.to_string());
        kv(
            "losses",
            losses_to_string(m.loss.use_global, m.loss.use_neighborhood, m.loss.use_spatial),
        );
        kv("components", m.components.to_string());
        kv("svd_stop_gradient", m.svd_stop_gradient.to_string());
        out
    }
}
