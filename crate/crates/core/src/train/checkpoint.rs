//! Versioned plain-text checkpoint container.
//!
//! ```text
//! obmreg-checkpoint 1
//! [config]
//! epochs=50
//! ...
//! [progress]
//! epochs_done=12
//! best_epoch=9
//! best_score=3.2e0
//! adam_step=2400
//! [history]
//! <one EpochRecord per line>
//! [tensors]
//! tensor param feat.proj.weight 64 64
//! <one row of values per line>
//! tensor adam.m feat.proj.weight 64 64
//! ...
//! ```
//!
//! Values are written with 17 significant digits, so every `f64` survives
//! a save/load cycle bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::config::TrainConfig;
use super::EpochRecord;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &str = "obmreg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub optimizer: Option<AdamState>,
    pub epochs_done: usize,
    /// Epoch and validation score of the best parameters seen so far.
    pub best: Option<(usize, f64)>,
    pub history: Vec<EpochRecord>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Config(format!("{}: {}", path.display(), msg.into()))
}

fn push_tensor(out: &mut String, kind: &str, name: &str, t: &Tensor) {
    let (rows, cols) = (t.shape()[0], t.shape().get(1).copied().unwrap_or(1));
    writeln!(out, "tensor {kind} {name} {rows} {cols}").unwrap();
    for r in 0..rows {
        let row: Vec<String> = t.data()[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n[config]\n");
        out.push_str(&self.config.to_text());
        out.push_str("[progress]\n");
        writeln!(out, "epochs_done={}", self.epochs_done).unwrap();
        if let Some((epoch, score)) = self.best {
            writeln!(out, "best_epoch={epoch}\nbest_score={score:.16e}").unwrap();
        }
        if let Some(opt) = &self.optimizer {
            writeln!(out, "adam_step={}", opt.step).unwrap();
        }
        out.push_str("[history]\n");
        for rec in &self.history {
            out.push_str(&rec.to_fields().join(" "));
            out.push('\n');
        }
        out.push_str("[tensors]\n");
        for (name, t) in self.params.iter() {
            push_tensor(&mut out, "param", name, t);
        }
        if let Some(opt) = &self.optimizer {
            for ((name, _), (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                push_tensor(&mut out, "adam.m", name, m);
                push_tensor(&mut out, "adam.v", name, v);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next().map(|l| l.split_whitespace().collect::<Vec<_>>()) {
            Some(h) if h.len() == 2 && h[0] == CHECKPOINT_MAGIC => {
                if h[1] != CHECKPOINT_VERSION.to_string() {
                    return Err(bad(path, format!("unsupported checkpoint version {}", h[1])));
                }
            }
            _ => return Err(bad(path, "not a checkpoint file")),
        }
        let mut section = "";
        let mut config_text = String::new();
        let mut progress = std::collections::HashMap::new();
        let mut history = Vec::new();
        let mut params = ParamSet::new();
        let (mut moments_m, mut moments_v) = (ParamSet::new(), ParamSet::new());
        while let Some(line) = lines.next() {
            if line.starts_with('[') {
                section = line;
                continue;
            }
            match section {
                "[config]" => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
                "[progress]" => {
                    let (k, v) = line.split_once('=').ok_or_else(|| bad(path, format!("bad progress line `{line}`")))?;
                    progress.insert(k.to_string(), v.to_string());
                }
                "[history]" => history.push(EpochRecord::from_fields(&line.split_whitespace().collect::<Vec<_>>())
                    .ok_or_else(|| bad(path, format!("bad history line `{line}`")))?),
                "[tensors]" => {
                    let h: Vec<&str> = line.split_whitespace().collect();
                    if h.len() != 5 || h[0] != "tensor" {
                        return Err(bad(path, format!("bad tensor header `{line}`")));
                    }
                    let rows: usize = h[3].parse().map_err(|_| bad(path, "bad tensor rows"))?;
                    let cols: usize = h[4].parse().map_err(|_| bad(path, "bad tensor cols"))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let row = lines.next().ok_or_else(|| bad(path, format!("tensor `{}` truncated", h[2])))?;
                        for tok in row.split_whitespace() {
                            data.push(tok.parse::<f64>().map_err(|_| bad(path, format!("bad value `{tok}`")))?);
                        }
                    }
                    let t = Tensor::matrix(rows, cols, data).map_err(|_| bad(path, format!("tensor `{}` has wrong size", h[2])))?;
                    match h[1] {
                        "param" => params.insert(h[2], t),
                        "adam.m" => moments_m.insert(h[2], t),
                        "adam.v" => moments_v.insert(h[2], t),
                        other => return Err(bad(path, format!("unknown tensor kind `{other}`"))),
                    }
                }
                _ => return Err(bad(path, format!("content outside a section: `{line}`"))),
            }
        }
        let config = TrainConfig::parse(&config_text).map_err(|e| bad(path, e.to_string()))?;
        let get = |k: &str| progress.get(k).map(String::as_str);
        let epochs_done = get("epochs_done")
            .ok_or_else(|| bad(path, "missing epochs_done"))?
            .parse()
            .map_err(|_| bad(path, "bad epochs_done"))?;
        let best = match (get("best_epoch"), get("best_score")) {
            (Some(e), Some(s)) => Some((
                e.parse().map_err(|_| bad(path, "bad best_epoch"))?,
                s.parse().map_err(|_| bad(path, "bad best_score"))?,
            )),
            _ => None,
        };
        let optimizer = match get("adam_step") {
            None => None,
            Some(step) => {
                let lookup = |set: &ParamSet, which: &str| -> Result<Vec<Tensor>> {
                    params
                        .iter()
                        .map(|(n, _)| set.get(n).cloned().ok_or_else(|| bad(path, format!("missing {which} for `{n}`"))))
                        .collect()
                };
                let mut state = AdamState::new(&params);
                state.step = step.parse().map_err(|_| bad(path, "bad adam_step"))?;
                state.m = lookup(&moments_m, "adam.m")?;
                state.v = lookup(&moments_v, "adam.v")?;
                Some(state)
            }
        };
        Ok(Self {
            config,
            params,
            optimizer,
            epochs_done,
            best,
            history,
        })
    }
}
