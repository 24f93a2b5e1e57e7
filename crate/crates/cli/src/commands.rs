use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use obmreg_core::data::{format_ply, generate_dataset, read_cloud, DatasetConfig, DatasetManifest, ShapeKind, Split, MANIFEST_FILE};
use obmreg_core::solver::{icp_baseline, register_iterative, IterationConfig};
use obmreg_core::train::ablate::{ablate, ablation_csv, Variant};
use obmreg_core::train::{output_paths, summarize, Checkpoint, TrainConfig, Trainer};
use obmreg_core::{registration_metrics, Model, RigidTransform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{AblateArgs, BenchArgs, Command, GenDataArgs, RegisterArgs, TrainArgs};
use crate::report::{BenchReport, PairRow, CSV_FILE, JSON_FILE};
use crate::{CliError, CliResult};

pub const ICP_MAX_ITER: usize = 50;
pub const ICP_TOLERANCE: f64 = 1e-10;
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Runs one subcommand, writing its report to `out`.
pub fn run(command: &Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Register(a) => register(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Fails with a data error naming `path` when it is not a readable file.
fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} `{}` not found", path.display())).into())
    }
}

fn parse_split(s: &str) -> CliResult<Split> {
    s.parse().map_err(|e| usage(format!("--split: {e}")))
}

fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> CliResult<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

pub fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let shapes = a
        .shapes
        .split(',')
        .map(|s| s.trim().parse::<ShapeKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("--shapes: {e}")))?;
    let cfg = DatasetConfig {
        shapes,
        train_pairs: a.pairs,
        val_pairs: a.val_pairs,
        test_pairs: a.test_pairs,
        n_points: a.points,
        rot_max_deg: a.rot_max,
        trans_max: a.trans_max,
        overlap: a.overlap,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    if cfg.train_pairs + cfg.val_pairs + cfg.test_pairs == 0 {
        return Err(usage("no pairs requested"));
    }
    let manifest = generate_dataset(&cfg, &a.out)?;
    log::info!("wrote {} pairs", manifest.entries.len());
    writeln!(out, "{}", a.out.join(MANIFEST_FILE).display())?;
    Ok(())
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    require_file(&a.manifest, "manifest")?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let train = manifest.load_split(Split::Train)?;
    if train.is_empty() {
        return Err(obmreg_core::Error::InvalidInput(format!("{}: no training pairs", a.manifest.display())).into());
    }
    let val = manifest.load_split(Split::Val)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let ckpt = Checkpoint::load(path)?;
            let changed = a.config.is_some()
                || a.lr.is_some()
                || a.decay_epochs.is_some()
                || a.decay_factor.is_some()
                || !a.overrides.is_empty()
                || a.seed.is_some_and(|s| s != ckpt.config.seed);
            if changed {
                return Err(usage("--resume keeps the checkpoint's config; only --epochs and --stop-after may be given"));
            }
            Trainer::from_checkpoint(ckpt, a.epochs)?
        }
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            if let Some(d) = &a.decay_epochs {
                cfg.set("lr_decay_epochs", d)?;
            }
            if let Some(f) = a.decay_factor {
                cfg.lr_decay_factor = f;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            apply_overrides(&mut cfg, &a.overrides)?;
            Trainer::new(cfg)?
        }
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CONFIG_FILE), trainer.config.to_text())?;
    let stop = a.stop_after.unwrap_or(trainer.config.epochs);
    trainer.train_until(stop, &train, &val, Some(&a.out))?;
    writeln!(out, "{}", summarize(&trainer.history))?;
    for p in output_paths(&a.out).iter().filter(|p| p.exists()) {
        writeln!(out, "{}", p.display())?;
    }
    Ok(())
}

/// Row-major 4×4 homogeneous matrix, 17 significant digits per entry.
pub fn format_transform(xf: &RigidTransform) -> String {
    let h = xf.to_homogeneous();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.16e}", h[(r, c)])).collect();
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    s
}

pub fn load_model(path: &Path) -> CliResult<Model> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    Ok(Model::from_parts(ckpt.config.model, ckpt.params)?)
}

pub fn register(a: &RegisterArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.iters == 0 {
        return Err(usage("--iters must be >= 1"));
    }
    let model = load_model(&a.checkpoint)?;
    require_file(&a.source, "source cloud")?;
    require_file(&a.target, "target cloud")?;
    let p = read_cloud(&a.source)?;
    let q = read_cloud(&a.target)?;
    let cfg = IterationConfig {
        n_iter: a.iters,
        ..IterationConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let res = register_iterative(&model, &p, &q, &cfg, &mut rng)?;
    log::info!("{} refinement passes", res.iterations_used);
    if let Some(path) = &a.out {
        fs::write(path, format_ply(&p.transformed(&res.transform)))?;
    }
    out.write_all(format_transform(&res.transform).as_bytes())?;
    Ok(())
}

/// Scores the model, and ICP unless disabled, on every pair of one split.
pub fn bench_report(a: &BenchArgs) -> CliResult<BenchReport> {
    let split = parse_split(&a.split)?;
    let with_icp = match a.baseline.as_str() {
        "icp" => true,
        "none" => false,
        other => return Err(usage(format!("unknown baseline `{other}` (expected icp or none)"))),
    };
    if a.iters == 0 {
        return Err(usage("--iters must be >= 1"));
    }
    let model = load_model(&a.checkpoint)?;
    require_file(&a.manifest, "manifest")?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let entries: Vec<_> = manifest.entries.iter().enumerate().filter(|(_, e)| e.split == split).collect();
    if entries.is_empty() {
        return Err(obmreg_core::Error::InvalidInput(format!("{}: no {split} pairs", a.manifest.display())).into());
    }
    let cfg = IterationConfig {
        n_iter: a.iters,
        ..IterationConfig::default()
    };
    let split_name = split.to_string();
    let mut rows = Vec::new();
    for (index, entry) in entries {
        let pair = manifest.load_pair(entry)?;
        let fail = |e: obmreg_core::Error| {
            log::error!("{split_name} pair {}: {e}", entry.id);
            CliError::from(e)
        };
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(pair.seed);
        let res = register_iterative(&model, &pair.source, &pair.target, &cfg, &mut rng).map_err(fail)?;
        let mut row = PairRow::new("model", &split_name, index, entry.id, &registration_metrics(&res.transform, &pair.gt_transform));
        row.wall_ms = a.timing.then(|| start.elapsed().as_secs_f64() * 1e3);
        rows.push(row);
        if with_icp {
            let start = Instant::now();
            let icp = icp_baseline(&pair.source, &pair.target, ICP_MAX_ITER, ICP_TOLERANCE).map_err(fail)?;
            let mut row = PairRow::new("icp", &split_name, index, entry.id, &registration_metrics(&icp.transform, &pair.gt_transform));
            row.wall_ms = a.timing.then(|| start.elapsed().as_secs_f64() * 1e3);
            rows.push(row);
        }
    }
    Ok(BenchReport::new(rows))
}

pub fn bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let report = bench_report(a)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CSV_FILE), report.to_csv())?;
    fs::write(a.out.join(JSON_FILE), report.to_json())?;
    out.write_all(report.summary().as_bytes())?;
    Ok(())
}

pub fn ablate_cmd(a: &AblateArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    apply_overrides(&mut cfg, &a.overrides)?;
    cfg.validate()?;
    let mut variants = Variant::standard_set();
    if let Some(list) = &a.variants {
        let wanted: Vec<&str> = list.split(',').map(str::trim).collect();
        if let Some(bad) = wanted.iter().find(|w| !variants.iter().any(|v| v.label == **w)) {
            return Err(usage(format!("unknown variant `{bad}`")));
        }
        variants.retain(|v| wanted.contains(&v.label.as_str()));
    }
    let split = parse_split(&a.split)?;
    require_file(&a.manifest, "manifest")?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let train = manifest.load_split(Split::Train)?;
    let test = manifest.load_split(split)?;
    let rows = ablate(&cfg, &variants, &train, &test, a.iters)?;
    let csv = ablation_csv(&rows);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(ABLATION_FILE), &csv)?;
    out.write_all(csv.as_bytes())?;
    Ok(())
}
