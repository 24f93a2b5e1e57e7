//! Line-oriented dataset index.
//!
//! ```text
//! # obmreg dataset manifest
//! seed=7
//! n_points=256
//! ...
//! train 0 pairs/train_0000_src.ply pairs/train_0000_tgt.ply 1234 composite 0.7 0.703 0.01 r00 .. r22 t0 t1 t2
//! ```
//!
//! Parameter lines are `key=value`; pair rows are whitespace-separated.
//! Cloud paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{read_cloud, write_cloud};
use super::pair::{make_pair, PairSpec, ScenePair};
use super::shapes::ShapeKind;
use crate::error::{Error, ParseErrorKind, Result};
use crate::geometry::{Mat3, RigidTransform, Vec3};

/// File name used by [`generate_dataset`].
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Fresh seeds tried when the overlap search fails for a pair.
const SEED_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub id: usize,
    pub source: PathBuf,
    pub target: PathBuf,
    pub seed: u64,
    pub shape: ShapeKind,
    pub overlap: f64,
    pub measured_overlap: f64,
    pub noise_sigma: f64,
    pub gt_transform: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub params: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative cloud paths resolve against.
    pub root: PathBuf,
}

/// Parameters of [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub shapes: Vec<ShapeKind>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    pub n_points: usize,
    pub rot_max_deg: f64,
    pub trans_max: f64,
    pub overlap: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let spec = PairSpec::default();
        Self {
            shapes: vec![ShapeKind::Composite],
            train_pairs: 200,
            val_pairs: 20,
            test_pairs: 50,
            n_points: spec.n_points,
            rot_max_deg: spec.rot_max_deg,
            trans_max: spec.trans_max,
            overlap: spec.target_overlap,
            noise_sigma: spec.noise_sigma,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    fn spec(&self, shape: ShapeKind) -> PairSpec {
        PairSpec {
            shape,
            n_points: self.n_points,
            rot_max_deg: self.rot_max_deg,
            trans_max: self.trans_max,
            target_overlap: self.overlap,
            noise_sigma: self.noise_sigma,
        }
    }

    fn params(&self) -> BTreeMap<String, String> {
        let shapes: Vec<String> = self.shapes.iter().map(ToString::to_string).collect();
        [
            ("seed", self.seed.to_string()),
            ("shapes", shapes.join(",")),
            ("n_points", self.n_points.to_string()),
            ("rot_max_deg", self.rot_max_deg.to_string()),
            ("trans_max", self.trans_max.to_string()),
            ("overlap", self.overlap.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("train_pairs", self.train_pairs.to_string()),
            ("val_pairs", self.val_pairs.to_string()),
            ("test_pairs", self.test_pairs.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Generates every pair in memory, in manifest order, without touching disk.
pub fn generate_pairs(config: &DatasetConfig) -> Result<Vec<(Split, ScenePair)>> {
    if config.shapes.is_empty() {
        return Err(Error::InvalidInput("at least one shape kind is required".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    let counts = [config.train_pairs, config.val_pairs, config.test_pairs];
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for i in 0..count {
            let spec = config.spec(config.shapes[i % config.shapes.len()]);
            let mut attempt = 0;
            let pair = loop {
                match make_pair(&spec, seeds.next_u64()) {
                    Err(Error::OverlapSearch { .. }) if attempt + 1 < SEED_RETRIES => attempt += 1,
                    other => break other?,
                }
            };
            out.push((split, pair));
        }
    }
    Ok(out)
}

/// Generates the dataset into `dir` (cloud files under `dir/pairs`) and
/// writes `dir/manifest.txt`.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    let pairs = generate_pairs(config)?;
    fs::create_dir_all(dir.join("pairs"))?;
    let mut entries = Vec::with_capacity(pairs.len());
    let mut next_id = BTreeMap::new();
    for (split, pair) in pairs {
        let id = next_id.entry(split).or_insert(0usize);
        let source = PathBuf::from(format!("pairs/{split}_{id:04}_src.ply"));
        let target = PathBuf::from(format!("pairs/{split}_{id:04}_tgt.ply"));
        write_cloud(&pair.source, &dir.join(&source))?;
        write_cloud(&pair.target, &dir.join(&target))?;
        entries.push(ManifestEntry {
            split,
            id: *id,
            source,
            target,
            seed: pair.seed,
            shape: pair.shape,
            overlap: pair.overlap,
            measured_overlap: pair.measured_overlap,
            noise_sigma: pair.noise_sigma,
            gt_transform: pair.gt_transform,
        });
        *id += 1;
    }
    let manifest = DatasetManifest {
        params: config.params(),
        entries,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<ScenePair> {
        Ok(ScenePair {
            source: read_cloud(&self.resolve(&entry.source))?,
            target: read_cloud(&self.resolve(&entry.target))?,
            gt_transform: entry.gt_transform.clone(),
            shape: entry.shape,
            overlap: entry.overlap,
            measured_overlap: entry.measured_overlap,
            noise_sigma: entry.noise_sigma,
            seed: entry.seed,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ScenePair>> {
        self.split(split).map(|e| self.load_pair(e)).collect()
    }

    /// Checks split disjointness and that every referenced cloud parses.
    pub fn validate(&self) -> Result<()> {
        let mut keys = HashSet::new();
        let mut files = HashSet::new();
        for e in &self.entries {
            if !keys.insert((e.split, e.id)) {
                return Err(Error::InvalidInput(format!("duplicate entry {} {}", e.split, e.id)));
            }
            for f in [&e.source, &e.target] {
                if !files.insert(f.clone()) {
                    return Err(Error::InvalidInput(format!("{} is referenced twice", f.display())));
                }
            }
            self.load_pair(e)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# obmreg dataset manifest\n");
        for (k, v) in &self.params {
            writeln!(out, "{k}={v}").unwrap();
        }
        out.push_str("# split id source target seed shape overlap measured noise r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2\n");
        for e in &self.entries {
            write!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                e.split,
                e.id,
                e.source.display(),
                e.target.display(),
                e.seed,
                e.shape,
                e.overlap,
                e.measured_overlap,
                e.noise_sigma
            )
            .unwrap();
            let r = e.gt_transform.rotation();
            for i in 0..3 {
                for j in 0..3 {
                    write!(out, " {:.16e}", r[(i, j)]).unwrap();
                }
            }
            for v in e.gt_transform.translation().iter() {
                write!(out, " {v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, root)
    }

    pub fn parse(text: &str, path: &Path, root: PathBuf) -> Result<Self> {
        let err = |line: usize, kind: ParseErrorKind, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            kind,
            message,
        };
        let mut params = BTreeMap::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                if !entries.is_empty() {
                    return Err(err(no, ParseErrorKind::MalformedHeader, "parameter after pair rows".into()));
                }
                params.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 21 {
                return Err(err(no, ParseErrorKind::CountMismatch, format!("expected 21 fields, found {}", t.len())));
            }
            let bad = |what: &str| err(no, ParseErrorKind::NonNumeric, format!("bad {what}"));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(s));
            let split: Split = t[0].parse().map_err(|_| bad("split"))?;
            let id: usize = t[1].parse().map_err(|_| bad("id"))?;
            let seed: u64 = t[4].parse().map_err(|_| bad("seed"))?;
            let shape: ShapeKind = t[5].parse().map_err(|_| bad("shape"))?;
            let m: Vec<f64> = t[9..].iter().map(|s| num(s)).collect::<Result<_>>()?;
            let rotation = Mat3::from_row_slice(&m[..9]);
            let gt_transform = RigidTransform::new(rotation, Vec3::new(m[9], m[10], m[11]))
                .map_err(|e| err(no, ParseErrorKind::NonNumeric, e.to_string()))?;
            entries.push(ManifestEntry {
                split,
                id,
                source: PathBuf::from(t[2]),
                target: PathBuf::from(t[3]),
                seed,
                shape,
                overlap: num(t[6])?,
                measured_overlap: num(t[7])?,
                noise_sigma: num(t[8])?,
                gt_transform,
            });
        }
        Ok(Self { params, entries, root })
    }
}
