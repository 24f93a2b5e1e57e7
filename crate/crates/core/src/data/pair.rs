use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::shapes::{generate_shape, ShapeKind};
use crate::error::{Error, Result};
use crate::geometry::{apply_transform, overlap_ratio, PointCloud, RigidTransform, Vec3, DEFAULT_OVERLAP_THRESHOLD};

/// Allowed gap between requested and measured overlap.
pub const OVERLAP_TOLERANCE: f64 = 0.05;

/// Bisection steps per cropping-plane draw.
pub const BISECTION_STEPS: usize = 50;

/// Cropping-plane pairs tried before giving up.
pub const PLANE_ATTEMPTS: usize = 20;

/// The dense surface stream holds this many times the cloud size.
const DENSE_FACTOR: usize = 8;

/// Parameters of one synthetic registration pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub shape: ShapeKind,
    pub n_points: usize,
    pub rot_max_deg: f64,
    pub trans_max: f64,
    pub target_overlap: f64,
    pub noise_sigma: f64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            shape: ShapeKind::Composite,
            n_points: 256,
            rot_max_deg: 45.0,
            trans_max: 0.5,
            target_overlap: 0.7,
            noise_sigma: 0.01,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_overlap > 0.1 && self.target_overlap <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "target overlap must lie in (0.1, 1], got {}",
                self.target_overlap
            )));
        }
        if !(0.0..=180.0).contains(&self.rot_max_deg) {
            return Err(Error::InvalidInput(format!("rot_max_deg {} outside [0, 180]", self.rot_max_deg)));
        }
        if !(self.trans_max >= 0.0 && self.trans_max.is_finite()) {
            return Err(Error::InvalidInput(format!("trans_max {} must be finite and >= 0", self.trans_max)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// A source/target pair with `target ≈ gt_transform(source)` on the shared region.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt_transform: RigidTransform,
    pub shape: ShapeKind,
    pub overlap: f64,
    /// Overlap of the noiseless clouds under the ground-truth transform.
    pub measured_overlap: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn random_transform(rot_max_deg: f64, trans_max: f64, rng: &mut impl Rng) -> RigidTransform {
    let axis = loop {
        let v = Vec3::new(
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
        );
        if v.norm() > 1e-12 {
            break v.normalize();
        }
    };
    let angle = rng.random::<f64>() * rot_max_deg.to_radians();
    let t = if trans_max > 0.0 {
        Vec3::new(
            rng.random_range(-trans_max..=trans_max),
            rng.random_range(-trans_max..=trans_max),
            rng.random_range(-trans_max..=trans_max),
        )
    } else {
        Vec3::zeros()
    };
    RigidTransform::from_axis_angle(axis, angle, t).expect("unit axis")
}

/// Indices of the `n` points of `dense[..prefix]` with the largest
/// projection on `normal`: a half-space crop whose offset is the n-th
/// largest projection.
fn crop(dense: &[Vec3], prefix: usize, normal: &Vec3, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..prefix).collect();
    idx.sort_by(|&a, &b| normal.dot(&dense[b]).total_cmp(&normal.dot(&dense[a])).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn measure(dense: &[Vec3], src: &[usize], tgt: &[usize]) -> Result<f64> {
    let s = PointCloud::new(src.iter().map(|&i| dense[i]).collect())?;
    let t = PointCloud::new(tgt.iter().map(|&i| dense[i]).collect())?;
    overlap_ratio(&s, &t, DEFAULT_OVERLAP_THRESHOLD)
}

/// Generates a pair as a pure function of `(spec, seed)`.
///
/// Both clouds are half-space crops of one shuffled dense surface sample.
/// The crop depth is controlled by how much of the dense stream is visible:
/// with `n` visible points both crops are everything and the overlap is 1,
/// with more visible points each crop shrinks toward its own cap. The
/// visible count is bisected until the measured overlap is within
/// [`OVERLAP_TOLERANCE`] of the target.
pub fn make_pair(spec: &PairSpec, seed: u64) -> Result<ScenePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_points;
    let gt = random_transform(spec.rot_max_deg, spec.trans_max, &mut rng);

    let (mut src, mut tgt, dense, measured) = if spec.target_overlap >= 1.0 {
        let dense = generate_shape(spec.shape, n, &mut rng)?.points().to_vec();
        let all: Vec<usize> = (0..n).collect();
        (all.clone(), all, dense, 1.0)
    } else {
        let mut dense = generate_shape(spec.shape, DENSE_FACTOR * n, &mut rng)?.points().to_vec();
        dense.shuffle(&mut rng);
        let mut best = f64::NAN;
        let mut found = None;
        'planes: for _ in 0..PLANE_ATTEMPTS {
            let n1 = unit(&mut rng);
            let n2 = unit(&mut rng);
            // Overlap decreases (roughly) as the visible prefix grows.
            let (mut lo, mut hi) = (n, DENSE_FACTOR * n);
            let at_hi = measure(&dense, &crop(&dense, hi, &n1, n), &crop(&dense, hi, &n2, n))?;
            if at_hi > spec.target_overlap + OVERLAP_TOLERANCE {
                best = closer(best, at_hi, spec.target_overlap);
                continue;
            }
            for _ in 0..BISECTION_STEPS {
                let mid = (lo + hi) / 2;
                let (s, t) = (crop(&dense, mid, &n1, n), crop(&dense, mid, &n2, n));
                let ov = measure(&dense, &s, &t)?;
                best = closer(best, ov, spec.target_overlap);
                if (ov - spec.target_overlap).abs() <= OVERLAP_TOLERANCE {
                    found = Some((s, t, ov));
                    break 'planes;
                }
                if ov > spec.target_overlap {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1 {
                    break;
                }
            }
        }
        let (s, t, ov) = found.ok_or(Error::OverlapSearch {
            steps: BISECTION_STEPS * PLANE_ATTEMPTS,
            target: spec.target_overlap,
            best,
        })?;
        (s, t, dense, ov)
    };

    src.shuffle(&mut rng);
    tgt.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut jitter = |p: Vec3| -> Vec3 {
        if spec.noise_sigma > 0.0 {
            p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            p
        }
    };
    let source: Vec<Vec3> = src.iter().map(|&i| jitter(dense[i])).collect();
    let target: Vec<Vec3> = tgt.iter().map(|&i| jitter(gt.apply_point(&dense[i]))).collect();
    Ok(ScenePair {
        source: PointCloud::new(source)?,
        target: PointCloud::new(target)?,
        gt_transform: gt,
        shape: spec.shape,
        overlap: spec.target_overlap,
        measured_overlap: measured,
        noise_sigma: spec.noise_sigma,
        seed,
    })
}

fn unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn closer(best: f64, candidate: f64, target: f64) -> f64 {
    if best.is_nan() || (candidate - target).abs() < (best - target).abs() {
        candidate
    } else {
        best
    }
}

/// Overlap of a pair's noiseless geometry, re-measured from the stored clouds.
pub fn pair_overlap(pair: &ScenePair) -> Result<f64> {
    overlap_ratio(
        &apply_transform(&pair.source, &pair.gt_transform),
        &pair.target,
        DEFAULT_OVERLAP_THRESHOLD,
    )
}
