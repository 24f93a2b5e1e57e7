//! Rigid-motion algebra, the point-cloud container and registration metrics.
//!
//! Rotation metrics follow two fixed conventions:
//!
//! * MAE(R) decomposes both rotations as intrinsic ZYX Euler angles
//!   (`R = Rz(yaw) * Ry(pitch) * Rx(roll)`), wraps each per-angle difference
//!   into `[-180, 180)` degrees and averages the absolute values.
//! * MIE(t) is the Euclidean norm of the translation difference.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `RᵀR = I` and `det R = 1` accepted by [`RigidTransform::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Default overlap distance threshold, in unit-sphere shape units.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud must not be empty".into()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("point coordinates must be finite".into()));
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        if normals.len() != cloud.len() {
            return Err(Error::InvalidInput(format!(
                "{} normals for {} points",
                normals.len(),
                cloud.len()
            )));
        }
        if normals.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::InvalidInput("normals must have unit length".into()));
        }
        cloud.normals = Some(normals);
        Ok(cloud)
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.len() as f64
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                op: "PointCloud::select",
                index: bad,
                extent: self.len(),
            });
        }
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| indices.iter().map(|&i| n[i]).collect());
        let mut out = Self::new(points)?;
        out.normals = normals;
        Ok(out)
    }

    /// Row-major `N x 3` tensor of the coordinates.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Tensor::from_vec(vec![self.len(), 3], data).expect("N x 3 layout")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.cols() != 3 {
            return Err(Error::shape("PointCloud::from_tensor", format!("{:?}", t.shape())));
        }
        Self::new(
            t.data()
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn transformed(&self, xf: &RigidTransform) -> Self {
        apply_transform(self, xf)
    }
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("transform entries must be finite".into()));
        }
        let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if orth > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "not a proper rotation (orthogonality error {orth:.3e}, det {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation of `angle_rad` about `axis` (normalized here) plus a translation.
    pub fn from_axis_angle(axis: Vec3, angle_rad: f64, translation: Vec3) -> Result<Self> {
        if axis.norm() == 0.0 || !axis.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("rotation axis must be non-zero".into()));
        }
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad);
        Ok(Self {
            rotation: *rot.matrix(),
            translation,
        })
    }

    pub fn rot_z_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self {
            rotation: Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vec3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Geodesic rotation angle in degrees, in `[0, 180]`.
    pub fn angle_deg(&self) -> f64 {
        rotation_angle(&self.rotation).to_degrees()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Intrinsic ZYX Euler angles `(yaw, pitch, roll)` in degrees.
    pub fn euler_zyx_deg(&self) -> [f64; 3] {
        let r = &self.rotation;
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        [yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees()]
    }
}

/// Angle of a rotation matrix in radians, via `atan2(sin, cos)` so that
/// angles near 0 keep full relative precision.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let sin2 = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    let cos2 = r.trace() - 1.0;
    sin2.atan2(cos2)
}

pub fn apply_transform(cloud: &PointCloud, xf: &RigidTransform) -> PointCloud {
    let points = cloud.points.iter().map(|p| xf.apply_point(p)).collect();
    let normals = cloud
        .normals
        .as_ref()
        .map(|n| n.iter().map(|v| xf.rotation * v).collect());
    PointCloud { points, normals }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegistrationMetrics {
    /// Degrees.
    pub mae_r: f64,
    pub mae_t: f64,
    /// Degrees.
    pub mie_r: f64,
    pub mie_t: f64,
}

fn wrap_deg(d: f64) -> f64 {
    (d + 180.0).rem_euclid(360.0) - 180.0
}

pub fn registration_metrics(pred: &RigidTransform, gt: &RigidTransform) -> RegistrationMetrics {
    let rel = pred.rotation.transpose() * gt.rotation;
    let mie_r = rotation_angle(&rel).to_degrees();
    let dt = pred.translation - gt.translation;
    let (ep, eg) = (pred.euler_zyx_deg(), gt.euler_zyx_deg());
    let mae_r = ep
        .iter()
        .zip(&eg)
        .map(|(a, b)| wrap_deg(a - b).abs())
        .sum::<f64>()
        / 3.0;
    RegistrationMetrics {
        mae_r,
        mae_t: dt.abs().sum() / 3.0,
        mie_r,
        mie_t: dt.norm(),
    }
}

/// Fraction of points of `a` whose nearest neighbour in `b` lies within `threshold`.
pub fn overlap_ratio(a: &PointCloud, b: &PointCloud, threshold: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("overlap_ratio of an empty cloud".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be > 0, got {threshold}")));
    }
    let t2 = threshold * threshold;
    let hits = a
        .points
        .iter()
        .filter(|p| b.points.iter().any(|q| (*p - q).norm_squared() <= t2))
        .count();
    Ok(hits as f64 / a.len() as f64)
}
