use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, Vec3};

/// Smallest cloud [`generate_shape`] produces.
pub const MIN_SHAPE_POINTS: usize = 64;

/// Cube half-extent placing the corners on the unit sphere.
pub const CUBE_HALF_EXTENT: f64 = 0.577_350_269_189_625_8;

pub const CYLINDER_RADIUS: f64 = 0.6;
pub const CYLINDER_HALF_HEIGHT: f64 = 0.8;
pub const TORUS_MAJOR: f64 = 0.7;
pub const TORUS_MINOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Composite,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Composite,
    ];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Composite => "composite",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown shape kind `{s}`")))
    }
}

/// A primitive surface that can be sampled uniformly by area.
#[derive(Debug, Clone, Copy)]
enum Primitive {
    Sphere { radius: f64 },
    Box { half: Vec3 },
    Cylinder { radius: f64, half_height: f64 },
    Torus { major: f64, minor: f64 },
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

impl Primitive {
    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Sphere { radius } => 4.0 * PI * radius * radius,
            Primitive::Box { half } => 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z),
            Primitive::Cylinder { radius, half_height } => 2.0 * PI * radius * (2.0 * half_height + radius),
            Primitive::Torus { major, minor } => 4.0 * PI * PI * major * minor,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Sphere { radius } => unit_vector(rng) * radius,
            Primitive::Box { half } => {
                // Face pairs weighted by area: x-faces span y*z, and so on.
                let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && pick >= areas[axis] {
                    pick -= areas[axis];
                    axis += 1;
                }
                let mut p = Vec3::new(
                    rng.random_range(-half.x..=half.x),
                    rng.random_range(-half.y..=half.y),
                    rng.random_range(-half.z..=half.z),
                );
                p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
                p
            }
            Primitive::Cylinder { radius, half_height } => {
                let side = 2.0 * half_height;
                let u = rng.random_range(0.0..side + radius);
                let theta = rng.random_range(0.0..2.0 * PI);
                if u < side {
                    Vec3::new(radius * theta.cos(), radius * theta.sin(), rng.random_range(-half_height..=half_height))
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let z = if rng.random_bool(0.5) { half_height } else { -half_height };
                    Vec3::new(r * theta.cos(), r * theta.sin(), z)
                }
            }
            Primitive::Torus { major, minor } => {
                // Rejection on the tube angle: the area element is
                // proportional to major + minor cos(v).
                let v = loop {
                    let v = rng.random_range(0.0..2.0 * PI);
                    let accept = (major + minor * v.cos()) / (major + minor);
                    if rng.random::<f64>() <= accept {
                        break v;
                    }
                };
                let u = rng.random_range(0.0..2.0 * PI);
                let ring = major + minor * v.cos();
                Vec3::new(ring * u.cos(), ring * u.sin(), minor * v.sin())
            }
        }
    }
}

fn sample_primitive(prim: Primitive, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    (0..n).map(|_| prim.sample(rng)).collect()
}

/// Random asymmetric assembly of 3 to 5 posed primitives, centred on its
/// centroid and scaled so the farthest point lies on the unit sphere.
fn composite(n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let parts = rng.random_range(3..=5);
    let mut posed = Vec::with_capacity(parts);
    for _ in 0..parts {
        let prim = match rng.random_range(0..4) {
            0 => Primitive::Sphere { radius: rng.random_range(0.15..0.35) },
            1 => Primitive::Box {
                half: Vec3::new(rng.random_range(0.08..0.4), rng.random_range(0.08..0.4), rng.random_range(0.08..0.4)),
            },
            2 => Primitive::Cylinder {
                radius: rng.random_range(0.08..0.25),
                half_height: rng.random_range(0.15..0.45),
            },
            _ => {
                let major = rng.random_range(0.2..0.35);
                Primitive::Torus {
                    major,
                    minor: rng.random_range(0.05..0.4 * major),
                }
            }
        };
        let pose = RigidTransform::from_axis_angle(
            unit_vector(rng),
            rng.random_range(0.0..std::f64::consts::PI),
            Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        )
        .expect("unit axis");
        posed.push((prim, pose));
    }
    // Largest-remainder split of the point budget by surface area.
    let total: f64 = posed.iter().map(|(p, _)| p.area()).sum();
    let shares: Vec<f64> = posed.iter().map(|(p, _)| p.area() / total * n as f64).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..parts).collect();
    order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())));
    for &i in order.iter().take(n - counts.iter().sum::<usize>()) {
        counts[i] += 1;
    }
    let mut points = Vec::with_capacity(n);
    for ((prim, pose), count) in posed.iter().zip(counts) {
        points.extend(sample_primitive(*prim, count, rng).iter().map(|p| pose.apply_point(p)));
    }
    let c = points.iter().sum::<Vec3>() / n as f64;
    let radius = points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    points.iter().map(|p| (p - c) / radius).collect()
}

/// Uniform surface samples of an analytic shape that fits in the unit
/// sphere.
pub fn generate_shape(kind: ShapeKind, n_points: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if n_points < MIN_SHAPE_POINTS {
        return Err(Error::InvalidInput(format!(
            "shapes need at least {MIN_SHAPE_POINTS} points, got {n_points}"
        )));
    }
    let points = match kind {
        ShapeKind::Sphere => sample_primitive(Primitive::Sphere { radius: 1.0 }, n_points, rng),
        ShapeKind::Cube => sample_primitive(
            Primitive::Box {
                half: Vec3::repeat(CUBE_HALF_EXTENT),
            },
            n_points,
            rng,
        ),
        ShapeKind::Cylinder => sample_primitive(
            Primitive::Cylinder {
                radius: CYLINDER_RADIUS,
                half_height: CYLINDER_HALF_HEIGHT,
            },
            n_points,
            rng,
        ),
        ShapeKind::Torus => sample_primitive(
            Primitive::Torus {
                major: TORUS_MAJOR,
                minor: TORUS_MINOR,
            },
            n_points,
            rng,
        ),
        ShapeKind::Composite => composite(n_points, rng),
    };
    PointCloud::new(points)
}
