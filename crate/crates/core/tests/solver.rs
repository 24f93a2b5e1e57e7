use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obmreg_core::diffmath::{grad_check, Tape, Tensor, Var};
use obmreg_core::error::{Error, Result};
use obmreg_core::geometry::{registration_metrics, Mat3, PointCloud, RigidTransform, Vec3};
use obmreg_core::solver::*;

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn random_transform(rng: &mut ChaCha8Rng, max_deg: f64, max_t: f64) -> RigidTransform {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vec3::new(rng.random_range(-max_t..max_t), rng.random_range(-max_t..max_t), rng.random_range(-max_t..max_t));
    RigidTransform::from_axis_angle(axis, rng.random_range(0.0..max_deg).to_radians(), t).unwrap()
}

#[test]
fn identity_and_known_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src = random_points(30, &mut rng);
    let w = vec![1.0; 30];
    let xf = weighted_kabsch(&src, &src, &w).unwrap();
    assert!(xf.angle_deg() < 1e-9 && xf.translation().norm() < 1e-9);

    let gt = RigidTransform::new(*RigidTransform::rot_z_deg(37.0).rotation(), Vec3::new(0.1, -0.2, 0.3)).unwrap();
    let dst: Vec<Vec3> = src.iter().map(|p| gt.apply_point(p)).collect();
    let m = registration_metrics(&weighted_kabsch(&src, &dst, &w).unwrap(), &gt);
    assert!(m.mie_r < 1e-9 && m.mie_t < 1e-9);
    let w5: Vec<f64> = w.iter().map(|v| v * 5.0).collect();
    let a = weighted_kabsch(&src, &dst, &w5).unwrap();
    let m5 = registration_metrics(&a, &gt);
    assert!(m5.mie_r < 1e-9 && m5.mie_t < 1e-9);
}

#[test]
fn invalid_inputs() {
    let src = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
    assert!(matches!(weighted_kabsch(&src, &src, &[0.0; 3]), Err(Error::InvalidInput(_))));
    assert!(weighted_kabsch(&src, &src, &[1.0, -1.0, 1.0]).is_err());
    assert!(weighted_kabsch(&src, &src[..2], &[1.0; 3]).is_err());
    let collinear = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 2.0, 2.0)];
    assert!(matches!(weighted_kabsch(&collinear, &collinear, &[1.0; 3]), Err(Error::Degenerate(_))));
    // A single point carrying all the weight is degenerate too.
    assert!(matches!(weighted_kabsch(&src, &src, &[1.0, 0.0, 0.0]), Err(Error::Degenerate(_))));
}

#[test]
fn returned_rotation_is_locally_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = random_points(25, &mut rng);
    let gt = random_transform(&mut rng, 90.0, 0.5);
    let dst: Vec<Vec3> = src.iter().map(|p| gt.apply_point(p) + 0.05 * Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let w: Vec<f64> = (0..25).map(|_| rng.random_range(0.1..2.0)).collect();
    let xf = weighted_kabsch(&src, &dst, &w).unwrap();
    let cost = |r: &Mat3| -> f64 {
        // Optimal translation for a fixed rotation.
        let tot: f64 = w.iter().sum();
        let ms = src.iter().zip(&w).fold(Vec3::zeros(), |a, (s, wi)| a + s * (wi / tot));
        let md = dst.iter().zip(&w).fold(Vec3::zeros(), |a, (d, wi)| a + d * (wi / tot));
        let t = md - r * ms;
        src.iter().zip(&dst).zip(&w).map(|((s, d), wi)| wi * (r * s + t - d).norm_squared()).sum()
    };
    let base = cost(xf.rotation());
    for _ in 0..100 {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let small = RigidTransform::from_axis_angle(axis, 0.1f64.to_radians(), Vec3::zeros()).unwrap();
        let r = small.rotation() * xf.rotation();
        assert!(cost(&r) >= base - 1e-12);
    }
}

#[test]
fn tape_kabsch_matches_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = random_points(12, &mut rng);
    let gt = random_transform(&mut rng, 120.0, 1.0);
    let dst: Vec<Vec3> = src.iter().map(|p| gt.apply_point(p) + 0.02 * Vec3::new(rng.random_range(-1.0..1.0), 0.0, 0.0)).collect();
    let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
    let plain = weighted_kabsch(&src, &dst, &w).unwrap();
    let tape = Tape::new();
    let s = tape.constant(PointCloud::new(src.clone()).unwrap().to_tensor());
    let d = tape.constant(PointCloud::new(dst.clone()).unwrap().to_tensor());
    let wv = tape.constant(Tensor::column(w.clone()));
    let tt = weighted_kabsch_tape(&tape, s, d, wv, false).unwrap().value(&tape).unwrap();
    assert!((tt.rotation() - plain.rotation()).abs().max() < 1e-12);
    assert!((tt.translation() - plain.translation()).abs().max() < 1e-12);
}

fn residual_objective(
    src: Tensor,
    dst: Tensor,
    w: Tensor,
    which: usize,
) -> impl Fn(&Tape, Var) -> Result<Var> {
    move |tape, x| {
        let (mut s, mut d, mut wv) = (tape.constant(src.clone()), tape.constant(dst.clone()), tape.constant(w.clone()));
        match which {
            0 => s = x,
            1 => d = x,
            _ => wv = x,
        }
        let xf = weighted_kabsch_tape(tape, s, d, wv, false)?;
        let probe = tape.constant(src.map(|v| v * 0.7 + 0.1));
        let moved = xf.apply(tape, probe)?;
        let r = tape.sub(moved, tape.constant(dst.clone()))?;
        let sq = tape.square(r)?;
        tape.sum(sq)
    }
}

#[test]
fn kabsch_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let src = PointCloud::new(random_points(8, &mut rng)).unwrap().to_tensor();
        let gt = random_transform(&mut rng, 150.0, 1.0);
        let dst = PointCloud::new(
            (0..8)
                .map(|i| gt.apply_point(&Vec3::from_row_slice(src.row(i))) + 0.1 * Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
        .to_tensor();
        let w = Tensor::column((0..8).map(|_| rng.random_range(0.2..2.0)).collect());
        for which in 0..3 {
            let x = [&src, &dst, &w][which].clone();
            let rep = grad_check(residual_objective(src.clone(), dst.clone(), w.clone(), which), &x, 1e-6, 1e-3).unwrap();
            assert!(rep.passed, "input {which}: {}", rep.max_rel_error);
        }
    }
}

#[test]
fn bias_weights() {
    let w = [1.0, 2.0, 3.0];
    assert_eq!(apply_bias_weights(&w, &[0, 2], 1.0).unwrap(), w.to_vec());
    assert_eq!(apply_bias_weights(&w, &[0, 2], 2.0).unwrap(), vec![2.0, 2.0, 6.0]);
    assert_eq!(apply_bias_weights(&w, &[], 5.0).unwrap(), w.to_vec());
    assert!(apply_bias_weights(&w, &[3], 2.0).is_err());
    assert!(apply_bias_weights(&w, &[0], 0.0).is_err());

    let tape = Tape::new();
    let wv = tape.constant(Tensor::column(w.to_vec()));
    let a = tape.constant(Tensor::scalar(2.0));
    assert_eq!(tape.value(apply_bias(&tape, wv, &[0, 2], a).unwrap()).data(), &[2.0, 2.0, 6.0]);
    assert_eq!(tape.value(apply_bias(&tape, wv, &[], a).unwrap()).data(), &w);
}

#[test]
fn bias_on_inliers_suppresses_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let src = random_points(40, &mut rng);
    let gt = random_transform(&mut rng, 60.0, 0.5);
    let mut dst: Vec<Vec3> = src.iter().map(|p| gt.apply_point(p)).collect();
    for d in dst.iter_mut().skip(30) {
        *d += Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    }
    let w = vec![1.0; 40];
    let inliers: Vec<usize> = (0..30).collect();
    let err = |alpha: f64| {
        let biased = apply_bias_weights(&w, &inliers, alpha).unwrap();
        registration_metrics(&weighted_kabsch(&src, &dst, &biased).unwrap(), &gt).mie_r
    };
    assert!(err(10.0) < err(1.0));
    // Biasing every point cancels.
    let all: Vec<usize> = (0..40).collect();
    let a = weighted_kabsch(&src, &dst, &apply_bias_weights(&w, &all, 7.0).unwrap()).unwrap();
    let b = weighted_kabsch(&src, &dst, &w).unwrap();
    assert!((a.rotation() - b.rotation()).abs().max() < 1e-12);
}

#[test]
fn icp_recovers_small_motions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = PointCloud::new(random_points(200, &mut rng)).unwrap();
    let same = icp_baseline(&p, &p, 50, 1e-10).unwrap();
    assert_eq!(same.iterations, 1);
    assert!(same.transform.angle_deg() < 1e-9 && same.transform.translation().norm() < 1e-9);

    let gt = RigidTransform::from_axis_angle(Vec3::new(0.3, 0.4, 1.0), 5f64.to_radians(), Vec3::new(0.01, 0.0, -0.01)).unwrap();
    let q = p.transformed(&gt);
    let res = icp_baseline(&p, &q, 100, 1e-12).unwrap();
    assert!(registration_metrics(&res.transform, &gt).mie_r < 0.1);
    assert!(icp_baseline(&p, &q, 0, 1e-12).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn kabsch_output_is_a_rotation_and_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = random_points(10, &mut rng);
        let dst = random_points(10, &mut rng);
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..1.0)).collect();
        let a = weighted_kabsch(&src, &dst, &w).unwrap();
        let r = a.rotation();
        prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
        let b = weighted_kabsch(&src, &dst, &wc).unwrap();
        prop_assert!((a.rotation() - b.rotation()).abs().max() < 1e-12);
        prop_assert!((a.translation() - b.translation()).abs().max() < 1e-12);
    }
}
