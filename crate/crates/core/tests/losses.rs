use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obmreg_core::diffmath::{grad_check, Tape, Tensor};
use obmreg_core::geometry::{PointCloud, RigidTransform, Vec3};
use obmreg_core::losses::*;
use obmreg_core::solver::TapeTransform;

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn tape_transform(tape: &Tape, xf: &RigidTransform) -> TapeTransform {
    let r = xf.rotation();
    let data = (0..9).map(|i| r[(i / 3, i % 3)]).collect();
    TapeTransform {
        rotation: tape.constant(Tensor::matrix(3, 3, data).unwrap()),
        translation: tape.constant(Tensor::matrix(1, 3, xf.translation().as_slice().to_vec()).unwrap()),
    }
}

fn huber(x: f64) -> f64 {
    if x <= 1.0 {
        0.5 * x * x
    } else {
        x - 0.5
    }
}

#[test]
fn global_loss_values() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0]]));
    let b = tape.constant(Tensor::from_rows(&[[0.5, 0.0, 0.0]]));
    for mode in [MinMode::Hard, MinMode::Soft(100.0)] {
        let l = tape.value(global_alignment_loss(&tape, a, b, 1.0, mode).unwrap()).item();
        assert!((l - 0.0625).abs() < 1e-15, "{mode:?}: {l}");
        let z = tape.value(global_alignment_loss(&tape, b, b, 1.0, mode).unwrap()).item();
        assert_eq!(z, 0.0);
    }
}

fn brute_global(p: &[Vec3], q: &[Vec3]) -> f64 {
    let dir = |a: &[Vec3], b: &[Vec3]| -> f64 {
        a.iter()
            .map(|x| huber(b.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min)))
            .sum()
    };
    dir(p, q) + dir(q, p)
}

#[test]
fn global_loss_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        // Spread out so that nearest and second-nearest distances are
        // well separated relative to 1/sharpness.
        let p: Vec<Vec3> = random_points(8, &mut rng).into_iter().map(|v| v * 3.0).collect();
        let q: Vec<Vec3> = random_points(7, &mut rng).into_iter().map(|v| v * 3.0).collect();
        let tape = Tape::new();
        let pv = tape.constant(PointCloud::new(p.clone()).unwrap().to_tensor());
        let qv = tape.constant(PointCloud::new(q.clone()).unwrap().to_tensor());
        let oracle = brute_global(&p, &q);
        let hard = tape.value(global_alignment_loss(&tape, pv, qv, 1.0, MinMode::Hard).unwrap()).item();
        assert!((hard - oracle).abs() < 1e-12);
        let soft = tape.value(global_alignment_loss(&tape, pv, qv, 1.0, MinMode::Soft(100.0)).unwrap()).item();
        assert!((soft - oracle).abs() < 1e-3 * oracle, "{soft} vs {oracle}");
        assert!(soft <= oracle + 1e-12);
    }
}

#[test]
fn global_loss_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = PointCloud::new(random_points(9, &mut rng)).unwrap();
    let q = PointCloud::new(random_points(6, &mut rng)).unwrap();
    let eval = |p: &PointCloud, q: &PointCloud| {
        let tape = Tape::new();
        let (a, b) = (tape.constant(p.to_tensor()), tape.constant(q.to_tensor()));
        tape.value(global_alignment_loss(&tape, a, b, 1.0, MinMode::Soft(100.0)).unwrap()).item()
    };
    let base = eval(&p, &q);
    let pp = p.select(&[3, 1, 8, 0, 2, 7, 4, 6, 5]).unwrap();
    let qp = q.select(&[5, 4, 3, 2, 1, 0]).unwrap();
    assert!((eval(&pp, &qp) - base).abs() < 1e-12);
}

#[test]
fn global_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = PointCloud::new(random_points(6, &mut rng)).unwrap().to_tensor();
        let q = PointCloud::new(random_points(5, &mut rng)).unwrap().to_tensor();
        for mode in [MinMode::Soft(100.0), MinMode::Soft(5.0), MinMode::Hard] {
            let q = q.clone();
            let rep = grad_check(
                move |tape, x| global_alignment_loss(tape, x, tape.constant(q.clone()), 0.3, mode),
                &p,
                1e-7,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed, "{mode:?}: {}", rep.max_rel_error);
        }
    }
}

fn brute_neighborhood(
    p: &[Vec3],
    q: &[Vec3],
    x_idx: &[usize],
    y: &[Vec3],
    xf: &RigidTransform,
    k: usize,
) -> f64 {
    let knn = |base: &[Vec3], c: &Vec3| {
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.sort_by(|&a, &b| (base[a] - c).norm_squared().total_cmp(&(base[b] - c).norm_squared()).then(a.cmp(&b)));
        order.truncate(k);
        order
    };
    let mut total = 0.0;
    for (i, &xi) in x_idx.iter().enumerate() {
        let np = knn(p, &p[xi]);
        let nq = knn(q, &y[i]);
        for r in 0..k {
            total += (xf.apply_point(&p[np[r]]) - q[nq[r]]).norm();
        }
    }
    total
}

#[test]
fn neighborhood_loss_values() {
    // Single pair, single neighbour, R = I, t = (1, 0, 0), q = p.
    let p = PointCloud::from_rows(&[[0.2, 0.3, 0.4]]).unwrap();
    let tape = Tape::new();
    let xf = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
    let l = neighborhood_agreement_loss(&tape, &p, &p, &[0], &p.to_tensor(), &tape_transform(&tape, &xf), 1).unwrap();
    assert!((tape.value(l).item() - 1.0).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pc = PointCloud::new(random_points(20, &mut rng)).unwrap();
    let gt = RigidTransform::from_axis_angle(Vec3::new(1.0, 2.0, 0.5), 0.8, Vec3::new(0.1, 0.2, 0.3)).unwrap();
    let qc = pc.transformed(&gt);
    let idx: Vec<usize> = (0..10).collect();
    let y = qc.select(&idx).unwrap().to_tensor();
    let l = neighborhood_agreement_loss(&tape, &pc, &qc, &idx, &y, &tape_transform(&tape, &gt), 3).unwrap();
    assert!(tape.value(l).item() < 1e-12);
    assert!(neighborhood_agreement_loss(&tape, &pc, &qc, &idx, &y, &tape_transform(&tape, &gt), 21).is_err());
}

#[test]
fn neighborhood_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let p = random_points(8, &mut rng);
        let q = random_points(8, &mut rng);
        let x_idx: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..8)).collect();
        let y: Vec<Vec3> = x_idx.iter().map(|_| random_points(1, &mut rng)[0] * 0.5).collect();
        let xf = RigidTransform::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), rng.random_range(0.0..3.0), Vec3::new(0.1, 0.0, 0.0)).unwrap();
        let k = rng.random_range(1..=3);
        let tape = Tape::new();
        let (pc, qc) = (PointCloud::new(p.clone()).unwrap(), PointCloud::new(q.clone()).unwrap());
        let yt = PointCloud::new(y.clone()).unwrap().to_tensor();
        let l = neighborhood_agreement_loss(&tape, &pc, &qc, &x_idx, &yt, &tape_transform(&tape, &xf), k).unwrap();
        let oracle = brute_neighborhood(&p, &q, &x_idx, &y, &xf, k);
        assert!((tape.value(l).item() - oracle).abs() < 1e-10);
    }
}

#[test]
fn neighborhood_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let p = PointCloud::new(random_points(10, &mut rng)).unwrap();
        let q = PointCloud::new(random_points(10, &mut rng)).unwrap();
        let y = q.select(&[0, 1, 2, 3]).unwrap().to_tensor();
        let t0 = Tensor::from_rows(&[[0.1, -0.2, 0.05]]);
        let rot = Tensor::from_rows(&[[1.0, 0.2, 0.0], [-0.1, 0.9, 0.3], [0.0, 0.1, 1.1]]);
        let rep = grad_check(
            |tape, x| {
                let xf = TapeTransform { rotation: x, translation: tape.constant(t0.clone()) };
                neighborhood_agreement_loss(tape, &p, &q, &[4, 5, 6, 7], &y, &xf, 2)
            },
            &rot,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }
}

#[test]
fn spatial_loss_values() {
    let tape = Tape::new();
    let m = tape.constant(Tensor::from_rows(&[[0.0, 1.0, 0.0], [0.7, 0.2, 0.1], [0.25, 0.25, 0.5]]));
    let v = |rows: &[usize]| tape.value(spatial_consistency_loss(&tape, m, rows).unwrap()).item();
    assert_eq!(v(&[0]), 0.0);
    assert!((v(&[1]) - 0.356_674_943_938_732_4).abs() < 1e-12);
    assert!((v(&[0, 1]) - 0.356_674_943_938_732_4 / 2.0).abs() < 1e-12);
    let u = tape.constant(Tensor::full(&[1, 5], 0.2));
    assert!((tape.value(spatial_consistency_loss(&tape, u, &[0]).unwrap()).item() - 5f64.ln()).abs() < 1e-12);
    assert!(spatial_consistency_loss(&tape, m, &[]).is_err());
}

#[test]
fn spatial_loss_decreases_when_sharpening() {
    let tape = Tape::new();
    let mut prev = f64::INFINITY;
    for s in 0..=20 {
        let lam = s as f64 / 20.0;
        let row: Vec<f64> = (0..4).map(|j| (1.0 - lam) * 0.25 + if j == 2 { lam } else { 0.0 }).collect();
        let m = tape.constant(Tensor::matrix(1, 4, row).unwrap());
        let l = tape.value(spatial_consistency_loss(&tape, m, &[0]).unwrap()).item();
        assert!(l < prev || (s == 0));
        assert!(l >= 0.0);
        prev = l;
    }
    assert!(prev.abs() < 1e-15);
}

#[test]
fn spatial_loss_matches_loop_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (n, m) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let logits = Tensor::matrix(n, m, (0..n * m).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let rows: Vec<usize> = (0..rng.random_range(1..=n)).map(|_| rng.random_range(0..n)).collect();
        let tape = Tape::new();
        let map = tape.softmax(tape.constant(logits.clone()), 1).unwrap();
        let v = tape.value(map);
        let oracle = -rows
            .iter()
            .map(|&r| v.row(r).iter().copied().fold(f64::MIN, f64::max).ln())
            .sum::<f64>()
            / rows.len() as f64;
        let got = tape.value(spatial_consistency_loss(&tape, map, &rows).unwrap()).item();
        assert!((got - oracle).abs() < 1e-10);
        let rows2 = rows.clone();
        let rep = grad_check(
            move |tape, x| {
                let map = tape.softmax(x, 1)?;
                spatial_consistency_loss(tape, map, &rows2)
            },
            &logits,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }
}

#[test]
fn total_is_the_plain_sum() {
    let tape = Tape::new();
    let c = |v: f64| Some(tape.constant(Tensor::scalar(v)));
    let (t, b) = total_loss(&tape, c(1.0), c(2.0), c(3.0)).unwrap();
    assert_eq!(tape.value(t).item(), 6.0);
    assert_eq!(b, LossBreakdown { l_g: 1.0, l_n: 2.0, l_s: 3.0, total: 6.0 });
    let (t, _) = total_loss(&tape, c(0.0), c(0.0), c(0.0)).unwrap();
    assert_eq!(tape.value(t).item(), 0.0);
    assert!(total_loss(&tape, None, None, None).is_err());
    assert!(LossBreakdown::from_parts(f64::NAN, 0.0, 0.0).is_err());
}

#[test]
fn top_k_ordering() {
    assert_eq!(top_k_indices(&[0.5, 2.0, 1.0, 2.0], 3), vec![1, 3, 2]);
    assert_eq!(top_k_indices(&[1.0, 2.0], 5), vec![1, 0]);
    assert!(LossConfig { use_global: false, use_neighborhood: false, use_spatial: false, ..Default::default() }.validate().is_err());
}
