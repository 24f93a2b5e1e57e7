use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obmreg_core::diffmath::{grad_check, KnnIndices, Tape, Tensor, Var};
use obmreg_core::features::FeatureMap;
use obmreg_core::geometry::{PointCloud, RigidTransform, Vec3};
use obmreg_core::nmm::*;
use obmreg_core::obmm::argmax;

fn random_matrix(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_knn(n: usize, k: usize, rng: &mut ChaCha8Rng) -> KnnIndices {
    KnnIndices {
        k,
        indices: (0..n * k).map(|_| rng.random_range(0..n)).collect(),
    }
}

/// Straight loops over the definitions, sharing no code with the tape.
struct Oracle {
    p: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
    big_d: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    mr: Vec<Vec<f64>>,
}

fn oracle(fp: &Tensor, fq: &Tensor, src: &KnnIndices, tgt: &KnnIndices, gamma: f64, beta: f64) -> Oracle {
    let (n, m, k) = (fp.rows(), fq.rows(), src.k);
    let mut dist = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for c in 0..fp.cols() {
                acc += (fp.get(i, c) - fq.get(j, c)).powi(2);
            }
            dist[i][j] = acc.sqrt();
        }
    }
    let softmax_neg = |row: &[f64]| {
        let mn = row.iter().copied().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = row.iter().map(|v| (mn - v).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let p: Vec<Vec<f64>> = dist.iter().map(|r| softmax_neg(r)).collect();
    let mut d = vec![vec![0.0; m]; n];
    let mut sum_r = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for a in 0..k {
                let pa = src.indices[i * k + a];
                let mut r = 0.0;
                for b in 0..k {
                    r += p[pa][tgt.indices[j * k + b]];
                }
                d[i][j] += (1.0 - r) * (1.0 - r);
                sum_r[i][j] += r;
            }
        }
    }
    let mut big_d = vec![vec![0.0; m]; n];
    let mut s = vec![vec![0.0; m]; n];
    let mut mr = vec![vec![0.0; m]; n];
    for i in 0..n {
        let inv: Vec<f64> = d[i].iter().map(|v| 1.0 / (v + 1e-12) + beta).collect();
        let z: f64 = inv.iter().sum();
        for j in 0..m {
            big_d[i][j] = inv[j] / z;
            s[i][j] = big_d[i][j] * sum_r[i][j] / k as f64;
        }
        let me: Vec<f64> = (0..m).map(|j| (gamma - s[i][j]).exp() * dist[i][j]).collect();
        mr[i] = softmax_neg(&me);
    }
    Oracle { p, d, big_d, s, mr }
}

fn assert_close(t: &Tensor, o: &[Vec<f64>], tol: f64, what: &str) {
    for (i, row) in o.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((t.get(i, j) - v).abs() <= tol, "{what}[{i},{j}]: {} vs {v}", t.get(i, j));
        }
    }
}

#[test]
fn raw_distances() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[[0.0], [1.0]]));
    let b = tape.constant(Tensor::from_rows(&[[3.0]]));
    assert_eq!(tape.value(raw_distance_map(&tape, a, b).unwrap()).data(), &[3.0, 2.0]);
    let same = tape.value(raw_distance_map(&tape, a, a).unwrap());
    assert_eq!(same.get(0, 0), 0.0);
    assert_eq!(same.get(1, 1), 0.0);
    let c = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]));
    assert!(raw_distance_map(&tape, a, c).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fp = random_matrix(20, 8, 1.0, &mut rng);
    let fq = random_matrix(30, 8, 1.0, &mut rng);
    let m = tape.value(raw_distance_map(&tape, tape.constant(fp.clone()), tape.constant(fq.clone())).unwrap());
    for i in 0..20 {
        for j in 0..30 {
            let naive = (0..8).map(|c| (fp.get(i, c) - fq.get(j, c)).powi(2)).sum::<f64>().sqrt();
            assert!((m.get(i, j) - naive).abs() < 1e-10);
        }
    }
}

#[test]
fn stages_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..12 {
        let n = rng.random_range(3..=8);
        let m = rng.random_range(3..=8);
        let k = rng.random_range(1..=3);
        let fp = random_matrix(n, 4, 1.5, &mut rng);
        let fq = random_matrix(m, 4, 1.5, &mut rng);
        let src = random_knn(n, k, &mut rng);
        let tgt = random_knn(m, k, &mut rng);
        let cfg = NmmConfig { k_match: k, gamma: 1.0, beta: 1e-6 };
        let tape = Tape::new();
        let map = refine_matching(&tape, &cfg, tape.constant(fp.clone()), tape.constant(fq.clone()), &src, &tgt).unwrap();
        let o = oracle(&fp, &fq, &src, &tgt, 1.0, 1e-6);
        assert_close(&tape.value(map.m_prime), &o.p, 1e-10, "P");
        assert_close(&tape.value(map.d_weights), &o.big_d, 1e-10, "D");
        assert_close(&tape.value(map.s_scores), &o.s, 1e-10, "S");
        assert_close(&tape.value(map.m_refined), &o.mr, 1e-10, "Mr");
        let (d, _) = weighted_distance(&tape, map.consensus, k, 1e-6).unwrap();
        assert_close(&tape.value(d), &o.d, 1e-10, &format!("d (trial {trial})"));
    }
}

#[test]
fn hand_worked_four_by_five() {
    // M rows are permutations of 0..5 shifted, k = 2.
    let m = Tensor::from_rows(&[
        [0.0, 1.0, 2.0, 3.0, 4.0],
        [1.0, 0.0, 1.0, 2.0, 3.0],
        [4.0, 3.0, 2.0, 1.0, 0.0],
        [2.0, 2.0, 2.0, 2.0, 2.0],
    ]);
    let src = KnnIndices { k: 2, indices: vec![0, 1, 1, 0, 2, 3, 3, 2] };
    let tgt = KnnIndices { k: 2, indices: vec![0, 1, 1, 0, 2, 1, 3, 4, 4, 3] };
    let tape = Tape::new();
    let mv = tape.constant(m.clone());
    let (p, expanded) = matching_map_prime(&tape, mv, &src).unwrap();
    let pv = tape.value(p);
    let z: f64 = (0..5).map(|j| (-(j as f64)).exp()).sum();
    assert!((pv.get(0, 0) - 1.0 / z).abs() < 1e-15);
    assert!(pv.row(3).iter().all(|v| (v - 0.2).abs() < 1e-15));
    let ev = tape.value(expanded);
    assert_eq!(ev.row(1), pv.row(1));
    assert_eq!(ev.row(6), pv.row(3));
    let r = tape.value(neighborhood_consensus(&tape, expanded, &tgt).unwrap());
    // Row (0, a=0) = P[0], column 2 sums P[0, 2] + P[0, 1].
    assert!((r.get(0, 2) - (pv.get(0, 2) + pv.get(0, 1))).abs() < 1e-15);
    // Row (3, a=1) = P[2], column 4 sums P[2, 4] + P[2, 3].
    assert!((r.get(7, 4) - (pv.get(2, 4) + pv.get(2, 3))).abs() < 1e-15);
    assert!((r.get(6, 3) - 0.4).abs() < 1e-15);
}

#[test]
fn uniform_deficits_give_uniform_weights() {
    let tape = Tape::new();
    let r = tape.constant(Tensor::full(&[6, 3], 0.4));
    let (d, big_d) = weighted_distance(&tape, r, 2, 1e-6).unwrap();
    assert!(tape.value(d).data().iter().all(|v| (v - 0.72).abs() < 1e-15));
    assert!(tape.value(big_d).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert!(weighted_distance(&tape, r, 2, 0.0).is_err());

    // 3 x 3, k = 1: D ∝ 1/(1 − R)² + β, checked by hand.
    let r = tape.constant(Tensor::from_rows(&[[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [0.0, 0.0, 1.0]]));
    let (_, big_d) = weighted_distance(&tape, r, 1, 1e-6).unwrap();
    let v = tape.value(big_d);
    let inv = [4.0 + 1e-6, 1.0 / 0.5625 + 1e-6, 1.0 / 0.5625 + 1e-6];
    let z: f64 = inv.iter().sum();
    for j in 0..3 {
        assert!((v.get(0, j) - inv[j] / z).abs() < 1e-12);
    }
    // A vanishing deficit dominates its row without overflowing.
    assert!(v.get(2, 2) > 1.0 - 1e-11);
    assert!(v.is_finite());
}

#[test]
fn single_neighbour_scores_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fp = random_matrix(5, 3, 1.0, &mut rng);
    let fq = random_matrix(6, 3, 1.0, &mut rng);
    let src = KnnIndices { k: 1, indices: (0..5).collect() };
    let tgt = KnnIndices { k: 1, indices: (0..6).collect() };
    let tape = Tape::new();
    let cfg = NmmConfig { k_match: 1, ..Default::default() };
    let map = refine_matching(&tape, &cfg, tape.constant(fp), tape.constant(fq), &src, &tgt).unwrap();
    let expect = tape.value(map.d_weights).zip_map(&tape.value(map.m_prime), |a, b| a * b);
    assert_eq!(*tape.value(map.s_scores), expect);

    // Uniform P and D give constant S.
    let m = tape.constant(Tensor::full(&[4, 4], 0.7));
    let src = KnnIndices { k: 2, indices: vec![0, 1, 1, 2, 2, 3, 3, 0] };
    let map = refine_matching(&tape, &NmmConfig { k_match: 2, ..Default::default() }, m, m, &src, &src);
    // Features equal everywhere is fine: distances are all zero.
    let map = map.unwrap();
    let s = tape.value(map.s_scores);
    assert!(s.data().iter().all(|v| (v - s.data()[0]).abs() < 1e-15));
}

#[test]
fn refined_map_ordering() {
    let tape = Tape::new();
    let m = Tensor::from_rows(&[[0.3, 1.2, 0.7, 2.0]]);
    let mv = tape.constant(m.clone());
    let s = tape.constant(Tensor::full(&[1, 4], 0.25));
    let (_, mr) = refined_map(&tape, mv, s, 1.0).unwrap();
    let mr = tape.value(mr);
    assert_eq!(argmax(mr.row(0)), 0);
    let c = (1.0f64 - 0.25).exp();
    let z: f64 = m.data().iter().map(|v| (-c * v).exp()).sum();
    for j in 0..4 {
        assert!((mr.get(0, j) - (-c * m.get(0, j)).exp() / z).abs() < 1e-15);
    }
    let s2 = tape.constant(Tensor::from_rows(&[[0.25, 0.25, 0.6, 0.25]]));
    let (_, mr2) = refined_map(&tape, mv, s2, 1.0).unwrap();
    assert!(tape.value(mr2).get(0, 2) > mr.get(0, 2));
}

#[test]
fn pseudo_targets_and_confidences() {
    let q = PointCloud::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]).unwrap();
    let tape = Tape::new();
    let one_hot = tape.constant(Tensor::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
    let s = tape.constant(Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]));
    let pc = pseudo_correspondences(&tape, one_hot, s, &q).unwrap();
    assert_eq!(tape.value(pc.pseudo_targets).data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 3.0]);
    assert_eq!(pc.best_match, vec![1, 2]);
    let w = tape.value(pc.confidences);
    assert!((w.get(0, 0) - 0.5).abs() < 1e-15 && (w.get(1, 0) - 1.5).abs() < 1e-15);

    let uniform = tape.constant(Tensor::full(&[2, 3], 1.0 / 3.0));
    let pc = pseudo_correspondences(&tape, uniform, s, &q).unwrap();
    let c = q.centroid();
    for r in 0..2 {
        let row = tape.value(pc.pseudo_targets);
        assert!((Vec3::from_row_slice(row.row(r)) - c).norm() < 1e-15);
    }
    assert!((tape.value(pc.confidences).sum() / 2.0 - 1.0).abs() < 1e-9);
}

fn grid_cloud(rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new(
        (0..40)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

#[test]
fn consensus_favours_the_true_match_over_a_decoy() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let p = grid_cloud(&mut rng);
    let xf = RigidTransform::from_axis_angle(Vec3::new(0.2, 1.0, -0.3), 0.6, Vec3::new(0.1, 0.0, 0.2)).unwrap();
    let q = p.transformed(&xf);
    let fp = random_matrix(40, 6, 1.0, &mut rng);
    let shift = [0.3, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut fq = fp.clone();
    for i in 0..40 {
        for c in 0..6 {
            fq.data_mut()[i * 6 + c] += shift[c];
        }
    }
    // Target 30 impersonates the match of source 0 at the same distance.
    let (i0, decoy) = (0, 30);
    for c in 0..6 {
        fq.data_mut()[decoy * 6 + c] = fp.get(i0, c) - shift[c];
    }
    let tape = Tape::new();
    let cfg = NmmConfig { k_match: 6, ..Default::default() };
    let phi_p = FeatureMap { values: tape.constant(fp) };
    let phi_q = FeatureMap { values: tape.constant(fq) };
    let map = neighbor_map_matching(&tape, &cfg, &p, &q, &phi_p, &phi_q).unwrap();
    let mp = tape.value(map.m_prime);
    let mr = tape.value(map.m_refined);
    assert!((mp.get(i0, i0) - mp.get(i0, decoy)).abs() < 1e-12);
    assert!(mr.get(i0, i0) > mr.get(i0, decoy));
    assert!(mr.get(i0, i0) > mp.get(i0, i0));
    let s = tape.value(map.s_scores);
    assert!(s.get(i0, i0) > s.get(i0, decoy));
}

#[test]
fn chain_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let fp = random_matrix(6, 3, 1.0, &mut rng);
        let fq = random_matrix(7, 3, 1.0, &mut rng);
        let src = random_knn(6, 2, &mut rng);
        let tgt = random_knn(7, 2, &mut rng);
        let cfg = NmmConfig { k_match: 2, ..Default::default() };
        let proj = random_matrix(6, 7, 1.0, &mut rng);
        let chain = |which: usize| {
            let (fp, fq, proj, src, tgt, cfg) = (&fp, &fq, &proj, &src, &tgt, &cfg);
            move |tape: &Tape, x: Var| {
                let (a, b) = if which == 0 {
                    (x, tape.constant(fq.clone()))
                } else {
                    (tape.constant(fp.clone()), x)
                };
                let map = refine_matching(tape, cfg, a, b, src, tgt)?;
                let c = tape.constant(proj.clone());
                let y = tape.mul(map.m_refined, c)?;
                tape.sum(y)
            }
        };
        let r0 = grad_check(chain(0), &fp, 1e-6, 1e-4).unwrap();
        assert!(r0.passed, "phi_p: {}", r0.max_rel_error);
        let r1 = grad_check(chain(1), &fq, 1e-6, 1e-4).unwrap();
        assert!(r1.passed, "phi_q: {}", r1.max_rel_error);
    }
}

#[test]
fn entropy_of_uniform_rows() {
    let t = Tensor::full(&[3, 4], 0.25);
    assert!((mean_row_entropy(&t) - 4f64.ln()).abs() < 1e-15);
    assert_eq!(mean_row_entropy(&Tensor::from_rows(&[[1.0, 0.0]])), 0.0);
}
