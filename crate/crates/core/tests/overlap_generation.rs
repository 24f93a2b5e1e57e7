use obmreg_core::data::{make_pair, pair_overlap, PairSpec, ShapeKind, OVERLAP_TOLERANCE};

#[test]
fn requested_overlap_is_met_for_every_shape() {
    for shape in ShapeKind::ALL {
        let spec = PairSpec {
            shape,
            target_overlap: 0.58,
            noise_sigma: 0.0,
            ..PairSpec::default()
        };
        let mut hits = 0;
        for seed in 0..200 {
            let pair = make_pair(&spec, seed).unwrap();
            let measured = pair_overlap(&pair).unwrap();
            hits += usize::from((measured - 0.58).abs() <= OVERLAP_TOLERANCE);
        }
        println!("{shape}: {hits}/200 within tolerance");
        assert!(hits >= 190, "{shape}: {hits}/200");
    }
}

#[test]
fn generated_transforms_are_rigid() {
    for seed in 0..50 {
        let spec = PairSpec {
            rot_max_deg: 180.0,
            trans_max: 1.0,
            ..PairSpec::default()
        };
        let xf = make_pair(&spec, seed).unwrap().gt_transform;
        let r = xf.rotation();
        assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }
}
