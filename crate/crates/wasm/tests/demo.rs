use podsr_wasm::{simulate, PodDemo};

#[test]
fn simulated_snapshot_has_consistent_grids() {
    let s = simulate(1, 32, 0.5, -0.3, -3.0, 100, 1.5).unwrap();
    assert_eq!(s.hr().len(), 32 * 32);
    assert_eq!(s.lr().len(), 8 * 8);
    assert_eq!(s.upsampled().len(), 32 * 32);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&s.hr()) - mean(&s.lr())).abs() < 1e-12);
    assert!(s.upsampling_rmse() > 0.0);
}

#[test]
fn pod_demo_reconstruction_improves_with_k() {
    let d = PodDemo::new(1, 10, 32, 12).unwrap();
    assert!(d.modes() >= 4 && d.n_test() > 0);
    let truth = d.truth(0).unwrap();
    let err = |k| {
        let r = d.reconstruct(0, k).unwrap();
        truth
            .iter()
            .zip(&r)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    assert!(err(d.modes()) <= err(1));
    let cum = d.cumulative_variance();
    assert!(cum.windows(2).all(|w| w[1] >= w[0]));

    let levels = vec![0.5, 0.9];
    let narrow = d.reliability(0, 4, 0.0, 20, 3, levels.clone()).unwrap();
    let wide = d.reliability(0, 4, 50.0, 20, 3, levels).unwrap();
    assert_eq!(narrow.len(), 3);
    assert!(wide[1] >= narrow[1]);
}
