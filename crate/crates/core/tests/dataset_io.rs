use tustin_sm::lti::{ContinuousTf, MimoModel};
use tustin_sm::signals::{generate_signal, make_dataset, Dataset, NoiseBound, NoiseSpec, SignalSpec};

#[test]
fn write_then_read_is_lossless() {
    let model = MimoModel::new(
        1,
        2,
        vec![ContinuousTf::new(vec![4.0, 1.5], vec![4.0, 0.0]).unwrap(), ContinuousTf::new(vec![2.0], vec![-1.0]).unwrap()],
    )
    .unwrap();
    let signals = [
        generate_signal(&SignalSpec::multisine(20, 0.3, 5)).unwrap(),
        generate_signal(&SignalSpec::gaussian_bumps(8, 3.0, 6)).unwrap(),
    ];
    let noise = NoiseSpec { input: vec![NoiseBound::Absolute { cap: 0.05 }; 2], output: vec![NoiseBound::Relative { ratio: 0.1 }] };
    let ds = make_dataset(&model, &signals, 0.1, 60, &noise, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    ds.write(&path).unwrap();
    let back = Dataset::read(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn same_seed_same_data() {
    let model = MimoModel::siso(ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap());
    let s = generate_signal(&SignalSpec::multisine(50, 0.1, 1)).unwrap();
    let noise = NoiseSpec::absolute(1, 0.0, 1, 2.0);
    let a = make_dataset(&model, &[s.clone()], 0.05, 80, &noise, 3).unwrap();
    let b = make_dataset(&model, &[s.clone()], 0.05, 80, &noise, 3).unwrap();
    let c = make_dataset(&model, &[s], 0.05, 80, &noise, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.y_tilde, c.y_tilde);
}

#[test]
fn missing_metadata_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nothing.csv");
    std::fs::write(&path, "u0,y0\n1,2\n").unwrap();
    assert!(Dataset::read(&path).is_err());
}
