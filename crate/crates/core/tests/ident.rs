use nalgebra::DMatrix;
use tustin_sm::ident::{compute_puis, feasibility_oracle, validate, IdentOptions, Simulation};
use tustin_sm::lti::{dt_simulate_from_rest, tustin_map, ContinuousTf, MimoModel, Orders};
use tustin_sm::par::ExecMode;
use tustin_sm::pop::{ParamBox, PriorSpec};
use tustin_sm::signals::{generate_signal, make_dataset, Dataset, DeltaBoundSpec, NoiseSpec, SignalSpec, Signal};

fn first_order() -> ContinuousTf {
    ContinuousTf::new(vec![2.0], vec![3.0]).unwrap()
}

fn multisine(seed: u64) -> Signal {
    generate_signal(&SignalSpec::multisine(30, 0.2, seed)).unwrap()
}

/// Data produced by the Tustin model itself, so `δ = 0` exactly.
fn dt_dataset(h: &ContinuousTf, ts: f64, n: usize, eta: f64) -> Dataset {
    let u = multisine(3).sample(ts, n);
    let y = dt_simulate_from_rest(&tustin_map(h, ts).unwrap(), &u);
    let zeros = DMatrix::zeros(n, 1);
    let e = DMatrix::from_element(n, 1, eta);
    Dataset::new(ts, DMatrix::from_vec(n, 1, u), DMatrix::from_vec(n, 1, y), (zeros.clone(), zeros), (-e.clone(), e)).unwrap()
}

#[test]
fn oracle_accepts_truth_on_its_own_noise_free_data() {
    let h = first_order();
    let ds = dt_dataset(&h, 0.1, 30, 0.0);
    let ok = feasibility_oracle(&ds, &Orders::siso(1).unwrap(), &DeltaBoundSpec::uniform(0.0), &PriorSpec::default(), &h.theta()).unwrap();
    assert!(ok);
}

#[test]
fn oracle_rejects_sign_flipped_denominator() {
    let h = ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap();
    let model = MimoModel::siso(h);
    let ds = make_dataset(&model, &[multisine(1)], 0.05, 60, &NoiseSpec::absolute(1, 0.0, 1, 0.05), 1).unwrap();
    let orders = Orders::siso(2).unwrap();
    let flipped = [-16.3, -2.2, -21.0, 10.5];
    assert!(!feasibility_oracle(&ds, &orders, &DeltaBoundSpec::uniform(0.01), &PriorSpec::default(), &flipped).unwrap());
}

#[test]
fn oracle_respects_prior_boxes() {
    let h = first_order();
    let ds = dt_dataset(&h, 0.1, 30, 0.0);
    let priors = PriorSpec { boxes: vec![ParamBox { param: 0, lo: 2.5, hi: 4.0 }], ..Default::default() };
    assert!(!feasibility_oracle(&ds, &Orders::siso(1).unwrap(), &DeltaBoundSpec::uniform(0.0), &priors, &h.theta()).unwrap());
}

#[test]
fn fixed_parameter_gives_degenerate_interval() {
    let h = ContinuousTf::new(vec![5.0], vec![3.0]).unwrap();
    let ds = dt_dataset(&h, 0.1, 12, 0.05);
    let priors = PriorSpec { boxes: vec![ParamBox { param: 0, lo: 5.0, hi: 5.0 }], ..Default::default() };
    let opts = IdentOptions { mode: ExecMode::Sequential, ..Default::default() };
    let r = compute_puis(&ds, &Orders::siso(1).unwrap(), &DeltaBoundSpec::uniform(0.0), &priors, &opts).unwrap();
    assert!((r.params[0].lo - 5.0).abs() <= 1e-6 && (r.params[0].hi - 5.0).abs() <= 1e-6, "{:?}", r.params[0]);
}

#[test]
fn first_order_puis_contain_truth_and_midpoint_is_exact() {
    let h = first_order();
    let ds = dt_dataset(&h, 0.1, 15, 0.05);
    let opts = IdentOptions { mode: ExecMode::Sequential, ..Default::default() };
    let r = compute_puis(&ds, &Orders::siso(1).unwrap(), &DeltaBoundSpec::uniform(0.0), &PriorSpec::default(), &opts).unwrap();
    assert!(r.contains(&h.theta()), "{}", r.table(Some(&h.theta())));
    for p in &r.params {
        assert!(p.lo <= p.hi);
        assert_eq!(p.center, 0.5 * (p.lo + p.hi));
        assert_eq!(p.width, p.hi - p.lo);
    }
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in ["params", "d_star", "rho", "solver", "timings"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn truth_fits_noise_free_data() {
    let h = ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap();
    let model = MimoModel::siso(h);
    let ds = make_dataset(&model, &[multisine(7)], 0.001, 2000, &NoiseSpec::absolute(1, 0.0, 1, 0.0), 0).unwrap();
    let m = validate(&model, &ds, Simulation::Tustin).unwrap();
    assert!(m[0].fit >= 0.999, "{:?}", m);
    let m = validate(&model, &ds, Simulation::Continuous).unwrap();
    assert!(m[0].fit >= 0.99, "{:?}", m);
}

#[test]
fn zero_model_does_not_beat_the_mean() {
    let h = ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap();
    let ds = make_dataset(&MimoModel::siso(h), &[multisine(8)], 0.05, 200, &NoiseSpec::absolute(1, 0.0, 1, 0.1), 0).unwrap();
    let zero = MimoModel::siso(ContinuousTf::new(vec![16.3, 2.2], vec![0.0, 0.0]).unwrap());
    let m = validate(&zero, &ds, Simulation::Tustin).unwrap();
    assert!(m[0].fit <= 0.0, "{:?}", m);
}

#[test]
fn validate_rejects_mismatched_shapes() {
    let ds = dt_dataset(&first_order(), 0.1, 20, 0.0);
    let tiso = MimoModel::new(1, 2, vec![first_order(), first_order()]).unwrap();
    assert!(validate(&tiso, &ds, Simulation::Tustin).is_err());
}
