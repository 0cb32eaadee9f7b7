use nalgebra::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tustin_sm::lti::{tustin_c_coeff, tustin_map, ContinuousTf};

fn polymul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn polypow(base: &[f64], k: usize) -> Vec<f64> {
    (0..k).fold(vec![1.0], |acc, _| polymul(&acc, base))
}

/// Substitutes `s = (2/T)(z-1)/(z+1)` and clears `(z+1)^n / T^n`; returns
/// ascending-power numerator and denominator in `z`.
fn substitute(alpha: &[f64], beta: &[f64], ts: f64) -> (Vec<f64>, Vec<f64>) {
    let n = alpha.len();
    let term = |i: usize| polymul(&polypow(&[-2.0, 2.0], i), &polypow(&[ts, ts], n - i));
    let mut den = term(n);
    let mut num = vec![0.0; n + 1];
    for i in 0..n {
        let t = term(i);
        for j in 0..=n {
            den[j] += alpha[i] * t[j];
            num[j] += beta[i] * t[j];
        }
    }
    (num, den)
}

fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> ContinuousTf {
    let mut den = vec![1.0];
    let mut left = n;
    while left > 0 {
        let re = -rng.gen_range(0.1..10.0);
        if left >= 2 && rng.gen_bool(0.5) {
            let im: f64 = rng.gen_range(0.1..10.0);
            den = polymul(&den, &[re * re + im * im, -2.0 * re, 1.0]);
            left -= 2;
        } else {
            den = polymul(&den, &[-re, 1.0]);
            left -= 1;
        }
    }
    let alpha = den[..n].to_vec();
    let beta = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    ContinuousTf::new(alpha, beta).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn matches_polynomial_substitution_on_random_stable_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(1..=5);
        let h = random_stable(&mut rng, n);
        let ts = 10f64.powf(rng.gen_range(-3.0..0.0));
        let t = tustin_map(&h, ts).unwrap();
        let (num, den) = substitute(h.alpha(), h.beta(), ts);
        let gamma: Vec<f64> = den[..n].iter().map(|v| v / den[n]).collect();
        let xi: Vec<f64> = num.iter().map(|v| v / den[n]).collect();
        assert!(rel_err(t.gamma(), &gamma) <= 1e-10, "gamma n={n} ts={ts}");
        assert!(rel_err(t.xi(), &xi) <= 1e-10, "xi n={n} ts={ts}");
    }
}

fn eval_desc(c: &[f64], z: Complex<f64>, monic: bool) -> Complex<f64> {
    // ascending coefficients, optional implicit leading 1
    let mut acc = if monic { Complex::new(1.0, 0.0) } else { Complex::new(0.0, 0.0) };
    for v in c.iter().rev() {
        acc = acc * z + v;
    }
    acc
}

#[test]
fn frequency_response_matches_warped_continuous_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let n = rng.gen_range(1..=5);
        let h = random_stable(&mut rng, n);
        let ts = 10f64.powf(rng.gen_range(-3.0..0.0));
        let t = tustin_map(&h, ts).unwrap();
        for om in [0.1f64, 0.7, 1.5, 2.5] {
            let z = Complex::from_polar(1.0, om);
            let s = Complex::new(0.0, 2.0 / ts * (om / 2.0).tan());
            let hd = eval_desc(t.xi(), z, false) / eval_desc(t.gamma(), z, true);
            let hc = eval_desc(h.beta(), s, false) / eval_desc(h.alpha(), s, true);
            assert!((hd - hc).norm() <= 1e-9 * (1.0 + hc.norm()), "n={n} ts={ts} om={om}");
        }
    }
}

#[test]
fn c_coefficients_match_integer_convolution() {
    for n in 1..=12usize {
        for i in 0..=n {
            let mut p: Vec<i64> = vec![1];
            for k in 0..n {
                let f: [i64; 2] = if k < i { [-1, 1] } else { [1, 1] };
                let mut q = vec![0i64; p.len() + 1];
                for (a, x) in p.iter().enumerate() {
                    q[a] += x * f[0];
                    q[a + 1] += x * f[1];
                }
                p = q;
            }
            for (j, &want) in p.iter().enumerate() {
                assert_eq!(tustin_c_coeff(n, i, j).unwrap(), want as f64, "n={n} i={i} j={j}");
            }
        }
    }
}

#[test]
fn first_order_closed_form() {
    // H = b/(s+a): T(z) = bT(z+1) / ((2+aT) z + (aT-2))
    let (a, b, ts) = (3.0, 2.0, 0.1);
    let t = tustin_map(&ContinuousTf::new(vec![a], vec![b]).unwrap(), ts).unwrap();
    let an = 2.0 + a * ts;
    assert!((t.gamma()[0] - (a * ts - 2.0) / an).abs() < 1e-15);
    assert!((t.xi()[0] - b * ts / an).abs() < 1e-15);
    assert!((t.xi()[1] - b * ts / an).abs() < 1e-15);
}

proptest! {
    #[test]
    fn dc_gain_is_preserved(a0 in 0.1f64..50.0, a1 in 0.1f64..20.0, b0 in -10.0f64..10.0, b1 in -10.0f64..10.0, ts in 1e-3f64..1.0) {
        let h = ContinuousTf::new(vec![a0, a1], vec![b0, b1]).unwrap();
        let t = tustin_map(&h, ts).unwrap();
        prop_assert!((t.dc_gain() - h.dc_gain()).abs() <= 1e-9 * (1.0 + h.dc_gain().abs()));
    }

    #[test]
    fn stable_maps_to_stable(a0 in 0.1f64..50.0, a1 in 0.1f64..20.0, ts in 1e-3f64..1.0) {
        let h = ContinuousTf::new(vec![a0, a1], vec![1.0, 0.0]).unwrap();
        let t = tustin_map(&h, ts).unwrap();
        prop_assert!(t.poles().iter().all(|p| p.norm() < 1.0));
    }
}
