use neurophys::diff::{grad_check, GradCheckOptions, Mode, ParamSet, Tape};
use neurophys::fhn::*;
use neurophys::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root of v³ + 0.75 v + 1.125 by plain bisection (defaults ε, a, b, I).
fn cubic_root() -> f64 {
    let f = |v: f64| v * v * v + 0.75 * v + 1.125;
    let (mut lo, mut hi) = (-2.0, 0.0);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn equilibrium_is_stationary_under_rk4() {
    let p = FhnParams::default();
    let v_star = cubic_root();
    let w_star = (v_star + 0.7) / 0.8;
    assert!((v_star + 0.805).abs() < 1e-3 && (w_star + 0.131).abs() < 1e-3);
    let (v_lib, w_lib) = p.equilibrium();
    assert!((v_lib - v_star).abs() < 1e-12 && (w_lib - w_star).abs() < 1e-12);

    let s = integrate_rk4(&[v_star], &[w_star], &p, None, 1.0, 1e-3).unwrap();
    let drift_v = s.v.data().iter().map(|v| (v - v_star).abs()).fold(0.0, f64::max);
    let drift_w = s.w.data().iter().map(|w| (w - w_star).abs()).fold(0.0, f64::max);
    assert!(drift_v < 1e-6 && drift_w < 1e-6, "{drift_v} {drift_w}");
}

#[test]
fn perturbed_equilibrium_departs() {
    let p = FhnParams::default();
    let v_star = cubic_root();
    let w_star = (v_star + 0.7) / 0.8;
    // numeric Jacobian trace at the rest state
    let h = 1e-6;
    let dv = |v: f64, w: f64| fhn_rhs(&[v], &[w], &p, None);
    let dfv_dv = (dv(v_star + h, w_star).0[0] - dv(v_star - h, w_star).0[0]) / (2.0 * h);
    let dfw_dw = (dv(v_star, w_star + h).1[0] - dv(v_star, w_star - h).1[0]) / (2.0 * h);
    let trace = dfv_dv + dfw_dw;
    assert!((trace - p.jacobian_trace(v_star)).abs() < 1e-8);
    assert!(trace > 0.28 && trace < 0.29, "{trace}");

    let s = integrate_rk4(&[v_star + 1e-3], &[w_star], &p, None, 200.0, 1e-2).unwrap();
    let far = s.v.data().iter().map(|v| (v - v_star).abs()).fold(0.0, f64::max);
    assert!(far > 1.0, "{far}");
}

#[test]
fn limit_cycle_from_origin() {
    let p = FhnParams::default();
    let s = integrate_rk4(&[0.0], &[0.0], &p, None, 100.0, 1e-3).unwrap();
    let v = s.v.data();
    let crossings = v.windows(2).filter(|w| w[0] < 1.0 && w[1] >= 1.0).count();
    assert!(crossings >= 2, "{crossings}");
    assert!(v.iter().all(|x| x.abs() <= 3.0));
}

fn endpoint(dt: f64) -> (f64, f64) {
    let p = FhnParams::default();
    let k = CouplingMatrix::new(2, 0.1).unwrap();
    let s = integrate_rk4(&[0.3, -1.0], &[0.0, 0.4], &p, Some(&k), 10.0, dt).unwrap();
    let t = s.v.shape()[1];
    (s.v.data()[t - 1], s.w.data()[2 * t - 1])
}

#[test]
fn rk4_fourth_order_convergence() {
    let reference = endpoint(1e-4);
    let err = |dt| {
        let (v, w) = endpoint(dt);
        (v - reference.0).abs().max((w - reference.1).abs())
    };
    let factor = err(1e-2) / err(5e-3);
    assert!(factor >= 12.0, "{factor}");
}

#[test]
fn residuals_of_exact_trajectory_are_small() {
    let p = FhnParams::default();
    let s = integrate_rk4(&[0.0], &[0.0], &p, None, 50.0, 1e-3).unwrap();
    let (fv, fw) = residual_values(&s, &p, None).unwrap();
    let max = fv.data().iter().chain(fw.data()).map(|x| x.abs()).fold(0.0, f64::max);
    assert!(max <= 5.0 * 1e-3, "{max}");
    assert!(physics_loss_value(&s, &p, None).unwrap() <= 1e-4);
}

fn residual_rms(every: usize, p: &FhnParams, k: Option<&CouplingMatrix>) -> f64 {
    // fine reference at 1e-4, resampled to dt = every · 1e-4 on [0, 40]
    let s = integrate_rk4_sampled(&[0.0, 1.0], &[0.0, -0.3], p, k, 40.0, 1e-4, every).unwrap();
    let (fv, fw) = residual_values(&s, p, k).unwrap();
    let sq: f64 = fv.data().iter().chain(fw.data()).map(|x| x * x).sum();
    (sq / (fv.len() + fw.len()) as f64).sqrt()
}

#[test]
fn residual_is_first_order_in_dt() {
    let p = FhnParams::default();
    let k = CouplingMatrix::new(2, 0.1).unwrap();
    for coupling in [None, Some(&k)] {
        let ratio = residual_rms(40, &p, coupling) / residual_rms(20, &p, coupling);
        assert!((1.8..=2.2).contains(&ratio), "{ratio}");
    }
}

#[test]
fn tape_coupling_matches_pairwise_sum() {
    let p = FhnParams { dt: 0.01, ..FhnParams::default() };
    let k = CouplingMatrix::new(3, 0.1).unwrap();
    let s = integrate_rk4(&[0.5, -1.0, 1.5], &[0.1, 0.0, -0.2], &p, Some(&k), 0.05, 0.01).unwrap();
    let (fv, fw) = residual_values(&s, &p, Some(&k)).unwrap();
    let t = s.v.shape()[1];
    for col in 0..t - 1 {
        let v: Vec<f64> = (0..3).map(|i| s.v.data()[i * t + col]).collect();
        let w: Vec<f64> = (0..3).map(|i| s.w.data()[i * t + col]).collect();
        let (dv, dw) = fhn_rhs(&v, &w, &p, Some(&k));
        for i in 0..3 {
            let fd_v = (s.v.data()[i * t + col + 1] - v[i]) / p.dt;
            let fd_w = (s.w.data()[i * t + col + 1] - w[i]) / p.dt;
            assert!((fv.data()[i * (t - 1) + col] - (fd_v - dv[i])).abs() < 1e-12);
            assert!((fw.data()[i * (t - 1) + col] - (fd_w - dw[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_is_a_mean_over_the_batch() {
    let p = FhnParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Tensor::randn(&[2, 3, 4, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[2, 3, 4, 6], 1.0, &mut rng);
    let twice = |x: &Tensor| {
        let mut d = x.data().to_vec();
        d.extend_from_slice(x.data());
        Tensor::new(&[4, 3, 4, 6], d).unwrap()
    };
    let one = physics_loss_value(&StatePair { v: v.clone(), w: w.clone(), dt: 0.1 }, &p, None).unwrap();
    let two = physics_loss_value(&StatePair { v: twice(&v), w: twice(&w), dt: 0.1 }, &p, None).unwrap();
    assert!((one - two).abs() < 1e-12 * one.abs().max(1.0));
}

#[test]
fn physics_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = FhnParams { dt: 0.05, ..FhnParams::default() };
    let k = CouplingMatrix::new(3, 0.1).unwrap();
    for coupling in [None, Some(&k)] {
        let mut params = ParamSet::new();
        let v = params.add("v", Tensor::randn(&[2, 3, 5], 1.0, &mut rng), true);
        let w = params.add("w", Tensor::randn(&[2, 3, 5], 1.0, &mut rng), true);
        let report = grad_check(&mut params, &GradCheckOptions::default().tolerance(1e-5), |tape, ps| {
            let vv = tape.param(ps, v);
            let ww = tape.param(ps, w);
            physics_loss(tape, vv, ww, &p, coupling)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn nearest_centroid_separates_synthetic_classes() {
    let set = synthesize_trialset(80, 4, 2, 0.0, 7).unwrap();
    let fs = set.sample_rate_hz as f64;
    let bands = [(1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 20.0), (20.0, 30.0), (30.0, 45.0)];
    // log band power from a direct DFT, per channel and band
    let features: Vec<Vec<f64>> = (0..set.len())
        .map(|i| {
            let trial = set.trial(i);
            let mut f = Vec::new();
            for ch in 0..set.n_channels {
                let x = &trial[ch * set.n_samples..(ch + 1) * set.n_samples];
                let n = x.len();
                let mean = x.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
                let power = |bin: usize| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, &s) in x.iter().enumerate() {
                        let ph = 2.0 * std::f64::consts::PI * (bin * t) as f64 / n as f64;
                        re += (s as f64 - mean) * ph.cos();
                        im -= (s as f64 - mean) * ph.sin();
                    }
                    re * re + im * im
                };
                for &(lo, hi) in &bands {
                    let bins = (0..=n / 2).filter(|&b| {
                        let hz = b as f64 * fs / n as f64;
                        hz >= lo && hz < hi
                    });
                    let p: f64 = bins.map(power).sum();
                    f.push((p + 1e-9).ln());
                }
            }
            f
        })
        .collect();
    let labels = set.labels_usize();
    let (train, test): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|i| i % 4 < 2);
    let dim = features[0].len();
    let mut centroids = vec![vec![0.0; dim]; 2];
    let mut counts = [0.0; 2];
    for &i in &train {
        counts[labels[i]] += 1.0;
        for d in 0..dim {
            centroids[labels[i]][d] += features[i][d];
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|x| *x /= n);
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let dist = |c: &Vec<f64>| c.iter().zip(&features[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = if dist(&centroids[0]) <= dist(&centroids[1]) { 0 } else { 1 };
            pred == labels[i]
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.9, "{acc}");
}

proptest! {
    #[test]
    fn symmetric_coupling_conserves(
        n in 2usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut k = Tensor::uniform(&[n, n], 0.0, 0.5, &mut rng);
        for i in 0..n {
            for j in 0..i {
                let x = k.data()[i * n + j];
                k.data_mut()[j * n + i] = x;
            }
            k.data_mut()[i * n + i] = 0.0;
        }
        let km = CouplingMatrix { k, strength: f64::NAN };
        let v = Tensor::uniform(&[n], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform(&[n], -1.0, 1.0, &mut rng);
        let p = FhnParams::default();
        let (plain, _) = fhn_rhs(v.data(), w.data(), &p, None);
        let (coupled, _) = fhn_rhs(v.data(), w.data(), &p, Some(&km));
        let total: f64 = coupled.iter().zip(&plain).map(|(c, p)| c - p).sum();
        prop_assert!(total.abs() < 1e-12);
    }

    #[test]
    fn zero_coupling_is_exact(
        v in prop::collection::vec(-3.0f64..3.0, 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::uniform(&[v.len()], -1.0, 1.0, &mut rng);
        let k = CouplingMatrix::new(v.len(), 0.0).unwrap();
        let p = FhnParams::default();
        prop_assert_eq!(fhn_rhs(&v, w.data(), &p, Some(&k)), fhn_rhs(&v, w.data(), &p, None));
    }

    #[test]
    fn physics_loss_is_nonnegative(seed in any::<u64>(), t in 2usize..8, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = StatePair {
            v: Tensor::randn(&[n, t], 2.0, &mut rng),
            w: Tensor::randn(&[n, t], 2.0, &mut rng),
            dt: 0.1,
        };
        let k = CouplingMatrix::new(n, 0.1).unwrap();
        let loss = physics_loss_value(&s, &FhnParams::default(), Some(&k)).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }
}

#[test]
fn zero_loss_only_for_zero_residuals() {
    // residual-free series: the forward Euler trajectory itself
    let p = FhnParams { dt: 0.01, ..FhnParams::default() };
    let mut v = vec![0.2];
    let mut w = vec![-0.1];
    for _ in 0..20 {
        let (dv, dw) = fhn_rhs(&v[v.len() - 1..], &w[w.len() - 1..], &p, None);
        v.push(v[v.len() - 1] + p.dt * dv[0]);
        w.push(w[w.len() - 1] + p.dt * dw[0]);
    }
    let n = v.len();
    let s = StatePair {
        v: Tensor::new(&[1, n], v).unwrap(),
        w: Tensor::new(&[1, n], w).unwrap(),
        dt: p.dt,
    };
    assert!(physics_loss_value(&s, &p, None).unwrap() < 1e-25);
    let mut bumped = s.clone();
    bumped.v.data_mut()[5] += 1e-3;
    assert!(physics_loss_value(&bumped, &p, None).unwrap() > 0.0);

    let mut tape = Tape::new(Mode::Eval, 0);
    let vv = tape.constant(s.v.clone());
    let ww = tape.constant(s.w.clone());
    let (fv, _) = fhn_residuals(&mut tape, vv, ww, &p, None).unwrap();
    assert_eq!(tape.shape(fv), &[1, n - 1]);
}
