use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{integrate_rk4_sampled, CouplingMatrix, FhnParams};
use crate::error::{Error, Result};
use crate::par;
use crate::sigproc::TrialSet;

/// Recipe for a synthetic FHN-network dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_trials: usize,
    pub n_channels: usize,
    pub n_classes: usize,
    pub n_nodes: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Model time units per second of signal. With the default the limit
    /// cycle lands near 10 Hz.
    pub time_scale: f64,
    /// Relative per-trial jitter of `time_scale`.
    pub time_jitter: f64,
    pub amplitude: f64,
    /// Upper bound on the integrator step, in model time units.
    pub max_dt_int: f64,
}

impl SynthSpec {
    pub fn new(n_trials: usize, n_channels: usize, n_classes: usize, noise_sigma: f64, seed: u64) -> Self {
        SynthSpec {
            n_trials,
            n_channels,
            n_classes,
            n_nodes: n_channels,
            n_samples: 256,
            sample_rate_hz: 128.0,
            noise_sigma,
            seed,
            time_scale: 420.0,
            time_jitter: 0.05,
            amplitude: 10.0,
            max_dt_int: 0.05,
        }
    }

    /// Class `k` uses `I = 0.3 + 0.1 k` and coupling strength `0.05 + 0.05 k`.
    pub fn class_params(&self, k: usize) -> (FhnParams, f64) {
        let params = FhnParams {
            stimulus: 0.3 + 0.1 * k as f64,
            ..FhnParams::default()
        };
        (params, 0.05 + 0.05 * k as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > 255 {
            return Err(Error::Parameter(format!(
                "class count must be in 2..=255, got {}",
                self.n_classes
            )));
        }
        if self.n_channels == 0 || self.n_nodes == 0 || self.n_samples < 2 {
            return Err(Error::Parameter(format!(
                "need channels, nodes ≥ 1 and ≥ 2 samples (got {}, {}, {})",
                self.n_channels, self.n_nodes, self.n_samples
            )));
        }
        if !(self.sample_rate_hz > 0.0 && self.time_scale > 0.0 && self.max_dt_int > 0.0)
            || !(self.noise_sigma >= 0.0)
            || !(0.0..1.0).contains(&self.time_jitter)
        {
            return Err(Error::Parameter("invalid synthesis rates or noise level".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<TrialSet> {
        self.validate()?;
        let (c, n, t) = (self.n_channels, self.n_nodes, self.n_samples);
        let mut master = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (n as f64).sqrt();
        let mixing: Vec<f64> = (0..c * n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut master);
                scale * z
            })
            .collect();
        let couplings = (0..self.n_classes)
            .map(|k| CouplingMatrix::new(n, self.class_params(k).1))
            .collect::<Result<Vec<_>>>()?;

        let trials = par::map_coarse(self.n_trials, |i| -> Result<Vec<f32>> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(i as u64 + 1);
            let class = i % self.n_classes;
            let (params, _) = self.class_params(class);
            let jitter = 1.0 + rng.random_range(-self.time_jitter..=self.time_jitter);
            let sample_dt = self.time_scale * jitter / self.sample_rate_hz;
            let every = (sample_dt / self.max_dt_int).ceil().max(1.0) as usize;
            let dt_int = sample_dt / every as f64;
            let v0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
            let t_end = (t - 1) as f64 * sample_dt;
            let traj =
                integrate_rk4_sampled(&v0, &w0, &params, Some(&couplings[class]), t_end, dt_int, every)?;
            let kept = traj.v.shape()[1];
            debug_assert_eq!(kept, t);
            let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::Parameter(e.to_string()))?;
            let v = traj.v.data();
            let mut out = Vec::with_capacity(c * t);
            for ch in 0..c {
                for s in 0..t {
                    let mut x = 0.0;
                    for node in 0..n {
                        x += mixing[ch * n + node] * v[node * kept + s];
                    }
                    x *= self.amplitude;
                    if self.noise_sigma > 0.0 {
                        x += noise.sample(&mut rng);
                    }
                    out.push(x as f32);
                }
            }
            Ok(out)
        });

        let mut data = Vec::with_capacity(self.n_trials * c * t);
        for trial in trials {
            data.extend(trial?);
        }
        let labels = (0..self.n_trials).map(|i| (i % self.n_classes) as u8).collect();
        TrialSet::new(data, labels, c, t, self.n_classes, self.sample_rate_hz as f32)
    }
}

/// Synthetic trials from class-specific coupled FHN networks, mixed to
/// `n_channels` and corrupted by white noise. Deterministic per seed.
pub fn synthesize_trialset(
    n_trials: usize,
    n_channels: usize,
    classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<TrialSet> {
    SynthSpec::new(n_trials, n_channels, classes, noise_sigma, seed).generate()
}
