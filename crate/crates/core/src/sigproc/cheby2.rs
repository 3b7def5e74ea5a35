//! Chebyshev type II band-pass design as a cascade of biquads.
//!
//! Analog low-pass prototype (stopband edge at 1 rad/s) → low-pass to
//! band-pass transform onto the pre-warped stopband edges → bilinear
//! transform → conjugate pairs grouped into second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, `a0` normalised to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, zinv: Complex64) -> Complex64 {
        let z2 = zinv * zinv;
        (self.b0 + self.b1 * zinv + self.b2 * z2) / (1.0 + self.a1 * zinv + self.a2 * z2)
    }

    /// Largest pole modulus.
    pub fn pole_radius(&self) -> f64 {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let p1 = (-self.a1 + disc) / 2.0;
        let p2 = (-self.a1 - disc) / 2.0;
        p1.norm().max(p2.norm())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub gain: f64,
}

impl BiquadCascade {
    /// Causal filtering from zero initial state (transposed direct form II).
    pub fn filter_into(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b0 * input + z1;
                z1 = s.b1 * input - s.a1 * out + z2;
                z2 = s.b2 * input - s.a2 * out;
                *v = out;
            }
        }
        for v in y.iter_mut() {
            *v *= self.gain;
        }
    }

    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.filter_into(x, &mut y);
        y
    }

    pub fn response(&self, freq_hz: f64, sample_rate: f64) -> Complex64 {
        let zinv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / sample_rate);
        self.sections
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |acc, s| acc * s.response(zinv))
    }

    pub fn magnitude_db(&self, freq_hz: f64, sample_rate: f64) -> f64 {
        20.0 * self.response(freq_hz, sample_rate).norm().log10()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .map(Biquad::pole_radius)
            .fold(0.0, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.max_pole_radius() < 1.0
    }
}

/// Band-pass over `band` (Hz) whose stopbands start `transition_hz` outside
/// the band edges, attenuated by at least `atten_db` there. `order` is the
/// low-pass prototype order; the cascade has `order` sections.
pub fn design_cheby2_bandpass(
    band: (f64, f64),
    order: usize,
    atten_db: f64,
    transition_hz: f64,
    sample_rate: f64,
) -> Result<BiquadCascade> {
    let (lo, hi) = band;
    let nyquist = sample_rate / 2.0;
    if !(sample_rate > 0.0) || order == 0 || !(atten_db > 0.0) || !(transition_hz >= 0.0) {
        return Err(Error::Design(format!(
            "need sample_rate > 0, order ≥ 1, atten > 0, transition ≥ 0 \
             (got {sample_rate}, {order}, {atten_db}, {transition_hz})"
        )));
    }
    let (stop_lo, stop_hi) = (lo - transition_hz, hi + transition_hz);
    if !(0.0 < lo && lo < hi && hi < nyquist) {
        return Err(Error::Design(format!(
            "band ({lo}, {hi}) Hz must satisfy 0 < low < high < Nyquist ({nyquist} Hz)"
        )));
    }
    if !(stop_lo > 0.0 && stop_hi < nyquist) {
        return Err(Error::Design(format!(
            "stopband edges ({stop_lo}, {stop_hi}) Hz fall outside (0, {nyquist}) Hz"
        )));
    }

    let (zeros, poles, k) = prototype(order, atten_db);

    let fs2 = 2.0 * sample_rate;
    let warp = |f: f64| fs2 * (PI * f / sample_rate).tan();
    let (w1, w2) = (warp(stop_lo), warp(stop_hi));
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    let split = |r: Complex64| -> [Complex64; 2] {
        let b = r * bw;
        let disc = (b * b - 4.0 * w0sq).sqrt();
        [(b + disc) / 2.0, (b - disc) / 2.0]
    };
    let mut bp_zeros: Vec<Complex64> = zeros.iter().flat_map(|&z| split(z)).collect();
    let bp_poles: Vec<Complex64> = poles.iter().flat_map(|&p| split(p)).collect();
    let excess = poles.len() - zeros.len();
    bp_zeros.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), excess));
    let bp_k = k * bw.powi(excess as i32);

    let bilinear = |s: Complex64| (fs2 + s) / (fs2 - s);
    let num: Complex64 = bp_zeros.iter().map(|&z| fs2 - z).product();
    let den: Complex64 = bp_poles.iter().map(|&p| fs2 - p).product();
    let gain = bp_k * (num / den).re;
    let mut dz: Vec<Complex64> = bp_zeros.iter().map(|&z| bilinear(z)).collect();
    let dp: Vec<Complex64> = bp_poles.iter().map(|&p| bilinear(p)).collect();
    dz.extend(std::iter::repeat_n(
        Complex64::new(-1.0, 0.0),
        dp.len() - dz.len(),
    ));

    let sections = to_sections(dz, dp)?;
    let cascade = BiquadCascade { sections, gain };
    if !cascade.is_stable() {
        return Err(Error::Design(format!(
            "unstable design: pole radius {}",
            cascade.max_pole_radius()
        )));
    }
    Ok(cascade)
}

/// Zeros, poles and gain of the analog Chebyshev II low-pass prototype.
fn prototype(order: usize, atten_db: f64) -> (Vec<Complex64>, Vec<Complex64>, f64) {
    let n = order as f64;
    let delta = 1.0 / (10f64.powf(0.1 * atten_db) - 1.0).sqrt();
    let mu = (1.0 / delta).asinh() / n;
    let mut zeros = Vec::new();
    let mut poles = Vec::with_capacity(order);
    for m in 0..order {
        let theta = PI * (2 * m + 1) as f64 / (2.0 * n);
        // odd orders have one zero at infinity (theta = π/2)
        if 2 * m + 1 != order {
            zeros.push(Complex64::new(0.0, 1.0 / theta.cos()));
        }
        let p = Complex64::new(-mu.sinh() * theta.sin(), mu.cosh() * theta.cos());
        poles.push(1.0 / p);
    }
    let num: Complex64 = poles.iter().map(|&p| -p).product();
    let den: Complex64 = zeros.iter().map(|&z| -z).product();
    (zeros, poles, (num / den).re)
}

const IMAG_TOL: f64 = 1e-10;

/// Conjugate pairs (upper-half representative) followed by real roots in pairs.
fn pair_roots(roots: &[Complex64]) -> Result<Vec<[Complex64; 2]>> {
    let mut pairs: Vec<[Complex64; 2]> = roots
        .iter()
        .filter(|r| r.im > IMAG_TOL)
        .map(|&r| [r, r.conj()])
        .collect();
    let lower = roots.iter().filter(|r| r.im < -IMAG_TOL).count();
    if lower != pairs.len() {
        return Err(Error::Design("roots are not in conjugate pairs".into()));
    }
    let mut reals: Vec<f64> = roots
        .iter()
        .filter(|r| r.im.abs() <= IMAG_TOL)
        .map(|r| r.re)
        .collect();
    reals.sort_by(|a, b| a.total_cmp(b));
    if reals.len() % 2 != 0 {
        return Err(Error::Design("odd number of real roots".into()));
    }
    for c in reals.chunks(2) {
        pairs.push([Complex64::new(c[0], 0.0), Complex64::new(c[1], 0.0)]);
    }
    Ok(pairs)
}

/// Group poles with their nearest remaining zeros, starting from the pole
/// pair closest to the unit circle.
fn to_sections(zeros: Vec<Complex64>, poles: Vec<Complex64>) -> Result<Vec<Biquad>> {
    let mut pole_pairs = pair_roots(&poles)?;
    let mut zero_pairs = pair_roots(&zeros)?;
    if pole_pairs.len() != zero_pairs.len() {
        return Err(Error::Design("pole and zero counts differ".into()));
    }
    pole_pairs.sort_by(|a, b| b[0].norm().total_cmp(&a[0].norm()));
    let mut out = Vec::with_capacity(pole_pairs.len());
    for pp in pole_pairs {
        let (best, _) = zero_pairs
            .iter()
            .enumerate()
            .map(|(i, zp)| (i, (zp[0] - pp[0]).norm().min((zp[1] - pp[0]).norm())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("counts match");
        let zp = zero_pairs.swap_remove(best);
        out.push(Biquad {
            b0: 1.0,
            b1: -(zp[0] + zp[1]).re,
            b2: (zp[0] * zp[1]).re,
            a1: -(pp[0] + pp[1]).re,
            a2: (pp[0] * pp[1]).re,
        });
    }
    Ok(out)
}
