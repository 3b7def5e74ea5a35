//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, ParamSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_per_param: Option<usize>,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-3,
            max_per_param: None,
            mode: Mode::Eval,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn sampled(mut self, per_param: usize) -> Self {
        self.max_per_param = Some(per_param);
        self
    }

    pub fn mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare the gradient of the scalar built by `f` with respect to every
/// trainable entry of `params` against central differences.
///
/// `f` is called on a fresh tape (same mode and seed each time) and must
/// return a scalar. Parameter gradients are overwritten.
pub fn grad_check<F>(params: &mut ParamSet, opts: &GradCheckOptions, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &mut ParamSet) -> Result<Var>,
{
    if opts.tolerance <= 0.0 || opts.step <= 0.0 {
        return Err(Error::Parameter("tolerance and step must be positive".into()));
    }
    params.zero_grad();
    {
        let mut tape = Tape::new(opts.mode, opts.seed);
        let out = f(&mut tape, params)?;
        tape.backward(out, params)?;
    }
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();
    let mut eval = |params: &mut ParamSet| -> Result<f64> {
        let mut tape = Tape::new(opts.mode, opts.seed);
        let out = f(&mut tape, params)?;
        Ok(tape.value(out).item())
    };


    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tolerance: opts.tolerance,
        passed: true,
    };
    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if !params[id].trainable {
            continue;
        }
        let n = params[id].value.len();
        let entries: Vec<usize> = match opts.max_per_param {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = params[id].value.data()[i];
            params[id].value.data_mut()[i] = orig + opts.step;
            let up = eval(params)?;
            params[id].value.data_mut()[i] = orig - opts.step;
            let down = eval(params)?;
            params[id].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[pi][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((params[id].name.clone(), i, a, numeric));
                }
            }
        }
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}
