//! Coupled FitzHugh-Nagumo dynamics.
//!
//! Per node `i`:
//!
//! ```text
//! dv_i/dt = v_i − v_i³/3 − w_i + I + Σ_j K_ij (v_j − v_i)
//! dw_i/dt = ε (v_i + a − b w_i)
//! ```
//!
//! `v` is the membrane potential (activation), `w` the recovery variable.

mod residual;
mod rk4;
mod synth;

pub use residual::{
    finite_diff_dt, fhn_residuals, physics_loss, physics_loss_value, residual_values,
};
pub use rk4::{integrate_rk4, integrate_rk4_sampled, write_trajectory_csv};
pub use synth::{synthesize_trialset, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FhnParams {
    pub epsilon: f64,
    pub a: f64,
    pub b: f64,
    pub stimulus: f64,
    /// Time step of the finite-difference residual.
    pub dt: f64,
}

impl Default for FhnParams {
    /// ε = 0.08, a = 0.7, b = 0.8, I = 0.5; `dt` is one sample at 250 Hz and
    /// is normally replaced by `1 / sample_rate` of the data at hand.
    fn default() -> Self {
        FhnParams {
            epsilon: 0.08,
            a: 0.7,
            b: 0.8,
            stimulus: 0.5,
            dt: 1.0 / 250.0,
        }
    }
}

impl FhnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Parameter(format!(
                "epsilon and dt must be positive (got {}, {})",
                self.epsilon, self.dt
            )));
        }
        Ok(())
    }

    /// Rest state of the uncoupled system, found by bisection on the
    /// v-nullcline/w-nullcline intersection `v − v³/3 − (v + a)/b + I = 0`.
    pub fn equilibrium(&self) -> (f64, f64) {
        let g = |v: f64| v - v.powi(3) / 3.0 - (v + self.a) / self.b + self.stimulus;
        let (mut lo, mut hi) = (-10.0, 10.0);
        // g(−10) > 0 > g(10) for any sensible parameter set
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = 0.5 * (lo + hi);
        (v, (v + self.a) / self.b)
    }

    /// Trace of the Jacobian at `v`: `1 − v² − ε b`. Positive at the rest
    /// state means the rest state is unstable and the system oscillates.
    pub fn jacobian_trace(&self, v: f64) -> f64 {
        1.0 - v * v - self.epsilon * self.b
    }
}

/// All-to-all coupling: `K_ij = strength` for `i ≠ j`, zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrix {
    pub k: Tensor,
    pub strength: f64,
}

impl CouplingMatrix {
    pub fn new(n_nodes: usize, strength: f64) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Parameter("coupling matrix needs at least one node".into()));
        }
        let mut k = Tensor::full(&[n_nodes, n_nodes], strength);
        for i in 0..n_nodes {
            k.data_mut()[i * n_nodes + i] = 0.0;
        }
        Ok(CouplingMatrix { k, strength })
    }

    pub fn n_nodes(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k.data()[i * self.n_nodes() + j]
    }

    /// `L = K − diag(rowsum K)`, so that `(L v)_i = Σ_j K_ij (v_j − v_i)`.
    pub fn laplacian(&self) -> Tensor {
        let n = self.n_nodes();
        let mut l = self.k.clone();
        for i in 0..n {
            let row: f64 = self.k.data()[i * n..(i + 1) * n].iter().sum();
            l.data_mut()[i * n + i] -= row;
        }
        l
    }
}

pub fn build_coupling_matrix(n_nodes: usize, strength: f64) -> Result<CouplingMatrix> {
    CouplingMatrix::new(n_nodes, strength)
}

/// Predicted or simulated fields, `v` and `w` shaped `[.., N, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePair {
    pub v: Tensor,
    pub w: Tensor,
    pub dt: f64,
}

/// Right-hand side of the (optionally coupled) system at one instant.
pub fn fhn_rhs(
    v: &[f64],
    w: &[f64],
    params: &FhnParams,
    coupling: Option<&CouplingMatrix>,
) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut dv: Vec<f64> = v
        .iter()
        .zip(w)
        .map(|(&vi, &wi)| vi - vi.powi(3) / 3.0 - wi + params.stimulus)
        .collect();
    if let Some(k) = coupling {
        for i in 0..n {
            let mut c = 0.0;
            for j in 0..n {
                c += k.get(i, j) * (v[j] - v[i]);
            }
            dv[i] += c;
        }
    }
    let dw = v
        .iter()
        .zip(w)
        .map(|(&vi, &wi)| params.epsilon * (vi + params.a - params.b * wi))
        .collect();
    (dv, dw)
}
