use std::io::Write;

use super::{fhn_rhs, CouplingMatrix, FhnParams, StatePair};
use crate::error::{Error, Result};
use crate::io::fmt_sig;
use crate::tensor::Tensor;

/// Classical fixed-step RK4 from `(v0, w0)` to `t_end`.
///
/// Returns `v`, `w` shaped `[N, steps + 1]` with `steps = round(t_end / dt_int)`;
/// column `k` holds the state at `t = k · dt_int`.
pub fn integrate_rk4(
    v0: &[f64],
    w0: &[f64],
    params: &FhnParams,
    coupling: Option<&CouplingMatrix>,
    t_end: f64,
    dt_int: f64,
) -> Result<StatePair> {
    integrate_rk4_sampled(v0, w0, params, coupling, t_end, dt_int, 1)
}

/// As [`integrate_rk4`] but keeps only every `every`-th state, so the
/// returned `dt` is `every · dt_int`.
pub fn integrate_rk4_sampled(
    v0: &[f64],
    w0: &[f64],
    params: &FhnParams,
    coupling: Option<&CouplingMatrix>,
    t_end: f64,
    dt_int: f64,
    every: usize,
) -> Result<StatePair> {
    if !(dt_int > 0.0) || !dt_int.is_finite() {
        return Err(Error::Parameter(format!("dt_int must be positive, got {dt_int}")));
    }
    if !(t_end >= dt_int) || !t_end.is_finite() {
        return Err(Error::Parameter(format!(
            "t_end ({t_end}) must be at least dt_int ({dt_int})"
        )));
    }
    if every == 0 {
        return Err(Error::Parameter("sampling stride must be at least 1".into()));
    }
    let n = v0.len();
    if n == 0 || w0.len() != n {
        return Err(Error::Dimension(format!(
            "initial state lengths v={} w={}",
            v0.len(),
            w0.len()
        )));
    }
    if let Some(k) = coupling {
        if k.n_nodes() != n {
            return Err(Error::Dimension(format!(
                "coupling matrix for {} nodes, state has {n}",
                k.n_nodes()
            )));
        }
    }

    let steps = (t_end / dt_int).round() as usize;
    let kept = steps / every + 1;
    let mut vs = vec![0.0; n * kept];
    let mut ws = vec![0.0; n * kept];
    let mut v = v0.to_vec();
    let mut w = w0.to_vec();
    let store = |vs: &mut [f64], ws: &mut [f64], col: usize, v: &[f64], w: &[f64]| {
        for i in 0..n {
            vs[i * kept + col] = v[i];
            ws[i * kept + col] = w[i];
        }
    };
    store(&mut vs, &mut ws, 0, &v, &w);

    let h = dt_int;
    let mut tmp_v = vec![0.0; n];
    let mut tmp_w = vec![0.0; n];
    for step in 1..=steps {
        let (k1v, k1w) = fhn_rhs(&v, &w, params, coupling);
        for i in 0..n {
            tmp_v[i] = v[i] + 0.5 * h * k1v[i];
            tmp_w[i] = w[i] + 0.5 * h * k1w[i];
        }
        let (k2v, k2w) = fhn_rhs(&tmp_v, &tmp_w, params, coupling);
        for i in 0..n {
            tmp_v[i] = v[i] + 0.5 * h * k2v[i];
            tmp_w[i] = w[i] + 0.5 * h * k2w[i];
        }
        let (k3v, k3w) = fhn_rhs(&tmp_v, &tmp_w, params, coupling);
        for i in 0..n {
            tmp_v[i] = v[i] + h * k3v[i];
            tmp_w[i] = w[i] + h * k3w[i];
        }
        let (k4v, k4w) = fhn_rhs(&tmp_v, &tmp_w, params, coupling);
        for i in 0..n {
            v[i] += h / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
            w[i] += h / 6.0 * (k1w[i] + 2.0 * k2w[i] + 2.0 * k3w[i] + k4w[i]);
        }
        if v.iter().chain(&w).any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite state at integration step {step} (t = {})",
                step as f64 * h
            )));
        }
        if step % every == 0 {
            store(&mut vs, &mut ws, step / every, &v, &w);
        }
    }

    Ok(StatePair {
        v: Tensor::new(&[n, kept], vs)?,
        w: Tensor::new(&[n, kept], ws)?,
        dt: h * every as f64,
    })
}

/// Write a `[N, T]` trajectory as CSV (`t,node,v,w`, 9 significant digits),
/// one row per time point and node, limited to the first `time_points`
/// columns when given.
pub fn write_trajectory_csv<W: Write>(
    out: &mut W,
    s: &StatePair,
    time_points: Option<usize>,
) -> std::io::Result<()> {
    let shape = s.v.shape();
    assert_eq!(shape.len(), 2, "trajectory export expects [N, T] fields");
    let (n, t_len) = (shape[0], shape[1]);
    let t_len = time_points.map_or(t_len, |t| t.min(t_len));
    let cols = shape[1];
    writeln!(out, "t,node,v,w")?;
    for k in 0..t_len {
        let t = fmt_sig(k as f64 * s.dt, 9);
        for i in 0..n {
            writeln!(
                out,
                "{t},{i},{},{}",
                fmt_sig(s.v.data()[i * cols + k], 9),
                fmt_sig(s.w.data()[i * cols + k], 9)
            )?;
        }
    }
    Ok(())
}
