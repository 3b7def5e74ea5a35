use super::{CouplingMatrix, FhnParams, StatePair};
use crate::diff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward difference along the last axis: `(x[t+1] − x[t]) / dt`.
pub fn finite_diff_dt(tape: &mut Tape, x: Var, dt: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let axis = shape.len().checked_sub(1).ok_or_else(|| {
        Error::Dimension("finite difference needs at least one axis".into())
    })?;
    let t = shape[axis];
    if t < 2 {
        return Err(Error::Dimension(format!(
            "finite difference needs at least 2 time points, shape {shape:?}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
    }
    let head = tape.narrow(x, axis, 0, t - 1)?;
    let tail = tape.narrow(x, axis, 1, t - 1)?;
    let d = tape.sub(tail, head)?;
    Ok(tape.scale(d, 1.0 / dt))
}

/// Residuals of the FHN equations for fields shaped `[.., N, T]`, aligned to
/// the first `T − 1` time points. Uses `params.dt` as the time step.
pub fn fhn_residuals(
    tape: &mut Tape,
    v: Var,
    w: Var,
    params: &FhnParams,
    coupling: Option<&CouplingMatrix>,
) -> Result<(Var, Var)> {
    params.validate()?;
    let shape = tape.shape(v).to_vec();
    if shape != tape.shape(w) {
        return Err(Error::Dimension(format!(
            "v {shape:?} and w {:?} differ",
            tape.shape(w)
        )));
    }
    if shape.len() < 2 {
        return Err(Error::Dimension(format!(
            "fields must be [.., nodes, time], got {shape:?}"
        )));
    }
    let time_axis = shape.len() - 1;
    let node_axis = shape.len() - 2;
    let t = shape[time_axis];
    let dv = finite_diff_dt(tape, v, params.dt)?;
    let dw = finite_diff_dt(tape, w, params.dt)?;
    let vt = tape.narrow(v, time_axis, 0, t - 1)?;
    let wt = tape.narrow(w, time_axis, 0, t - 1)?;

    // v − v³/3 − w + I (+ coupling)
    let cube = tape.powi(vt, 3);
    let cube = tape.scale(cube, 1.0 / 3.0);
    let mut rhs_v = tape.sub(vt, cube)?;
    rhs_v = tape.sub(rhs_v, wt)?;
    rhs_v = tape.add_scalar(rhs_v, params.stimulus);
    if let Some(k) = coupling {
        if k.n_nodes() != shape[node_axis] {
            return Err(Error::Dimension(format!(
                "coupling matrix for {} nodes, fields have {}",
                k.n_nodes(),
                shape[node_axis]
            )));
        }
        let c = tape.mix_axis(vt, &k.laplacian(), node_axis)?;
        rhs_v = tape.add(rhs_v, c)?;
    }
    let fv = tape.sub(dv, rhs_v)?;

    // ε (v + a − b w)
    let ev = tape.scale(vt, params.epsilon);
    let ew = tape.scale(wt, -params.epsilon * params.b);
    let rhs_w = tape.add(ev, ew)?;
    let rhs_w = tape.add_scalar(rhs_w, params.epsilon * params.a);
    let fw = tape.sub(dw, rhs_w)?;
    Ok((fv, fw))
}

/// Mean over residual points of `f_v² + f_w²`.
pub fn physics_loss(
    tape: &mut Tape,
    v: Var,
    w: Var,
    params: &FhnParams,
    coupling: Option<&CouplingMatrix>,
) -> Result<Var> {
    let (fv, fw) = fhn_residuals(tape, v, w, params, coupling)?;
    let fv2 = tape.powi(fv, 2);
    let fw2 = tape.powi(fw, 2);
    let total = tape.add(fv2, fw2)?;
    Ok(tape.mean(total))
}

fn with_state_dt(s: &StatePair, params: &FhnParams) -> FhnParams {
    FhnParams { dt: s.dt, ..*params }
}

/// Residual tensors of a concrete trajectory, using the trajectory's own
/// sampling step `s.dt`.
pub fn residual_values(
    s: &StatePair,
    params: &FhnParams,
    coupling: Option<&CouplingMatrix>,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new(Mode::Eval, 0);
    let v = tape.constant(s.v.clone());
    let w = tape.constant(s.w.clone());
    let (fv, fw) = fhn_residuals(&mut tape, v, w, &with_state_dt(s, params), coupling)?;
    Ok((tape.value(fv).clone(), tape.value(fw).clone()))
}

/// Physics loss of a concrete trajectory, using `s.dt`.
pub fn physics_loss_value(
    s: &StatePair,
    params: &FhnParams,
    coupling: Option<&CouplingMatrix>,
) -> Result<f64> {
    let mut tape = Tape::new(Mode::Eval, 0);
    let v = tape.constant(s.v.clone());
    let w = tape.constant(s.w.clone());
    let loss = physics_loss(&mut tape, v, w, &with_state_dt(s, params), coupling)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diff_of(x: Tensor, dt: f64) -> Result<Tensor> {
        let mut tape = Tape::new(Mode::Eval, 0);
        let v = tape.constant(x);
        let d = finite_diff_dt(&mut tape, v, dt)?;
        Ok(tape.value(d).clone())
    }

    #[test]
    fn finite_difference_basics() {
        assert_eq!(diff_of(Tensor::from_vec(vec![0.0, 1.0, 2.0]), 1.0).unwrap().data(), &[1.0, 1.0]);
        let flat = diff_of(Tensor::full(&[2, 5], 3.5), 0.1).unwrap();
        assert_eq!(flat.shape(), &[2, 4]);
        assert!(flat.data().iter().all(|&x| x == 0.0));
        assert!(matches!(diff_of(Tensor::from_vec(vec![1.0]), 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn quadratic_bias_equals_step() {
        let dt = 0.1;
        let t: Vec<f64> = (0..20).map(|k| k as f64 * dt).collect();
        let d = diff_of(Tensor::from_vec(t.iter().map(|x| x * x).collect()), dt).unwrap();
        for (k, &dk) in d.data().iter().enumerate() {
            assert!((dk - 2.0 * t[k] - dt).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_state_residuals() {
        let p = FhnParams::default();
        let s = StatePair {
            v: Tensor::zeros(&[3, 6]),
            w: Tensor::zeros(&[3, 6]),
            dt: 0.01,
        };
        let (fv, fw) = residual_values(&s, &p, None).unwrap();
        assert_eq!(fv.shape(), &[3, 5]);
        assert!(fv.data().iter().all(|&x| (x + 0.5).abs() < 1e-15));
        assert!(fw.data().iter().all(|&x| (x + 0.056).abs() < 1e-15));
    }

    #[test]
    fn zero_state_loss_fixture() {
        let p = FhnParams::default();
        let s = StatePair {
            v: Tensor::zeros(&[1, 2]),
            w: Tensor::zeros(&[1, 2]),
            dt: p.dt,
        };
        let loss = physics_loss_value(&s, &p, None).unwrap();
        assert!((loss - 0.253136).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn mismatched_fields_are_rejected() {
        let mut tape = Tape::new(Mode::Eval, 0);
        let v = tape.constant(Tensor::zeros(&[2, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 5]));
        let p = FhnParams::default();
        assert!(matches!(fhn_residuals(&mut tape, v, w, &p, None), Err(Error::Dimension(_))));
    }
}
