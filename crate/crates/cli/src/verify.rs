//! Self-checks of the numerical core, runnable from an installed binary.

use neurophys::diff::{grad_check, GradCheckOptions, Mode, ParamSet, Tape, Var};
use neurophys::featx::FeatxConfig;
use neurophys::fhn::{
    fhn_rhs, integrate_rk4, integrate_rk4_sampled, physics_loss_value, residual_values, CouplingMatrix,
    FhnParams, StatePair,
};
use neurophys::model::{Model, NetConfig};
use neurophys::pinn::PinnConfig;
use neurophys::sigproc::{design_cheby2_bandpass, FilterBank, FilterBankSpec};
use neurophys::trainer::total_loss;
use neurophys::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CHECKS: &[&str] = &["gradcheck", "rest-state", "rk4-order", "residual", "physics-fixture", "coupling", "filter"];

pub struct Row {
    pub check: &'static str,
    pub item: String,
    pub measured: String,
    pub threshold: String,
    pub passed: bool,
}

fn row(check: &'static str, item: &str, measured: String, threshold: &str, passed: bool) -> Row {
    Row {
        check,
        item: item.to_string(),
        measured,
        threshold: threshold.to_string(),
        passed,
    }
}

/// Names from a comma-separated `--only` list, or every check.
pub fn select(only: Option<&str>) -> Result<Vec<&'static str>> {
    let Some(list) = only else {
        return Ok(CHECKS.to_vec());
    };
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            CHECKS
                .iter()
                .copied()
                .find(|c| *c == name)
                .ok_or_else(|| Error::Usage(format!("unknown check {name:?} (known: {})", CHECKS.join(", "))))
        })
        .collect()
}

pub fn run(names: &[&'static str]) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for &name in names {
        match name {
            "gradcheck" => rows.extend(gradcheck()?),
            "rest-state" => rows.extend(rest_state()?),
            "rk4-order" => rows.push(rk4_order()?),
            "residual" => rows.push(residual()?),
            "physics-fixture" => rows.push(physics_fixture()?),
            "coupling" => rows.extend(coupling()?),
            "filter" => rows.extend(filter()?),
            _ => unreachable!("names come from select"),
        }
    }
    Ok(rows)
}

pub fn render(rows: &[Row]) -> String {
    let w_item = rows.iter().map(|r| r.check.len() + r.item.len() + 1).max().unwrap_or(0).max(5);
    let w_meas = rows.iter().map(|r| r.measured.len()).max().unwrap_or(0).max(8);
    let w_thr = rows.iter().map(|r| r.threshold.len()).max().unwrap_or(0).max(9);
    let mut out = format!("{:<w_item$}  {:<w_meas$}  {:<w_thr$}  result\n", "check", "measured", "threshold");
    for r in rows {
        let name = format!("{}/{}", r.check, r.item);
        out += &format!(
            "{name:<w_item$}  {:<w_meas$}  {:<w_thr$}  {}\n",
            r.measured,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    out += &format!("{} of {} checks passed\n", rows.len() - failed, rows.len());
    out
}

/// Worst relative error of `op` on random inputs, reduced with fixed weights.
fn op_error<F>(shapes: &[&[usize]], tol: f64, op: F) -> Result<(f64, bool)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(shapes.len() as u64 * 101 + shapes[0].iter().sum::<usize>() as u64);
    let mut params = ParamSet::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| params.add(format!("x{i}"), Tensor::randn(s, 1.0, &mut rng), true))
        .collect();
    let mut weights: Option<Tensor> = None;
    let opts = GradCheckOptions::default().tolerance(tol);
    let report = grad_check(&mut params, &opts, |tape, ps| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(ps, id)).collect();
        let out = op(tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let wt = weights
            .get_or_insert_with(|| Tensor::uniform(&shape, 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(3)))
            .clone();
        let wv = tape.constant(wt);
        let prod = tape.mul(out, wv)?;
        Ok(tape.sum(prod))
    })?;
    Ok((report.max_rel_err, report.passed))
}

fn gradcheck() -> Result<Vec<Row>> {
    const TOL: f64 = 1e-6;
    let smooth = [
        ("matmul", op_error(&[&[2, 3, 4], &[2, 4, 5]], TOL, |t, v| t.matmul(v[0], v[1]))?),
        ("conv2d", op_error(&[&[2, 3, 6, 6], &[4, 3, 3, 3]], TOL, |t, v| t.conv2d(v[0], v[1], (1, 1)))?),
        ("conv1d", op_error(&[&[2, 3, 10], &[4, 3, 5]], TOL, |t, v| t.conv1d(v[0], v[1], 2))?),
        ("softmax", op_error(&[&[3, 5]], TOL, |t, v| t.softmax(v[0]))?),
        ("layer_norm", op_error(&[&[2, 3, 5], &[5], &[5]], TOL, |t, v| t.layer_norm(v[0], v[1], v[2]))?),
        ("cross_entropy", op_error(&[&[6, 3]], TOL, |t, v| t.cross_entropy(v[0], &[0, 1, 2, 2, 1, 0]))?),
    ];
    let mut rows: Vec<Row> = smooth
        .into_iter()
        .map(|(name, (err, ok))| row("gradcheck", name, format!("{err:.2e}"), "< 1e-6", ok))
        .collect();

    let pinn = PinnConfig {
        f1: 3,
        f2: 4,
        pool: (1, 2),
        pool_stride: (1, 2),
        hidden_dim: 16,
        layers: 1,
        heads: 2,
        dropout: 0.2,
        ..PinnConfig::for_input(2, 3, 16, 2)
    };
    let featx = FeatxConfig {
        f1: 3,
        f2: 4,
        latent_dim: 8,
        ..FeatxConfig::for_input(pinn.num_nodes, pinn.windows * pinn.data_points, 2)
    };
    let (model, mut params) = Model::build(&NetConfig { pinn, featx }, 34)?;
    let x = Tensor::randn(&[2, 2, 2, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(35));
    let fhn = FhnParams { dt: 0.25, ..FhnParams::default() };
    let coupling = CouplingMatrix::new(3, 0.1)?;
    let opts = GradCheckOptions::default().tolerance(1e-4).mode(Mode::Train).sampled(12);
    let report = grad_check(&mut params, &opts, |tape, ps| {
        let xv = tape.constant(x.clone());
        let out = model.forward(tape, ps, xv)?;
        Ok(total_loss(tape, out.logits, &[0, 1], out.v, out.w, &fhn, Some(&coupling), 0.1)?.total)
    })?;
    rows.push(row(
        "gradcheck",
        "network+loss",
        format!("{:.2e}", report.max_rel_err),
        "< 1e-4",
        report.passed,
    ));
    Ok(rows)
}

fn rest_state() -> Result<Vec<Row>> {
    let p = FhnParams::default();
    let (v, w) = p.equilibrium();
    let off = (v + 0.805).abs().max((w + 0.131).abs());
    let s = integrate_rk4(&[v], &[w], &p, None, 1.0, 1e-3)?;
    let drift = s
        .v
        .data()
        .iter()
        .map(|x| (x - v).abs())
        .chain(s.w.data().iter().map(|x| (x - w).abs()))
        .fold(0.0, f64::max);
    Ok(vec![
        row("rest-state", "location", format!("({v:.4}, {w:.4})"), "(-0.805, -0.131) +- 1e-3", off < 1e-3),
        row("rest-state", "rk4-drift", format!("{drift:.1e}"), "< 1e-6", drift < 1e-6),
    ])
}

fn rk4_order() -> Result<Row> {
    let p = FhnParams::default();
    let k = CouplingMatrix::new(2, 0.1)?;
    let end = |dt: f64| -> Result<(f64, f64)> {
        let s = integrate_rk4(&[0.3, -1.0], &[0.0, 0.4], &p, Some(&k), 10.0, dt)?;
        let t = s.v.shape()[1];
        Ok((s.v.data()[t - 1], s.w.data()[2 * t - 1]))
    };
    let reference = end(1e-4)?;
    let err = |dt| -> Result<f64> {
        let (v, w) = end(dt)?;
        Ok((v - reference.0).abs().max((w - reference.1).abs()))
    };
    let factor = err(1e-2)? / err(5e-3)?;
    Ok(row("rk4-order", "halving-factor", format!("{factor:.2}"), ">= 12", factor >= 12.0))
}

fn residual() -> Result<Row> {
    let p = FhnParams::default();
    let k = CouplingMatrix::new(2, 0.1)?;
    let rms = |every: usize| -> Result<f64> {
        let s = integrate_rk4_sampled(&[0.0, 1.0], &[0.0, -0.3], &p, Some(&k), 40.0, 1e-4, every)?;
        let (fv, fw) = residual_values(&s, &p, Some(&k))?;
        let sq: f64 = fv.data().iter().chain(fw.data()).map(|x| x * x).sum();
        Ok((sq / (fv.len() + fw.len()) as f64).sqrt())
    };
    let ratio = rms(40)? / rms(20)?;
    Ok(row(
        "residual",
        "halving-ratio",
        format!("{ratio:.3}"),
        "in [1.8, 2.2]",
        (1.8..=2.2).contains(&ratio),
    ))
}

fn physics_fixture() -> Result<Row> {
    let p = FhnParams::default();
    let s = StatePair {
        v: Tensor::zeros(&[2, 3, 4, 9]),
        w: Tensor::zeros(&[2, 3, 4, 9]),
        dt: p.dt,
    };
    let loss = physics_loss_value(&s, &p, None)?;
    let err = (loss - 0.253136).abs();
    Ok(row("physics-fixture", "zero-state", format!("{loss:.9}"), "0.253136 +- 1e-9", err <= 1e-9))
}

fn coupling() -> Result<Vec<Row>> {
    let k = CouplingMatrix::new(3, 0.1)?;
    let want = [0.0, 0.1, 0.1, 0.1, 0.0, 0.1, 0.1, 0.1, 0.0];
    let exact = k.k.shape() == [3, 3] && k.k.data() == want;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for n in [2, 5, 22] {
        let r = Tensor::randn(&[n, n], 0.3, &mut rng);
        let mut sym = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                sym.data_mut()[i * n + j] = if i == j { 0.0 } else { r.data()[i.min(j) * n + i.max(j)] };
            }
        }
        let c = CouplingMatrix { k: sym, strength: 0.0 };
        let v = Tensor::randn(&[n], 1.5, &mut rng);
        let zeros = vec![0.0; n];
        let (with, _) = fhn_rhs(v.data(), &zeros, &FhnParams::default(), Some(&c));
        let (without, _) = fhn_rhs(v.data(), &zeros, &FhnParams::default(), None);
        let total: f64 = with.iter().zip(&without).map(|(a, b)| a - b).sum();
        worst = worst.max(total.abs());
    }
    Ok(vec![
        row("coupling", "matrix-3x3", exact.to_string(), "exact", exact),
        row("coupling", "symmetric-sum", format!("{worst:.1e}"), "<= 1e-12", worst <= 1e-12),
    ])
}

fn filter() -> Result<Vec<Row>> {
    let fs = 250.0;
    let f = design_cheby2_bandpass((8.0, 12.0), 4, 30.0, 2.0, fs)?;
    let grid = |hz: f64| (hz / (fs / 2.0) * 4096.0).round() / 4096.0 * fs / 2.0;
    let pass = f.magnitude_db(grid(10.0), fs);
    let stop = f.magnitude_db(grid(4.0), fs).max(f.magnitude_db(grid(16.0), fs));
    let mut radius = f.max_pole_radius();
    for rate in [128.0, 250.0] {
        for g in FilterBank::design(&FilterBankSpec::default(), rate)?.filters {
            radius = radius.max(g.max_pole_radius());
        }
    }
    Ok(vec![
        row("filter", "passband-10hz", format!("{pass:.3} dB"), ">= -3 dB", pass >= -3.0),
        row("filter", "stopband-4/16hz", format!("{stop:.2} dB"), "<= -30 dB", stop <= -30.0),
        row("filter", "max-pole-radius", format!("{radius:.6}"), "< 1", radius < 1.0),
    ])
}
