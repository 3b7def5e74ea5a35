//! Finite-difference gradient cases shared by the gradient and acceptance
//! suites.

#![allow(dead_code)]

use neurophys::diff::{grad_check, GradCheckOptions, GradReport, Mode, ParamSet, Tape, Var};
use neurophys::featx::{FeatxConfig, FeatxModel};
use neurophys::fhn::{CouplingMatrix, FhnParams};
use neurophys::model::{Model, NetConfig};
use neurophys::nn::{EncoderLayer, MultiHeadAttention};
use neurophys::pinn::{PinnConfig, PinnModel};
use neurophys::trainer::total_loss;
use neurophys::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tolerance for smooth primitive operators.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for composed pipelines.
pub const COMPOSITE_TOL: f64 = 1e-4;

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn() -> GradReport,
}

/// Gradient-check `op` on random inputs of the given shapes. The output is
/// reduced with fixed random weights so every entry has its own sensitivity.
pub fn check_op<F>(shapes: &[&[usize]], tol: f64, mode: Mode, op: F) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(shapes, tol, mode, |t| t, op)
}

pub fn check_with<F, I>(shapes: &[&[usize]], tol: f64, mode: Mode, init: I, op: F) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    I: Fn(Tensor) -> Tensor,
{
    let seed = shapes.iter().flat_map(|s| s.iter()).fold(17u64, |h, &d| h * 31 + d as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| params.add(format!("x{i}"), init(Tensor::randn(s, 1.0, &mut rng)), true))
        .collect();
    let mut weights: Option<Tensor> = None;
    let opts = GradCheckOptions::default().tolerance(tol).mode(mode);
    grad_check(&mut params, &opts, |tape, ps| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(ps, id)).collect();
        let out = op(tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let wt = weights
            .get_or_insert_with(|| Tensor::uniform(&shape, 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(3)))
            .clone();
        let wv = tape.constant(wt);
        let prod = tape.mul(out, wv)?;
        Ok(tape.sum(prod))
    })
    .unwrap()
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|x| if x >= 0.0 { x + 1e-2 } else { x - 1e-2 })
}

/// Fold several reports into one (worst error, total count).
pub fn merge(reports: Vec<GradReport>) -> GradReport {
    let mut out = reports[0].clone();
    for r in reports.into_iter().skip(1) {
        out.checked += r.checked;
        out.passed &= r.passed;
        if r.max_rel_err > out.max_rel_err {
            out.max_rel_err = r.max_rel_err;
            out.worst = r.worst;
        }
    }
    out
}

pub fn tiny_pinn() -> PinnConfig {
    PinnConfig {
        f1: 3,
        f2: 4,
        pool: (1, 2),
        pool_stride: (1, 2),
        hidden_dim: 16,
        layers: 1,
        heads: 2,
        dropout: 0.2,
        ..PinnConfig::for_input(2, 3, 16, 2)
    }
}

pub fn tiny_featx(nodes: usize, time_len: usize) -> FeatxConfig {
    FeatxConfig {
        f1: 3,
        f2: 4,
        latent_dim: 8,
        ..FeatxConfig::for_input(nodes, time_len, 2)
    }
}

const P: f64 = PRIMITIVE_TOL;
const E: Mode = Mode::Eval;

fn add() -> GradReport {
    let s: &[usize] = &[3, 4];
    merge(vec![
        check_op(&[s, s], P, E, |t, v| t.add(v[0], v[1])),
        check_op(&[s, s], P, E, |t, v| t.sub(v[0], v[1])),
        check_op(&[&[2, 3, 4], &[3, 4]], P, E, |t, v| t.add_broadcast(v[0], v[1])),
        check_op(&[s], P, E, |t, v| Ok(t.add_scalar(v[0], 0.7))),
    ])
}

fn mul() -> GradReport {
    let s: &[usize] = &[3, 4];
    merge(vec![
        check_op(&[s, s], P, E, |t, v| t.mul(v[0], v[1])),
        check_op(&[s], P, E, |t, v| Ok(t.scale(v[0], -2.5))),
        check_op(&[s], P, E, |t, v| Ok(t.powi(v[0], 3))),
        check_op(&[s], P, E, |t, v| Ok(t.powi(v[0], 2))),
    ])
}

fn relu() -> GradReport {
    check_with(&[&[3, 4]], P, E, away_from_zero, |t, v| Ok(t.relu(v[0])))
}

fn shape_ops() -> GradReport {
    merge(vec![
        check_op(&[&[2, 3, 4]], P, E, |t, v| t.reshape(v[0], &[6, 4])),
        check_op(&[&[2, 3, 4]], P, E, |t, v| t.permute(v[0], &[2, 0, 1])),
        check_op(&[&[2, 5, 3]], P, E, |t, v| t.narrow(v[0], 1, 1, 3)),
        check_op(&[&[2, 5, 3]], P, E, |t, v| t.narrow(v[0], 2, 2, 1)),
    ])
}

fn reductions() -> GradReport {
    merge(vec![
        check_op(&[&[3, 4]], P, E, |t, v| Ok(t.sum(v[0]))),
        check_op(&[&[3, 4]], P, E, |t, v| Ok(t.mean(v[0]))),
        check_op(&[&[2, 3, 4]], P, E, |t, v| t.mean_axis(v[0], 1)),
        check_op(&[&[2, 3, 4]], P, E, |t, v| t.mean_axis(v[0], 2)),
    ])
}

fn matmul() -> GradReport {
    let m = Tensor::randn(&[3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    merge(vec![
        check_op(&[&[2, 3, 4], &[2, 4, 5]], P, E, |t, v| t.matmul(v[0], v[1])),
        check_op(&[&[3, 4], &[4, 2]], P, E, |t, v| t.matmul(v[0], v[1])),
        check_op(&[&[2, 3, 4]], P, E, |t, v| t.mix_axis(v[0], &m, 1)),
    ])
}

fn linear() -> GradReport {
    merge(vec![
        check_op(&[&[3, 5], &[4, 5], &[4]], P, E, |t, v| t.linear(v[0], v[1], Some(v[2]))),
        check_op(&[&[2, 3, 5], &[4, 5]], P, E, |t, v| t.linear(v[0], v[1], None)),
    ])
}

fn conv2d() -> GradReport {
    merge(vec![
        check_op(&[&[2, 3, 8, 8], &[4, 3, 3, 3]], P, E, |t, v| t.conv2d(v[0], v[1], (0, 0))),
        check_op(&[&[2, 3, 5, 6], &[2, 3, 3, 2]], P, E, |t, v| t.conv2d(v[0], v[1], (1, 2))),
    ])
}

fn conv1d() -> GradReport {
    merge(vec![
        check_op(&[&[2, 3, 10], &[4, 3, 5]], P, E, |t, v| t.conv1d(v[0], v[1], 2)),
        check_op(&[&[1, 2, 7], &[3, 2, 3]], P, E, |t, v| t.conv1d(v[0], v[1], 0)),
    ])
}

fn maxpool() -> GradReport {
    merge(vec![
        check_op(&[&[2, 2, 6, 6]], P, E, |t, v| t.maxpool2d(v[0], (2, 2), (2, 2))),
        check_op(&[&[1, 2, 5, 7]], P, E, |t, v| t.maxpool2d(v[0], (3, 2), (1, 2))),
        check_op(&[&[2, 3, 9]], P, E, |t, v| t.maxpool1d(v[0], 2, 2)),
    ])
}

fn softmax() -> GradReport {
    check_op(&[&[3, 5]], P, E, |t, v| t.softmax(v[0]))
}

fn layer_norm() -> GradReport {
    check_op(&[&[2, 3, 5], &[5], &[5]], P, E, |t, v| t.layer_norm(v[0], v[1], v[2]))
}

fn batch_norm() -> GradReport {
    merge(vec![
        check_op(&[&[4, 3, 5], &[3], &[3]], P, E, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2])?.0)),
        check_op(&[&[4, 3], &[3], &[3]], P, E, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2])?.0)),
        check_op(&[&[4, 3, 5], &[3], &[3]], P, E, |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])
        }),
    ])
}

fn dropout() -> GradReport {
    merge(vec![
        check_op(&[&[4, 6]], P, Mode::Train, |t, v| t.dropout(v[0], 0.3)),
        check_op(&[&[4, 6]], P, E, |t, v| t.dropout(v[0], 0.3)),
    ])
}

fn cross_entropy() -> GradReport {
    check_op(&[&[8, 4]], P, E, |t, v| t.cross_entropy(v[0], &[0, 1, 2, 3, 3, 2, 1, 0]))
}

fn attention() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut params, "mha", 8, 2, &mut rng).unwrap();
    let x = params.add("x", Tensor::randn(&[4, 2, 8], 1.0, &mut rng), true);
    grad_check(&mut params, &GradCheckOptions::default().tolerance(1e-5), |tape, ps| {
        let xv = tape.param(ps, x);
        let (y, _) = mha.forward_seq_first(tape, ps, xv)?;
        let y2 = tape.powi(y, 2);
        Ok(tape.mean(y2))
    })
    .unwrap()
}

fn encoder_layer() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut params = ParamSet::new();
    let layer = EncoderLayer::new(&mut params, "enc", 8, 2, 0.2, &mut rng).unwrap();
    let x = params.add("x", Tensor::randn(&[2, 3, 8], 1.0, &mut rng), true);
    let reports = [Mode::Eval, Mode::Train]
        .into_iter()
        .map(|mode| {
            let opts = GradCheckOptions::default().tolerance(COMPOSITE_TOL).mode(mode);
            grad_check(&mut params, &opts, |tape, ps| {
                let xv = tape.param(ps, x);
                let y = layer.forward(tape, ps, xv)?;
                let y = tape.narrow(y, 2, 0, 3)?;
                Ok(tape.sum(y))
            })
            .unwrap()
        })
        .collect();
    merge(reports)
}

fn conv_relu_linear_ce() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut params = ParamSet::new();
    let x = Tensor::randn(&[3, 2, 5, 5], 1.0, &mut rng);
    let k = params.add("k", Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng), true);
    let w = params.add("w", Tensor::randn(&[4, 27], 0.3, &mut rng), true);
    let b = params.add("b", Tensor::randn(&[4], 0.3, &mut rng), true);
    grad_check(&mut params, &GradCheckOptions::default().tolerance(COMPOSITE_TOL), |tape, ps| {
        let xv = tape.constant(x.clone());
        let kv = tape.param(ps, k);
        let h = tape.conv2d(xv, kv, (0, 0))?;
        let h = tape.relu(h);
        let h = tape.reshape(h, &[3, 27])?;
        let (wv, bv) = (tape.param(ps, w), tape.param(ps, b));
        let logits = tape.linear(h, wv, Some(bv))?;
        tape.cross_entropy(logits, &[0, 3, 1])
    })
    .unwrap()
}

/// Every PINN parameter on the tiny configuration (C = 3, ω = 16, hidden 16).
fn pinn_forward() -> GradReport {
    let cfg = tiny_pinn();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = ParamSet::new();
    let model = PinnModel::new(&mut params, "pinn", &cfg, &mut rng).unwrap();
    // larger head weights so the fields depend visibly on the trunk
    params[model.head.weight].value = Tensor::randn(&[cfg.head_dim(), 16], 0.3, &mut rng);
    let x = Tensor::randn(&[2, 2, 2, 3, 16], 1.0, &mut rng);
    let reports = [Mode::Eval, Mode::Train]
        .into_iter()
        .map(|mode| {
            let opts = GradCheckOptions::default().tolerance(COMPOSITE_TOL).mode(mode);
            grad_check(&mut params, &opts, |tape, ps| {
                let xv = tape.constant(x.clone());
                let (v, _) = model.forward(tape, ps, xv)?;
                Ok(tape.mean(v))
            })
            .unwrap()
        })
        .collect();
    merge(reports)
}

fn extract_features() -> GradReport {
    let cfg = tiny_featx(3, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut params = ParamSet::new();
    let model = FeatxModel::new(&mut params, "featx", &cfg, &mut rng).unwrap();
    let v = params.add("v", Tensor::randn(&[2, 2, 3, 6], 1.0, &mut rng), true);
    let w = params.add("w", Tensor::randn(&[2, 2, 3, 6], 1.0, &mut rng), true);
    let reports = [Mode::Eval, Mode::Train]
        .into_iter()
        .map(|mode| {
            let opts = GradCheckOptions::default().tolerance(COMPOSITE_TOL).mode(mode);
            grad_check(&mut params, &opts, |tape, ps| {
                let (vv, wv) = (tape.param(ps, v), tape.param(ps, w));
                let f = model.extract(tape, ps, vv, wv)?;
                let logits = model.classify(tape, ps, f)?;
                tape.cross_entropy(logits, &[1, 0])
            })
            .unwrap()
        })
        .collect();
    merge(reports)
}

fn combined_loss() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut params = ParamSet::new();
    let logits = params.add("logits", Tensor::randn(&[3, 4], 1.0, &mut rng), true);
    let v = params.add("v", Tensor::randn(&[3, 2, 4, 5], 1.0, &mut rng), true);
    let w = params.add("w", Tensor::randn(&[3, 2, 4, 5], 1.0, &mut rng), true);
    let fhn = FhnParams { dt: 0.1, ..FhnParams::default() };
    let coupling = CouplingMatrix::new(4, 0.3).unwrap();
    let reports = [None, Some(&coupling)]
        .into_iter()
        .map(|c| {
            grad_check(&mut params, &GradCheckOptions::default().tolerance(COMPOSITE_TOL), |tape, ps| {
                let (l, vv, wv) = (tape.param(ps, logits), tape.param(ps, v), tape.param(ps, w));
                Ok(total_loss(tape, l, &[0, 3, 2], vv, wv, &fhn, c, 0.1)?.total)
            })
            .unwrap()
        })
        .collect();
    merge(reports)
}

fn full_network() -> GradReport {
    let pinn = tiny_pinn();
    let featx = tiny_featx(pinn.num_nodes, pinn.windows * pinn.data_points);
    let (model, mut params) = Model::build(&NetConfig { pinn, featx }, 34).unwrap();
    let x = Tensor::randn(&[2, 2, 2, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(35));
    let fhn = FhnParams { dt: 0.25, ..FhnParams::default() };
    let coupling = CouplingMatrix::new(3, 0.1).unwrap();
    let opts = GradCheckOptions::default().tolerance(COMPOSITE_TOL).mode(Mode::Train).sampled(12);
    grad_check(&mut params, &opts, |tape, ps| {
        let xv = tape.constant(x.clone());
        let out = model.forward(tape, ps, xv)?;
        Ok(total_loss(tape, out.logits, &[0, 1], out.v, out.w, &fhn, Some(&coupling), 0.1)?.total)
    })
    .unwrap()
}

pub fn cases() -> Vec<GradCase> {
    let c = |name, tolerance, run| GradCase { name, tolerance, run };
    vec![
        c("add/sub/broadcast", P, add as fn() -> GradReport),
        c("mul/scale/powi", P, mul),
        c("relu", P, relu),
        c("reshape/permute/narrow", P, shape_ops),
        c("sum/mean/mean_axis", P, reductions),
        c("matmul/mix_axis", P, matmul),
        c("linear", P, linear),
        c("conv2d", P, conv2d),
        c("conv1d", P, conv1d),
        c("maxpool", P, maxpool),
        c("softmax", P, softmax),
        c("layer_norm", P, layer_norm),
        c("batch_norm", P, batch_norm),
        c("dropout", P, dropout),
        c("cross_entropy", P, cross_entropy),
        c("attention", 1e-5, attention),
        c("encoder_layer", COMPOSITE_TOL, encoder_layer),
        c("conv-relu-linear-ce", COMPOSITE_TOL, conv_relu_linear_ce),
        c("pinn_forward", COMPOSITE_TOL, pinn_forward),
        c("extract_features", COMPOSITE_TOL, extract_features),
        c("total_loss", COMPOSITE_TOL, combined_loss),
        c("full_network", COMPOSITE_TOL, full_network),
    ]
}
