use std::fs;
use std::path::Path;

use neurophys::checkpoint::{save_checkpoint, Checkpoint};
use neurophys::config::ConfigMap;
use neurophys::fhn::{integrate_rk4, write_trajectory_csv, CouplingMatrix, SynthSpec};
use neurophys::io::write_atomic;
use neurophys::model::Model;
use neurophys::sigproc::{load_eegb, save_eegb};
use neurophys::trainer::{
    evaluate, run_protocol, stratified_split, stratified_subsample, train, EvalReport, Prepared,
    PreprocessConfig,
};
use neurophys::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::{beside, Manifest};
use crate::settings::{self, render_layout, Resolved};

/// Settings from defaults, environment, an optional stored layer, the
/// `--config` file and the flags, in increasing priority.
pub fn resolve(config: Option<&Path>, flags: &ConfigMap, stored: Option<&ConfigMap>) -> Result<Resolved> {
    let mut map = settings::base()?;
    if let Some(stored) = stored {
        settings::merge_checked(&mut map, stored, Path::new("checkpoint"))?;
    }
    settings::load_file(&mut map, config)?;
    map.merge(flags);
    let r = Resolved::new(map);
    configure_threads(r.jobs()?)?;
    Ok(r)
}

fn configure_threads(jobs: usize) -> Result<()> {
    neurophys::par::set_sequential(jobs == 1);
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        // Only the first call can size the global pool; later ones are no-ops.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    Ok(())
}

fn load_prepared(path: &Path, layout: Option<(usize, usize)>, pre: &PreprocessConfig) -> Result<Prepared> {
    let set = load_eegb(path)?;
    match layout {
        None => Prepared::from_trials(&set, pre),
        Some((windows, bands)) => Prepared::from_flat(&set, windows, bands),
    }
}

pub fn simulate(r: &Resolved) -> Result<()> {
    let out = r.path("io.out", "--out")?;
    let nodes: usize = r.get("simulate.nodes")?;
    let t_end: f64 = r.get("simulate.t_end")?;
    let dt: f64 = r.get("simulate.dt")?;
    let strength: f64 = r.get("simulate.coupling")?;
    if nodes == 0 {
        return Err(Error::Parameter("--nodes must be at least 1".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Parameter(format!("--dt must be positive, got {dt}")));
    }
    let fhn = r.train()?.fhn;
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed()?);
    let v0: Vec<f64> = (0..nodes).map(|_| rng.random_range(-2.0..2.0)).collect();
    let w0: Vec<f64> = (0..nodes).map(|_| rng.random_range(-1.0..1.5)).collect();
    let coupling = if nodes > 1 {
        Some(CouplingMatrix::new(nodes, strength)?)
    } else {
        None
    };
    let traj = integrate_rk4(&v0, &w0, &fhn, coupling.as_ref(), t_end, dt)?;
    let points = (t_end / dt).round() as usize;
    let mut csv = Vec::new();
    write_trajectory_csv(&mut csv, &traj, Some(points)).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_atomic(&out, &csv)?;

    let mut m = Manifest::start();
    m.output(&out);
    m.write(&beside(&out), &r.map)?;
    println!("wrote {} ({} nodes, {points} time points)", out.display(), nodes);
    Ok(())
}

pub fn synth(r: &Resolved) -> Result<()> {
    let out = r.path("io.out", "--out")?;
    let spec = SynthSpec::new(
        r.get("synth.trials")?,
        r.get("synth.channels")?,
        r.get("synth.classes")?,
        r.get("synth.noise")?,
        r.seed()?,
    );
    let set = spec.generate()?;
    save_eegb(&set, &out)?;

    let mut m = Manifest::start();
    m.output(&out);
    m.write(&beside(&out), &r.map)?;
    println!(
        "wrote {} ({} trials, {} channels x {} samples at {} Hz)",
        out.display(),
        set.len(),
        set.n_channels,
        set.n_samples,
        set.sample_rate_hz
    );
    Ok(())
}

pub fn preprocess(r: &Resolved) -> Result<()> {
    let input = r.path("io.input", "--input")?;
    let out = r.path("io.out", "--out")?;
    if r.layout()?.is_some() {
        return Err(Error::Config("preprocess expects raw trials (data.layout = raw)".into()));
    }
    let data = load_prepared(&input, None, &r.preprocess()?)?;
    let (bands, nodes, omega, windows) = data.geometry();
    save_eegb(&data.to_trials()?, &out)?;

    let layout = render_layout(windows, bands);
    let mut m = Manifest::start();
    m.input(&input);
    m.output(&out);
    m.note(format!("output layout: {layout} ({nodes} channels, {omega} samples per window)"));
    m.write(&beside(&out), &r.map)?;
    println!("wrote {} with layout {layout}; pass `--layout {layout}` to train or eval it", out.display());
    Ok(())
}

pub fn train_cmd(r: &Resolved) -> Result<()> {
    let input = r.path("io.input", "--input")?;
    let out = r.path("io.out", "--out")?;
    let layout = r.layout()?;
    let pre = r.preprocess()?;
    let cfg = r.train()?;
    let arch = r.arch()?;
    let seed = cfg.seed;
    let mut m = Manifest::start();

    let data = load_prepared(&input, layout, &pre)?;
    m.input(&input);
    let (mut train_set, eval_set) = match r.opt_path("io.eval_input") {
        Some(path) => {
            let eval = load_prepared(&path, layout, &pre)?;
            m.input(&path);
            (data, Some(eval))
        }
        None => match r.eval_fraction()? {
            f if f > 0.0 => {
                let (t, v) = stratified_split(&data.labels, f, seed)?;
                (data.subset(&t), Some(data.subset(&v)))
            }
            _ => (data, None),
        },
    };
    if cfg.data_fraction < 1.0 {
        let keep = stratified_subsample(&train_set.labels, cfg.data_fraction, seed)?;
        train_set = train_set.subset(&keep);
    }

    let net = cfg.resolve_net(&arch, &train_set)?;
    let (model, mut params) = Model::build(&net, seed)?;
    let log = train(&model, &mut params, &train_set, eval_set.as_ref(), &cfg)?;

    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let metrics = out.join("metrics.csv");
    let ckpt = out.join("model.npnw");
    write_atomic(&metrics, log.to_csv().as_bytes())?;
    save_checkpoint(&ckpt, &net, &params, &settings::checkpoint_record(&r.map))?;
    m.output(&metrics);
    m.output(&ckpt);
    m.note(format!(
        "parameters: {}; train trials: {}; eval trials: {}",
        model.count_parameters(&params),
        train_set.len(),
        eval_set.as_ref().map_or(0, Prepared::len)
    ));
    m.write(&out.join("manifest.txt"), &r.map)?;

    if let Some(last) = log.last() {
        println!(
            "epoch {}: loss {:.6} (cls {:.6}, phys {:.6}), train acc {:.3}, eval acc {:.3}",
            last.epoch + 1,
            last.loss_total,
            last.loss_cls,
            last.loss_phys,
            last.acc_train,
            last.acc_eval
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn render_report(report: &EvalReport, n: usize) -> String {
    let mut text = format!("accuracy = {:.6}\ntrials = {n}\n", report.accuracy);
    text += "confusion (rows: true class, columns: predicted class)\n";
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
        text += &cells.join("");
        text += "\n";
    }
    text
}

pub fn eval_cmd(r: &Resolved, ckpt_path: &Path, mut ckpt: Checkpoint) -> Result<()> {
    let input = r.path("io.input", "--input")?;
    let out = r.path("io.out", "--out")?;
    let cfg = r.train()?;
    let data = load_prepared(&input, r.layout()?, &r.preprocess()?)?;
    let subset: String = r.get("eval.subset")?;
    let data = match subset.as_str() {
        "all" => data,
        "train" | "eval" => {
            let (t, v) = stratified_split(&data.labels, r.eval_fraction()?, cfg.seed)?;
            data.subset(if subset == "train" { &t } else { &v })
        }
        other => {
            return Err(Error::Config(format!("eval.subset {other:?} is not all, train or eval")));
        }
    };
    let report = evaluate(&ckpt.model, &mut ckpt.params, &data, cfg.batch_size)?;
    let text = render_report(&report, data.len());
    write_atomic(&out, text.as_bytes())?;

    let mut m = Manifest::start();
    m.input(ckpt_path);
    m.input(&input);
    m.output(&out);
    m.write(&beside(&out), &r.map)?;
    print!("{text}");
    Ok(())
}

pub fn protocol_cmd(r: &Resolved) -> Result<()> {
    let input = r.path("io.input", "--input")?;
    let out = r.path("io.out", "--out")?;
    let layout = r.layout()?;
    let pre = r.preprocess()?;
    let mut m = Manifest::start();
    let data = load_prepared(&input, layout, &pre)?;
    m.input(&input);
    let eval = match r.opt_path("io.eval_input") {
        Some(path) => {
            m.input(&path);
            Some(load_prepared(&path, layout, &pre)?)
        }
        None => None,
    };
    let protocol = r.protocol()?;
    let seeds = r.protocol_seeds()?;
    let report = run_protocol(&r.arch()?, &data, eval.as_ref(), &r.train()?, protocol, &seeds)?;
    write_atomic(&out, report.to_csv().as_bytes())?;
    m.output(&out);
    m.write(&beside(&out), &r.map)?;
    for (seed, acc) in report.per_seed() {
        println!("seed {seed}: accuracy {acc:.4}");
    }
    println!("{protocol}: mean accuracy {:.4} over {} runs", report.mean_accuracy(), report.rows.len());
    Ok(())
}
