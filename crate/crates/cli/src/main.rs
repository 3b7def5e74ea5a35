//! `neurophys` command-line tool.
//!
//! Exit status: 0 on success, 1 on runtime failure (I/O, malformed files,
//! divergence), 2 on usage or configuration errors.

mod commands;
mod manifest;
mod settings;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurophys::checkpoint::load_checkpoint;
use neurophys::config::ConfigMap;
use neurophys::io::write_atomic;
use neurophys::{Error, Result};

use settings::{set_opt, set_opt_f64, set_opt_path};

#[derive(Parser)]
#[command(name = "neurophys", version, about = "Physics-informed classification of multichannel time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a coupled FitzHugh-Nagumo network and write its trajectory as CSV.
    Simulate(SimulateArgs),
    /// Generate a labelled synthetic dataset (EEGB).
    Synth(SynthArgs),
    /// Window and band-filter raw trials into a flattened EEGB file.
    Preprocess(DataArgs),
    /// Train a model; writes model.npnw, metrics.csv and manifest.txt into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write an accuracy report.
    Eval(EvalArgs),
    /// Run the built-in numerical self-checks.
    Verify(VerifyArgs),
    /// Run a cross-validation or holdout experiment over several seeds.
    RunProtocol(ProtocolArgs),
}

#[derive(Args)]
struct Common {
    /// `key = value` settings file; flags take precedence over it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (falls back to NEUROPHYS_SEED, then 0).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long, value_name = "U32")]
    jobs: Option<u32>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

impl Common {
    fn apply(&self, map: &mut ConfigMap) {
        set_opt(map, "seed", self.seed);
        set_opt(map, "run.jobs", self.jobs);
        set_opt_path(map, "io.out", self.out.as_deref());
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, value_name = "F64")]
    t_end: Option<f64>,
    #[arg(long, value_name = "F64")]
    dt: Option<f64>,
    /// Uniform all-to-all coupling strength.
    #[arg(long, value_name = "F64")]
    coupling: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Standard deviation of the additive white noise.
    #[arg(long, value_name = "F64")]
    noise: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// `raw`, or `<windows>x<bands>` for output of `preprocess`.
    #[arg(long)]
    layout: Option<String>,
    #[command(flatten)]
    common: Common,
}

impl DataArgs {
    fn apply(&self, map: &mut ConfigMap) {
        set_opt_path(map, "io.input", self.input.as_deref());
        set_opt(map, "data.layout", self.layout.as_deref());
        self.common.apply(map);
    }
}

#[derive(Args)]
struct TrainFlags {
    /// Weight of the physics loss.
    #[arg(long, value_name = "F64", allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, value_name = "U32")]
    epochs: Option<u32>,
    #[arg(long, value_name = "U32")]
    batch: Option<u32>,
    #[arg(long, value_name = "F64")]
    lr: Option<f64>,
    /// Fraction of the training split to use.
    #[arg(long, value_name = "F64")]
    fraction: Option<f64>,
    /// Train only the PINN output head and the classifier.
    #[arg(long)]
    vw_only: bool,
    /// Include node coupling in the physics residual.
    #[arg(long, value_name = "BOOL")]
    coupling_in_loss: Option<bool>,
    #[arg(long, value_name = "PATH")]
    eval_input: Option<PathBuf>,
}

impl TrainFlags {
    fn apply(&self, map: &mut ConfigMap) {
        set_opt_f64(map, "train.lambda", self.lambda);
        set_opt(map, "train.epochs", self.epochs);
        set_opt(map, "train.batch", self.batch);
        set_opt_f64(map, "train.lr", self.lr);
        set_opt_f64(map, "train.fraction", self.fraction);
        if self.vw_only {
            map.set("train.vw_only", true);
        }
        set_opt(map, "train.coupling_in_loss", self.coupling_in_loss);
        set_opt_path(map, "io.eval_input", self.eval_input.as_deref());
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Held-out share when no --eval-input is given; 0 trains on everything.
    #[arg(long, value_name = "F64")]
    eval_fraction: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// `all`, or the `train`/`eval` side of the split recorded at training time.
    #[arg(long)]
    subset: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated subset of checks.
    #[arg(long, value_name = "LIST")]
    only: Option<String>,
    /// Print the available check names and exit.
    #[arg(long)]
    list: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ProtocolArgs {
    /// `holdout`, `cv` (5 folds) or `cv<k>`.
    #[arg(long)]
    protocol: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: DataArgs,
}

/// Whether the command's own checks passed (only `verify` can say no).
fn run(cli: Cli) -> Result<bool> {
    let mut flags = ConfigMap::new();
    match cli.command {
        Command::Simulate(a) => {
            set_opt(&mut flags, "simulate.nodes", a.nodes);
            set_opt_f64(&mut flags, "simulate.t_end", a.t_end);
            set_opt_f64(&mut flags, "simulate.dt", a.dt);
            set_opt_f64(&mut flags, "simulate.coupling", a.coupling);
            a.common.apply(&mut flags);
            commands::simulate(&commands::resolve(a.common.config.as_deref(), &flags, None)?)?;
        }
        Command::Synth(a) => {
            set_opt(&mut flags, "synth.trials", a.trials);
            set_opt(&mut flags, "synth.channels", a.channels);
            set_opt(&mut flags, "synth.classes", a.classes);
            set_opt_f64(&mut flags, "synth.noise", a.noise);
            a.common.apply(&mut flags);
            commands::synth(&commands::resolve(a.common.config.as_deref(), &flags, None)?)?;
        }
        Command::Preprocess(a) => {
            a.apply(&mut flags);
            commands::preprocess(&commands::resolve(a.common.config.as_deref(), &flags, None)?)?;
        }
        Command::Train(a) => {
            set_opt_f64(&mut flags, "data.eval_fraction", a.eval_fraction);
            a.train.apply(&mut flags);
            a.data.apply(&mut flags);
            commands::train_cmd(&commands::resolve(a.data.common.config.as_deref(), &flags, None)?)?;
        }
        Command::Eval(a) => {
            set_opt(&mut flags, "eval.subset", a.subset.as_deref());
            set_opt_path(&mut flags, "io.checkpoint", Some(&a.checkpoint));
            a.data.apply(&mut flags);
            let ckpt = load_checkpoint(&a.checkpoint)?;
            let stored = settings::known_subset(&ckpt.config);
            let r = commands::resolve(a.data.common.config.as_deref(), &flags, Some(&stored))?;
            commands::eval_cmd(&r, &a.checkpoint, ckpt)?;
        }
        Command::Verify(a) => {
            if a.list {
                println!("{}", verify::CHECKS.join("\n"));
                return Ok(true);
            }
            a.common.apply(&mut flags);
            let r = commands::resolve(a.common.config.as_deref(), &flags, None)?;
            let names = verify::select(a.only.as_deref())?;
            let mut m = manifest::Manifest::start();
            let rows = verify::run(&names)?;
            let text = verify::render(&rows);
            print!("{text}");
            if let Some(out) = r.opt_path("io.out") {
                write_atomic(&out, text.as_bytes())?;
                m.output(&out);
                m.write(&manifest::beside(&out), &r.map)?;
            }
            return Ok(rows.iter().all(|row| row.passed));
        }
        Command::RunProtocol(a) => {
            set_opt(&mut flags, "protocol.name", a.protocol.as_deref());
            set_opt(&mut flags, "protocol.seeds", a.seeds.as_deref());
            a.train.apply(&mut flags);
            a.data.apply(&mut flags);
            commands::protocol_cmd(&commands::resolve(a.data.common.config.as_deref(), &flags, None)?)?;
        }
    }
    Ok(true)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Usage(_) | Error::Design(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("neurophys: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
