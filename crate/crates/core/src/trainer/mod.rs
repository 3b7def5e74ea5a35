//! Training, evaluation and experiment protocols.

mod optim;
mod protocol;
mod split;

pub use optim::{Optimizer, OptimizerKind};
pub use protocol::{run_protocol, Protocol, Report, ReportRow};
pub use split::{stratified_folds, stratified_split, stratified_subsample};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{exact, ConfigMap};
use crate::diff::{Mode, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::fhn::{physics_loss, CouplingMatrix, FhnParams};
use crate::io::fmt_sig;
use crate::model::{ArchConfig, Model, NetConfig};
use crate::sigproc::{FilterBankSpec, Preprocessor, TrialSet, WindowSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the physics loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub data_fraction: f64,
    /// Freeze the PINN trunk so classification relies on the head, the
    /// feature branches and the classifier only.
    pub vw_only: bool,
    pub coupling_in_loss: bool,
    pub coupling_strength: f64,
    /// Rescale the joint gradient to at most this L2 norm; 0 disables.
    pub grad_clip: f64,
    /// ε, a, b, I of the residual; `dt` is replaced by the physics step.
    pub fhn: FhnParams,
    /// Residual time step; `None` means one sample, `1 / sample_rate`.
    pub physics_dt: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 1e-3,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            data_fraction: 1.0,
            vw_only: false,
            coupling_in_loss: true,
            coupling_strength: 0.1,
            grad_clip: 5.0,
            fhn: FhnParams::default(),
            physics_dt: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lambda ({}) and lr ({}) must be non-negative",
                self.lambda, self.lr
            )));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return Err(Error::Config(format!("grad clip must be a non-negative number, got {}", self.grad_clip)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data fraction {} outside (0, 1]",
                self.data_fraction
            )));
        }
        if let Some(dt) = self.physics_dt {
            if !(dt > 0.0) {
                return Err(Error::Config(format!("physics dt must be positive, got {dt}")));
            }
        }
        Ok(())
    }

    /// Resolve `arch` against the geometry of `data`, with the PINN head
    /// initialised at the rest state of this config's FHN parameters.
    pub fn resolve_net(&self, arch: &ArchConfig, data: &Prepared) -> Result<NetConfig> {
        let (f, c, om, w) = data.geometry();
        let mut net = arch.resolve(f, c, om, w, data.classes)?;
        net.pinn.rest_state = self.fhn.equilibrium();
        Ok(net)
    }

    pub fn write(&self, map: &mut ConfigMap) {
        map.set("train.lambda", exact(self.lambda));
        map.set("train.lr", exact(self.lr));
        map.set("train.batch", self.batch_size);
        map.set("train.epochs", self.epochs);
        map.set("train.seed", self.seed);
        map.set("train.optimizer", self.optimizer);
        map.set("train.fraction", exact(self.data_fraction));
        map.set("train.vw_only", self.vw_only);
        map.set("train.coupling_in_loss", self.coupling_in_loss);
        map.set("train.coupling_strength", exact(self.coupling_strength));
        map.set("train.grad_clip", exact(self.grad_clip));
        map.set("fhn.epsilon", exact(self.fhn.epsilon));
        map.set("fhn.a", exact(self.fhn.a));
        map.set("fhn.b", exact(self.fhn.b));
        map.set("fhn.stimulus", exact(self.fhn.stimulus));
        map.set(
            "fhn.dt",
            self.physics_dt.map_or("auto".to_string(), exact),
        );
    }

    pub fn read(&mut self, map: &ConfigMap) -> Result<()> {
        map.read_into("train.lambda", &mut self.lambda)?;
        map.read_into("train.lr", &mut self.lr)?;
        map.read_into("train.batch", &mut self.batch_size)?;
        map.read_into("train.epochs", &mut self.epochs)?;
        map.read_into("train.seed", &mut self.seed)?;
        map.read_into("train.optimizer", &mut self.optimizer)?;
        map.read_into("train.fraction", &mut self.data_fraction)?;
        map.read_into("train.vw_only", &mut self.vw_only)?;
        map.read_into("train.coupling_in_loss", &mut self.coupling_in_loss)?;
        map.read_into("train.coupling_strength", &mut self.coupling_strength)?;
        map.read_into("train.grad_clip", &mut self.grad_clip)?;
        map.read_into("fhn.epsilon", &mut self.fhn.epsilon)?;
        map.read_into("fhn.a", &mut self.fhn.a)?;
        map.read_into("fhn.b", &mut self.fhn.b)?;
        map.read_into("fhn.stimulus", &mut self.fhn.stimulus)?;
        match map.get_str("fhn.dt") {
            None => {}
            Some("auto") => self.physics_dt = None,
            Some(_) => self.physics_dt = map.get("fhn.dt")?,
        }
        Ok(())
    }
}

/// Windowing and filter-bank settings; window length and stride default to
/// one second and half a second of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub window_len: Option<usize>,
    pub stride: Option<usize>,
    pub bank: FilterBankSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window_len: None,
            stride: None,
            bank: FilterBankSpec::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn window(&self, sample_rate: f64) -> WindowSpec {
        let auto = WindowSpec::for_rate(sample_rate);
        WindowSpec {
            len: self.window_len.unwrap_or(auto.len),
            stride: self.stride.unwrap_or(auto.stride),
        }
    }

    pub fn write(&self, map: &mut ConfigMap) {
        let opt = |o: Option<usize>| o.map_or("auto".to_string(), |v| v.to_string());
        map.set("preprocess.window_len", opt(self.window_len));
        map.set("preprocess.stride", opt(self.stride));
        map.set("preprocess.bands", crate::config::render_bands(&self.bank.bands));
        map.set("preprocess.order", self.bank.order);
        map.set("preprocess.atten_db", exact(self.bank.stopband_atten_db));
        map.set("preprocess.transition_hz", exact(self.bank.transition_hz));
    }

    pub fn read(&mut self, map: &ConfigMap) -> Result<()> {
        for (key, slot) in [
            ("preprocess.window_len", &mut self.window_len),
            ("preprocess.stride", &mut self.stride),
        ] {
            match map.get_str(key) {
                None => {}
                Some("auto") => *slot = None,
                Some(_) => *slot = map.get(key)?,
            }
        }
        if let Some(text) = map.get_str("preprocess.bands") {
            self.bank.bands = crate::config::parse_bands(text)?;
        }
        map.read_into("preprocess.order", &mut self.bank.order)?;
        map.read_into("preprocess.atten_db", &mut self.bank.stopband_atten_db)?;
        map.read_into("preprocess.transition_hz", &mut self.bank.transition_hz)?;
        Ok(())
    }
}

/// Preprocessed trials ready for the network.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `[B, W, F, C, ω]`.
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub sample_rate: f64,
}

impl Prepared {
    pub fn from_trials(set: &TrialSet, pre: &PreprocessConfig) -> Result<Self> {
        let fs = set.sample_rate_hz as f64;
        let p = Preprocessor::new(pre.window(fs), &pre.bank, fs)?;
        Ok(Prepared {
            x: p.run(set)?,
            labels: set.labels_usize(),
            classes: set.n_classes,
            sample_rate: fs,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Prepared {
        Prepared {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            sample_rate: self.sample_rate,
        }
    }

    /// `(F, C, ω, W)` of one trial.
    pub fn geometry(&self) -> (usize, usize, usize, usize) {
        let s = self.x.shape();
        (s[2], s[3], s[4], s[1])
    }

    /// Flatten to a trial set with `W·F·C` channels of `ω` samples each,
    /// rounding values to `f32`.
    pub fn to_trials(&self) -> Result<TrialSet> {
        let s = self.x.shape();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in u8")))
            })
            .collect::<Result<Vec<_>>>()?;
        TrialSet::new(
            self.x.data().iter().map(|&v| v as f32).collect(),
            labels,
            s[1] * s[2] * s[3],
            s[4],
            self.classes,
            self.sample_rate as f32,
        )
    }

    /// Inverse of [`Prepared::to_trials`]: split each trial's channels into
    /// `windows × bands × nodes`.
    pub fn from_flat(set: &TrialSet, windows: usize, bands: usize) -> Result<Self> {
        let per = windows * bands;
        if per == 0 || set.n_channels % per != 0 {
            return Err(Error::Data(format!(
                "{} channels do not split into {windows} windows × {bands} bands",
                set.n_channels
            )));
        }
        let nodes = set.n_channels / per;
        let x = set
            .to_tensor()
            .reshape(&[set.len(), windows, bands, nodes, set.n_samples])?;
        Ok(Prepared {
            x,
            labels: set.labels_usize(),
            classes: set.n_classes,
            sample_rate: set.sample_rate_hz as f64,
        })
    }
}

/// Classification, physics and combined loss of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub classification: Var,
    pub physics: Var,
}

/// `cross_entropy(logits, labels) + λ · physics_loss(v, w)`.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    v: Var,
    w: Var,
    fhn: &FhnParams,
    coupling: Option<&CouplingMatrix>,
    lambda: f64,
) -> Result<LossParts> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let classification = tape.cross_entropy(logits, labels)?;
    let physics = physics_loss(tape, v, w, fhn, coupling)?;
    let weighted = tape.scale(physics, lambda);
    let total = tape.add(classification, weighted)?;
    Ok(LossParts {
        total,
        classification,
        physics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_phys: f64,
    pub acc_train: f64,
    pub acc_eval: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
    pub wall_time_s: f64,
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,loss_total,loss_cls,loss_phys,acc_train,acc_eval";

    /// One row per epoch, 6 significant digits. Wall time is left out so
    /// identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                fmt_sig(r.loss_total, 6),
                fmt_sig(r.loss_cls, 6),
                fmt_sig(r.loss_phys, 6),
                fmt_sig(r.acc_train, 6),
                fmt_sig(r.acc_eval, 6),
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Physics settings resolved against the data's sample rate.
pub fn physics_setup(cfg: &TrainConfig, model: &Model, sample_rate: f64) -> Result<(FhnParams, Option<CouplingMatrix>)> {
    let fhn = FhnParams {
        dt: cfg.physics_dt.unwrap_or(1.0 / sample_rate),
        ..cfg.fhn
    };
    fhn.validate()?;
    let coupling = if cfg.coupling_in_loss {
        Some(CouplingMatrix::new(model.config.pinn.num_nodes, cfg.coupling_strength)?)
    } else {
        None
    };
    Ok((fhn, coupling))
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ ((epoch as u64 + 1) << 40) ^ ((batch as u64 + 1) << 8) ^ 0x9e37_79b9_7f4a_7c15
}

/// Scale the gradients of all trainable parameters so their joint L2 norm
/// is at most `max_norm`. Returns the norm before scaling.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch training of `params` in place.
///
/// Shuffling and dropout draw from generators seeded by `cfg.seed`, so two
/// calls with the same inputs produce identical logs and weights. When
/// `eval` is `None` the eval-mode accuracy is measured on `train`.
pub fn train(
    model: &Model,
    params: &mut ParamSet,
    train: &Prepared,
    eval: Option<&Prepared>,
    cfg: &TrainConfig,
) -> Result<MetricsLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let start = Instant::now();
    let (fhn, coupling) = physics_setup(cfg, model, train.sample_rate)?;
    if cfg.vw_only {
        model.set_trunk_trainable(params, false);
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = MetricsLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_total, mut sum_cls, mut sum_phys) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.subset(idx);
            let mut tape = Tape::new(Mode::Train, batch_seed(cfg.seed, epoch, bi));
            let x = tape.constant(batch.x);
            let out = model.forward(&mut tape, params, x)?;
            let loss = total_loss(
                &mut tape,
                out.logits,
                &batch.labels,
                out.v,
                out.w,
                &fhn,
                coupling.as_ref(),
                cfg.lambda,
            )?;
            let total = tape.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            let n = idx.len() as f64;
            sum_total += n * total;
            sum_cls += n * tape.value(loss.classification).item();
            sum_phys += n * tape.value(loss.physics).item();
            let k = train.classes;
            let logits = tape.value(out.logits).data();
            correct += batch
                .labels
                .iter()
                .enumerate()
                .filter(|(r, &l)| argmax(&logits[r * k..(r + 1) * k]) == l)
                .count();
            params.zero_grad();
            tape.backward(loss.total, params)?;
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(params, cfg.grad_clip);
            }
            opt.step(params);
        }
        let n = train.len() as f64;
        let acc_eval = evaluate(model, params, eval.unwrap_or(train), cfg.batch_size)?.accuracy;
        log.records.push(EpochRecord {
            epoch,
            loss_total: sum_total / n,
            loss_cls: sum_cls / n,
            loss_phys: sum_phys / n,
            acc_train: correct as f64 / n,
            acc_eval,
        });
    }
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Accuracy and confusion matrix of argmax predictions over `[B, K]` logits.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalReport> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "logits {s:?} for {} labels",
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty set".into()));
    }
    let k = s[1];
    let mut confusion = vec![vec![0; k]; k];
    let mut predictions = Vec::with_capacity(labels.len());
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Data(format!("label {l} outside {k} classes")));
        }
        let p = argmax(&logits.data()[r * k..(r + 1) * k]);
        confusion[l][p] += 1;
        predictions.push(p);
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
        predictions,
    })
}

/// Eval-mode classification of `data` in batches of `batch_size`.
pub fn evaluate(model: &Model, params: &mut ParamSet, data: &Prepared, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty set".into()));
    }
    let k = model.config.featx.classes;
    let mut logits = Vec::with_capacity(data.len() * k);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (l, _) = model.predict(params, &data.x.select_rows(idx), 1.0 / data.sample_rate)?;
        logits.extend_from_slice(l.data());
    }
    score_logits(&Tensor::new(&[data.len(), k], logits)?, &data.labels)
}
