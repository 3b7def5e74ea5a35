use std::str::FromStr;

use super::{evaluate, stratified_folds, stratified_split, stratified_subsample, train, Prepared, TrainConfig};
use crate::error::{Error, Result};
use crate::io::fmt_sig;
use crate::model::{ArchConfig, Model};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Stratified k-fold cross-validation within one set.
    CrossValidation { folds: usize },
    /// Train on one set, evaluate on a separate one (or on a stratified 20%
    /// split when no separate set is given).
    Holdout,
}

impl FromStr for Protocol {
    type Err = Error;

    /// `cv` (5 folds), `cv<k>`, or `holdout`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout" => Ok(Protocol::Holdout),
            "cv" => Ok(Protocol::CrossValidation { folds: 5 }),
            _ => s
                .strip_prefix("cv")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k >= 2)
                .map(|folds| Protocol::CrossValidation { folds })
                .ok_or_else(|| Error::Config(format!("unknown protocol {s:?} (cv, cv<k>, holdout)"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::CrossValidation { folds: 5 } => f.write_str("cv"),
            Protocol::CrossValidation { folds } => write!(f, "cv{folds}"),
            Protocol::Holdout => f.write_str("holdout"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub protocol: String,
    pub fraction: f64,
    pub seed: u64,
    pub fold: usize,
    pub acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub const HEADER: &'static str = "protocol,fraction,seed,fold,acc";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.protocol,
                fmt_sig(r.fraction, 6),
                r.seed,
                r.fold,
                fmt_sig(r.acc, 6)
            ));
        }
        out
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.acc).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Mean accuracy over the folds of each seed, in seed order.
    pub fn per_seed(&self) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(s, _, _)| *s == r.seed) {
                Some(e) => {
                    e.1 += r.acc;
                    e.2 += 1;
                }
                None => out.push((r.seed, r.acc, 1)),
            }
        }
        out.into_iter().map(|(s, sum, n)| (s, sum / n as f64)).collect()
    }
}

/// Train and score one model per (seed, fold).
///
/// Each job subsamples its training split to `cfg.data_fraction`
/// (stratified, seeded), initialises and trains with that seed, and reports
/// accuracy on the held-out part. `cfg.vw_only` freezes the PINN trunk.
/// Jobs run in parallel when the `parallel` feature is on.
pub fn run_protocol(
    arch: &ArchConfig,
    data: &Prepared,
    holdout_eval: Option<&Prepared>,
    cfg: &TrainConfig,
    protocol: Protocol,
    seeds: &[u64],
) -> Result<Report> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("protocol needs at least one seed".into()));
    }
    if data.is_empty() {
        return Err(Error::Usage("protocol data set is empty".into()));
    }
    let net = cfg.resolve_net(arch, data)?;

    let mut jobs: Vec<(u64, usize, Vec<usize>, Option<Vec<usize>>)> = Vec::new();
    for &seed in seeds {
        match protocol {
            Protocol::CrossValidation { folds } => {
                let parts = stratified_folds(&data.labels, folds, seed)?;
                for (k, val) in parts.iter().enumerate() {
                    let train_idx = parts
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != k)
                        .flat_map(|(_, p)| p.iter().copied())
                        .collect::<Vec<_>>();
                    jobs.push((seed, k, train_idx, Some(val.clone())));
                }
            }
            Protocol::Holdout => match holdout_eval {
                Some(_) => jobs.push((seed, 0, (0..data.len()).collect(), None)),
                None => {
                    let (t, v) = stratified_split(&data.labels, 0.2, seed)?;
                    jobs.push((seed, 0, t, Some(v)));
                }
            },
        }
    }

    let label = if cfg.vw_only {
        format!("{protocol}-vw")
    } else {
        protocol.to_string()
    };
    let results = par::map_coarse(jobs.len(), |j| -> Result<ReportRow> {
        let (seed, fold, train_idx, val_idx) = &jobs[j];
        let mut train_idx = train_idx.clone();
        if cfg.data_fraction < 1.0 {
            let labels: Vec<usize> = train_idx.iter().map(|&i| data.labels[i]).collect();
            let keep = stratified_subsample(&labels, cfg.data_fraction, *seed)?;
            train_idx = keep.iter().map(|&k| train_idx[k]).collect();
        }
        let train_set = data.subset(&train_idx);
        let val_owned;
        let val = match val_idx {
            Some(idx) => {
                val_owned = data.subset(idx);
                &val_owned
            }
            None => holdout_eval.expect("holdout set present"),
        };
        let run_cfg = TrainConfig {
            seed: *seed,
            ..cfg.clone()
        };
        let (model, mut params) = Model::build(&net, *seed)?;
        train(&model, &mut params, &train_set, Some(val), &run_cfg)?;
        let acc = evaluate(&model, &mut params, val, cfg.batch_size)?.accuracy;
        Ok(ReportRow {
            protocol: label.clone(),
            fraction: cfg.data_fraction,
            seed: *seed,
            fold: *fold,
            acc,
        })
    });
    Ok(Report {
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}
