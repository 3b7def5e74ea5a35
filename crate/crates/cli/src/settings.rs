//! Resolution of the run configuration.
//!
//! Every command works from one flat `key = value` map. Built-in defaults
//! come first, then `NEUROPHYS_SEED`, then settings stored in a checkpoint
//! (for `eval`), then the `--config` file, then command-line flags. The
//! resolved map is what the manifest records, so feeding a manifest back
//! through `--config` repeats the run.

use std::path::{Path, PathBuf};

use neurophys::config::{exact, ConfigMap};
use neurophys::model::ArchConfig;
use neurophys::trainer::{PreprocessConfig, Protocol, TrainConfig};
use neurophys::{Error, Result};

pub const SEED_ENV: &str = "NEUROPHYS_SEED";

/// Keys owned by the command line rather than a library config struct.
const CLI_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("run.jobs", "0"),
    ("data.layout", "raw"),
    ("data.eval_fraction", "0.2"),
    ("synth.trials", "200"),
    ("synth.channels", "4"),
    ("synth.classes", "2"),
    ("synth.noise", "1.0"),
    ("simulate.nodes", "1"),
    ("simulate.t_end", "100.0"),
    ("simulate.dt", "0.01"),
    ("simulate.coupling", "0.1"),
    ("eval.subset", "all"),
    ("protocol.name", "holdout"),
    ("protocol.seeds", "1,2,3"),
];

/// Paths; recorded in the manifest but never stored in a checkpoint.
const IO_KEYS: &[&str] = &["io.input", "io.eval_input", "io.checkpoint", "io.out"];

pub fn defaults() -> ConfigMap {
    let mut map = ConfigMap::new();
    PreprocessConfig::default().write(&mut map);
    ArchConfig::default().write(&mut map);
    TrainConfig::default().write(&mut map);
    // One run-wide seed replaces the per-struct one.
    map.remove("train.seed");
    for (k, v) in CLI_DEFAULTS {
        map.set(k, v);
    }
    map
}

fn is_known(key: &str, known: &ConfigMap) -> bool {
    known.get_str(key).is_some() || IO_KEYS.contains(&key)
}

/// Layer `overlay` onto `map`, rejecting keys this program does not use.
pub fn merge_checked(map: &mut ConfigMap, overlay: &ConfigMap, origin: &Path) -> Result<()> {
    let known = defaults();
    if let Some(k) = overlay.keys().find(|k| !is_known(k, &known)) {
        return Err(Error::Config(format!("{}: unknown key {k:?}", origin.display())));
    }
    map.merge(overlay);
    Ok(())
}

/// Entries of `map` this program reads; a checkpoint also stores the
/// network shape, which is taken from the checkpoint itself.
pub fn known_subset(map: &ConfigMap) -> ConfigMap {
    let known = defaults();
    let mut out = ConfigMap::new();
    for key in map.keys().filter(|k| is_known(k, &known)) {
        out.set(key, map.get_str(key).unwrap_or_default());
    }
    out
}

/// Defaults plus the seed from the environment, if set.
pub fn base() -> Result<ConfigMap> {
    let mut map = defaults();
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("{SEED_ENV}={raw:?}: {e}")))?;
        map.set("seed", seed);
    }
    Ok(map)
}

pub fn load_file(map: &mut ConfigMap, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        let file = ConfigMap::load(path)?;
        merge_checked(map, &file, path)?;
    }
    Ok(())
}

/// The subset of `map` that describes the trained model and its data
/// handling, stored alongside the weights.
pub fn checkpoint_record(map: &ConfigMap) -> ConfigMap {
    let mut out = ConfigMap::new();
    for key in map.keys() {
        let keep = ["preprocess.", "train.", "fhn.", "data."]
            .iter()
            .any(|p| key.starts_with(p))
            || key == "seed";
        if keep {
            out.set(key, map.get_str(key).unwrap_or_default());
        }
    }
    out
}

/// Typed view of a resolved map.
pub struct Resolved {
    pub map: ConfigMap,
}

impl Resolved {
    pub fn new(map: ConfigMap) -> Self {
        Resolved { map }
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.map
            .get(key)?
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.required("seed")
    }

    pub fn jobs(&self) -> Result<usize> {
        self.required("run.jobs")
    }

    pub fn path(&self, key: &str, flag: &str) -> Result<PathBuf> {
        self.map
            .get_str(key)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .ok_or_else(|| Error::Usage(format!("{flag} is required")))
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.map.get_str(key).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn preprocess(&self) -> Result<PreprocessConfig> {
        let mut pre = PreprocessConfig::default();
        pre.read(&self.map)?;
        Ok(pre)
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let mut arch = ArchConfig::default();
        arch.read(&self.map)?;
        Ok(arch)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.read(&self.map)?;
        cfg.seed = self.seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `None` for raw trials, else `(windows, bands)` of preprocessed input.
    pub fn layout(&self) -> Result<Option<(usize, usize)>> {
        parse_layout(self.map.get_str("data.layout").unwrap_or("raw"))
    }

    pub fn eval_fraction(&self) -> Result<f64> {
        let f: f64 = self.required("data.eval_fraction")?;
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("data.eval_fraction must be in [0, 1), got {f}")));
        }
        Ok(f)
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.required::<String>("protocol.name")?.parse()
    }

    pub fn protocol_seeds(&self) -> Result<Vec<u64>> {
        let text: String = self.required("protocol.seeds")?;
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("protocol.seeds entry {s:?}: {e}")))
            })
            .collect()
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.required(key)
    }
}

/// `raw` or `<windows>x<bands>`.
pub fn parse_layout(text: &str) -> Result<Option<(usize, usize)>> {
    if text == "raw" {
        return Ok(None);
    }
    let bad = || Error::Config(format!("data.layout {text:?} is not `raw` or `<windows>x<bands>`"));
    let (w, f) = text.split_once('x').ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let f: usize = f.trim().parse().map_err(|_| bad())?;
    if w == 0 || f == 0 {
        return Err(bad());
    }
    Ok(Some((w, f)))
}

pub fn render_layout(windows: usize, bands: usize) -> String {
    format!("{windows}x{bands}")
}

/// Set `key` when a flag was given.
pub fn set_opt<T: std::fmt::Display>(map: &mut ConfigMap, key: &str, value: Option<T>) {
    if let Some(v) = value {
        map.set(key, v);
    }
}

pub fn set_opt_f64(map: &mut ConfigMap, key: &str, value: Option<f64>) {
    if let Some(v) = value {
        map.set(key, exact(v));
    }
}

pub fn set_opt_path(map: &mut ConfigMap, key: &str, value: Option<&Path>) {
    if let Some(p) = value {
        map.set(key, p.display());
    }
}
