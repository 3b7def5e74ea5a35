//! Run manifests.
//!
//! A manifest is the resolved configuration in `key = value` form, preceded
//! by `#` lines with the command, artifact hashes and wall time. Comments are
//! ignored by the config parser, so a manifest is itself a valid `--config`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use neurophys::config::ConfigMap;
use neurophys::io::write_atomic;
use neurophys::Result;
use sha2::{Digest, Sha256};

pub struct Manifest {
    command: String,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    notes: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&neurophys::io::read(path)?))
}

impl Manifest {
    pub fn start() -> Self {
        let command = std::env::args().collect::<Vec<_>>().join(" ");
        Manifest {
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    pub fn render(&self, config: &ConfigMap) -> Result<String> {
        let mut text = String::from("# neurophys run manifest\n");
        text += &format!("# command: {}\n", self.command);
        for path in &self.inputs {
            text += &format!("# input {} sha256 {}\n", path.display(), hash_file(path)?);
        }
        for path in &self.outputs {
            text += &format!("# output {} sha256 {}\n", path.display(), hash_file(path)?);
        }
        for note in &self.notes {
            text += &format!("# {note}\n");
        }
        text += &format!("# wall_time_s: {:.3}\n", self.started.elapsed().as_secs_f64());
        text += &config.render();
        Ok(text)
    }

    pub fn write(&self, path: &Path, config: &ConfigMap) -> Result<()> {
        write_atomic(path, self.render(config)?.as_bytes())
    }
}

/// `<file>.manifest` next to a file output.
pub fn beside(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}
