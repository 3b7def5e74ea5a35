//! EEGB: little-endian container for labelled trials.
//!
//! ```text
//! "EEGB"  u32 version=1  u32 n_trials  u32 n_channels  u32 n_samples
//! u32 n_classes  f32 sample_rate_hz
//! per trial: u8 label, n_channels·n_samples f32 (channel-major)
//! ```

use std::path::Path;

use super::TrialSet;
use crate::error::{Error, Result};
use crate::io::{self, Reader};

pub const MAGIC: &[u8; 4] = b"EEGB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn encode(set: &TrialSet) -> Result<Vec<u8>> {
    set.validate()?;
    let per_trial = set.n_channels * set.n_samples;
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * (1 + 4 * per_trial));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        u32_of(set.len(), "n_trials")?,
        u32_of(set.n_channels, "n_channels")?,
        u32_of(set.n_samples, "n_samples")?,
        u32_of(set.n_classes, "n_classes")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&set.sample_rate_hz.to_le_bytes());
    for i in 0..set.len() {
        out.push(set.labels[i]);
        for v in set.trial(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} = {v} does not fit in u32")))
}

pub fn decode(buf: &[u8]) -> Result<TrialSet> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"EEGB\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n_trials = r.u32("n_trials")? as usize;
    let n_channels = r.u32("n_channels")? as usize;
    let n_samples = r.u32("n_samples")? as usize;
    let n_classes = r.u32("n_classes")? as usize;
    let sample_rate_hz = r.f32("sample_rate_hz")?;
    if !(sample_rate_hz > 0.0) {
        return Err(Error::format(24, format!("sample rate {sample_rate_hz} is not positive")));
    }
    let per_trial = n_channels * n_samples;
    let mut labels = Vec::with_capacity(n_trials);
    let mut data = Vec::with_capacity(n_trials.saturating_mul(per_trial).min(buf.len() / 4));
    for i in 0..n_trials {
        let at = r.offset();
        let label = r.u8("label")?;
        if label as usize >= n_classes {
            return Err(Error::format(
                at,
                format!("trial {i} label {label} ≥ class count {n_classes}"),
            ));
        }
        labels.push(label);
        let payload = r.take(4 * per_trial, "trial payload")?;
        data.extend(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
    }
    if !r.is_at_end() {
        return Err(Error::format(r.offset(), "trailing bytes after last trial"));
    }
    Ok(TrialSet {
        data,
        labels,
        n_channels,
        n_samples,
        n_classes,
        sample_rate_hz,
    })
}

pub fn save_eegb(set: &TrialSet, path: &Path) -> Result<()> {
    io::write_atomic(path, &encode(set)?)
}

pub fn load_eegb(path: &Path) -> Result<TrialSet> {
    decode(&io::read(path)?)
}
