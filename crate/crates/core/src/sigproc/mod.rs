//! Trial containers, temporal windowing, and band decomposition.

mod cheby2;
pub mod eegb;

pub use cheby2::{design_cheby2_bandpass, Biquad, BiquadCascade};
pub use eegb::{load_eegb, save_eegb};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Labelled multichannel trials sharing one channel count and length.
///
/// Samples are stored as `f32` (the on-disk precision), trial-major then
/// channel-major: `data[(trial * channels + ch) * samples + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    pub sample_rate_hz: f32,
}

impl TrialSet {
    pub fn new(
        data: Vec<f32>,
        labels: Vec<u8>,
        n_channels: usize,
        n_samples: usize,
        n_classes: usize,
        sample_rate_hz: f32,
    ) -> Result<Self> {
        let set = TrialSet {
            data,
            labels,
            n_channels,
            n_samples,
            n_classes,
            sample_rate_hz,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.labels.len() * self.n_channels * self.n_samples {
            return Err(Error::Data(format!(
                "{} samples for {} trials of {}×{}",
                self.data.len(),
                self.labels.len(),
                self.n_channels,
                self.n_samples
            )));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Data(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if let Some((i, l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.n_classes)
        {
            return Err(Error::Data(format!(
                "trial {i} has label {l} but only {} classes are declared",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn trial(&self, i: usize) -> &[f32] {
        let n = self.n_channels * self.n_samples;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> TrialSet {
        let mut data = Vec::with_capacity(idx.len() * self.n_channels * self.n_samples);
        for &i in idx {
            data.extend_from_slice(self.trial(i));
        }
        TrialSet {
            data,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }

    /// `[B, C, T]` in `f64`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(&[self.len(), self.n_channels, self.n_samples], data)
            .expect("validated trial set")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub len: usize,
    pub stride: usize,
}

impl WindowSpec {
    /// One-second windows with half-second stride.
    pub fn for_rate(sample_rate: f64) -> Self {
        let len = sample_rate.round().max(1.0) as usize;
        WindowSpec {
            len,
            stride: (len / 2).max(1),
        }
    }

    pub fn count(&self, n_samples: usize) -> Result<usize> {
        if self.len == 0 || self.stride == 0 || self.stride > self.len {
            return Err(Error::Config(format!(
                "window length {} and stride {} must satisfy 0 < stride ≤ length",
                self.len, self.stride
            )));
        }
        if self.len > n_samples {
            return Err(Error::Config(format!(
                "window length {} exceeds trial length {n_samples}",
                self.len
            )));
        }
        Ok((n_samples - self.len) / self.stride + 1)
    }
}

/// Cut `x[B, C, T]` into `[B, W, C, ω]`; window `w` covers samples
/// `[w·stride, w·stride + ω)`, and a trailing remainder is dropped.
pub fn segment_temporal(x: &Tensor, spec: WindowSpec) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::Dimension(format!("segmentation expects [B, C, T], got {xs:?}")));
    }
    let (b, c, t) = (xs[0], xs[1], xs[2]);
    let w = spec.count(t)?;
    let om = spec.len;
    let mut out = Vec::with_capacity(b * w * c * om);
    for bi in 0..b {
        for wi in 0..w {
            for ci in 0..c {
                let start = (bi * c + ci) * t + wi * spec.stride;
                out.extend_from_slice(&x.data()[start..start + om]);
            }
        }
    }
    Tensor::new(&[b, w, c, om], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBankSpec {
    pub bands: Vec<(f64, f64)>,
    pub order: usize,
    pub stopband_atten_db: f64,
    pub transition_hz: f64,
}

impl Default for FilterBankSpec {
    /// Nine 4 Hz bands covering 4–40 Hz.
    fn default() -> Self {
        FilterBankSpec {
            bands: (0..9).map(|i| (4.0 + 4.0 * i as f64, 8.0 + 4.0 * i as f64)).collect(),
            order: 4,
            stopband_atten_db: 30.0,
            transition_hz: 2.0,
        }
    }
}

/// Designed filters for one [`FilterBankSpec`] at one sample rate.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub filters: Vec<BiquadCascade>,
}

impl FilterBank {
    pub fn design(spec: &FilterBankSpec, sample_rate: f64) -> Result<Self> {
        if spec.bands.is_empty() {
            return Err(Error::Config("filter bank needs at least one band".into()));
        }
        let filters = spec
            .bands
            .iter()
            .map(|&band| {
                design_cheby2_bandpass(
                    band,
                    spec.order,
                    spec.stopband_atten_db,
                    spec.transition_hz,
                    sample_rate,
                )
            })
            .collect::<Result<_>>()?;
        Ok(FilterBank { filters })
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// `x[B, W, C, ω]` → `[B, W, F, C, ω]`, each window filtered from zero
    /// state.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!(
                "filter bank expects [B, W, C, ω], got {xs:?}"
            )));
        }
        let (b, w, c, om) = (xs[0], xs[1], xs[2], xs[3]);
        let f = self.filters.len();
        let block = f * c * om;
        let mut out = vec![0.0; b * w * block];
        let work = out.len() * 5 * self.filters.first().map_or(1, |fl| fl.sections.len());
        par::chunks_mut(&mut out, block, work, |bw, dst| {
            let src = &x.data()[bw * c * om..(bw + 1) * c * om];
            for (fi, filt) in self.filters.iter().enumerate() {
                for ci in 0..c {
                    let o = (fi * c + ci) * om;
                    filt.filter_into(&src[ci * om..(ci + 1) * om], &mut dst[o..o + om]);
                }
            }
        });
        Tensor::new(&[b, w, f, c, om], out)
    }
}

pub fn apply_filter_bank(x: &Tensor, spec: &FilterBankSpec, sample_rate: f64) -> Result<Tensor> {
    FilterBank::design(spec, sample_rate)?.apply(x)
}

/// Segmentation followed by band decomposition.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    pub window: WindowSpec,
    pub bank: FilterBank,
}

impl Preprocessor {
    pub fn new(window: WindowSpec, spec: &FilterBankSpec, sample_rate: f64) -> Result<Self> {
        Ok(Preprocessor {
            window,
            bank: FilterBank::design(spec, sample_rate)?,
        })
    }

    /// `TrialSet` → `[B, W, F, C, ω]`.
    pub fn run(&self, set: &TrialSet) -> Result<Tensor> {
        let windows = segment_temporal(&set.to_tensor(), self.window)?;
        self.bank.apply(&windows)
    }
}
