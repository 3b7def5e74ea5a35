//! Convolutional-transformer network mapping filter-bank windows
//! `[B, W, F, C, ω]` to FHN fields `v`, `w` shaped `[B, W, N, P]`.

use rand::Rng;

use crate::config::ConfigMap;
use crate::diff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, EncoderLayer, Linear};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PinnConfig {
    /// Filter-bank bands `F` of the input.
    pub bands: usize,
    /// EEG channels `C` of the input.
    pub channels: usize,
    /// Window length `ω` in samples.
    pub window_len: usize,
    /// Window count `W` per trial.
    pub windows: usize,
    pub f1: usize,
    pub f2: usize,
    pub k1: (usize, usize),
    pub k2: (usize, usize),
    pub p1: (usize, usize),
    pub p2: (usize, usize),
    pub pool: (usize, usize),
    pub pool_stride: (usize, usize),
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub num_nodes: usize,
    pub data_points: usize,
    /// The output head starts with its bias at this `(v, w)` point and its
    /// weights scaled by `head_init_scale`, so initial fields sit near a
    /// fixed point of the dynamics instead of being far off any solution.
    pub rest_state: (f64, f64),
    pub head_init_scale: f64,
}

impl PinnConfig {
    /// Default architecture for the given input; `num_nodes = C` and
    /// `data_points = ω / 5`.
    pub fn for_input(bands: usize, channels: usize, window_len: usize, windows: usize) -> Self {
        PinnConfig {
            bands,
            channels,
            window_len,
            windows,
            f1: 32,
            f2: 64,
            k1: (3, 3),
            k2: (3, 3),
            p1: (1, 1),
            p2: (1, 1),
            pool: (2, 2),
            pool_stride: (2, 2),
            hidden_dim: 128,
            layers: 2,
            heads: 4,
            dropout: 0.5,
            num_nodes: channels,
            data_points: (window_len / 5).max(2),
            rest_state: crate::fhn::FhnParams::default().equilibrium(),
            head_init_scale: 0.01,
        }
    }

    /// Spatial size `(C', ω')` after both conv/pool stages, or the name of the
    /// first stage that collapses.
    pub fn trace(&self) -> Result<(usize, usize)> {
        let counts = [
            ("bands", self.bands),
            ("channels", self.channels),
            ("window_len", self.window_len),
            ("windows", self.windows),
            ("f1", self.f1),
            ("f2", self.f2),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("num_nodes", self.num_nodes),
            ("data_points", self.data_points),
            ("pool", self.pool.0.min(self.pool.1)),
            ("pool_stride", self.pool_stride.0.min(self.pool_stride.1)),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("pinn config: {name} must be at least 1")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "pinn config: hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if !self.head_init_scale.is_finite() || !self.rest_state.0.is_finite() || !self.rest_state.1.is_finite() {
            return Err(Error::Config("pinn config: head init values must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("pinn config: dropout {} outside [0, 1)", self.dropout)));
        }
        let conv = |stage: &str, n: usize, k: usize, p: usize| {
            (n + 2 * p).checked_sub(k).map(|m| m + 1).filter(|&m| m > 0 && k > 0).ok_or_else(|| {
                Error::Config(format!("pinn {stage}: kernel {k} does not fit extent {n} with padding {p}"))
            })
        };
        let pool = |stage: &str, n: usize, k: usize, s: usize| {
            n.checked_sub(k).map(|m| m / s + 1).ok_or_else(|| {
                Error::Config(format!("pinn {stage}: pool {k} larger than extent {n}"))
            })
        };
        let h = conv("conv1", self.channels, self.k1.0, self.p1.0)?;
        let w = conv("conv1", self.window_len, self.k1.1, self.p1.1)?;
        let h = pool("pool1", h, self.pool.0, self.pool_stride.0)?;
        let w = pool("pool1", w, self.pool.1, self.pool_stride.1)?;
        let h = conv("conv2", h, self.k2.0, self.p2.0)?;
        let w = conv("conv2", w, self.k2.1, self.p2.1)?;
        let h = pool("pool2", h, self.pool.0, self.pool_stride.0)?;
        let w = pool("pool2", w, self.pool.1, self.pool_stride.1)?;
        Ok((h, w))
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let (h, w) = self.trace()?;
        Ok(self.f2 * h * w)
    }

    pub fn head_dim(&self) -> usize {
        2 * self.num_nodes * self.data_points
    }

    pub fn write(&self, prefix: &str, map: &mut ConfigMap) {
        let pair = |p: (usize, usize)| format!("{},{}", p.0, p.1);
        map.set(&format!("{prefix}.bands"), self.bands);
        map.set(&format!("{prefix}.channels"), self.channels);
        map.set(&format!("{prefix}.window_len"), self.window_len);
        map.set(&format!("{prefix}.windows"), self.windows);
        map.set(&format!("{prefix}.f1"), self.f1);
        map.set(&format!("{prefix}.f2"), self.f2);
        map.set(&format!("{prefix}.k1"), pair(self.k1));
        map.set(&format!("{prefix}.k2"), pair(self.k2));
        map.set(&format!("{prefix}.p1"), pair(self.p1));
        map.set(&format!("{prefix}.p2"), pair(self.p2));
        map.set(&format!("{prefix}.pool"), pair(self.pool));
        map.set(&format!("{prefix}.pool_stride"), pair(self.pool_stride));
        map.set(&format!("{prefix}.hidden_dim"), self.hidden_dim);
        map.set(&format!("{prefix}.layers"), self.layers);
        map.set(&format!("{prefix}.heads"), self.heads);
        map.set(&format!("{prefix}.dropout"), crate::config::exact(self.dropout));
        map.set(&format!("{prefix}.num_nodes"), self.num_nodes);
        map.set(&format!("{prefix}.data_points"), self.data_points);
        map.set(&format!("{prefix}.rest_v"), crate::config::exact(self.rest_state.0));
        map.set(&format!("{prefix}.rest_w"), crate::config::exact(self.rest_state.1));
        map.set(&format!("{prefix}.head_init_scale"), crate::config::exact(self.head_init_scale));
    }

    /// Overlay keys under `prefix` onto `self`.
    pub fn read(&mut self, prefix: &str, map: &ConfigMap) -> Result<()> {
        let k = |name: &str| format!("{prefix}.{name}");
        map.read_into(&k("bands"), &mut self.bands)?;
        map.read_into(&k("channels"), &mut self.channels)?;
        map.read_into(&k("window_len"), &mut self.window_len)?;
        map.read_into(&k("windows"), &mut self.windows)?;
        map.read_into(&k("f1"), &mut self.f1)?;
        map.read_into(&k("f2"), &mut self.f2)?;
        read_pair(map, &k("k1"), &mut self.k1)?;
        read_pair(map, &k("k2"), &mut self.k2)?;
        read_pair(map, &k("p1"), &mut self.p1)?;
        read_pair(map, &k("p2"), &mut self.p2)?;
        read_pair(map, &k("pool"), &mut self.pool)?;
        read_pair(map, &k("pool_stride"), &mut self.pool_stride)?;
        map.read_into(&k("hidden_dim"), &mut self.hidden_dim)?;
        map.read_into(&k("layers"), &mut self.layers)?;
        map.read_into(&k("heads"), &mut self.heads)?;
        map.read_into(&k("dropout"), &mut self.dropout)?;
        map.read_into(&k("num_nodes"), &mut self.num_nodes)?;
        map.read_into(&k("data_points"), &mut self.data_points)?;
        map.read_into(&k("rest_v"), &mut self.rest_state.0)?;
        map.read_into(&k("rest_w"), &mut self.rest_state.1)?;
        map.read_into(&k("head_init_scale"), &mut self.head_init_scale)?;
        Ok(())
    }
}

/// `"a,b"` or a single `"a"` meaning `(a, a)`.
pub(crate) fn read_pair(map: &ConfigMap, key: &str, slot: &mut (usize, usize)) -> Result<()> {
    if let Some(text) = map.get_str(key) {
        let bad = || Error::Config(format!("{key} = {text:?}: expected `n` or `n,m`"));
        let parts: Vec<usize> = text
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        *slot = match parts[..] {
            [a] => (a, a),
            [a, b] => (a, b),
            _ => return Err(bad()),
        };
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PinnModel {
    pub config: PinnConfig,
    pub prefix: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub fc: Linear,
    pub position: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub head: Linear,
}

impl PinnModel {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        config: &PinnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let flat = config.flat_dim()?;
        let c = config;
        let name = |s: &str| format!("{prefix}.{s}");
        let conv1 = Conv2d::new(params, &name("conv1"), c.bands, c.f1, c.k1, c.p1, rng);
        let bn1 = BatchNorm::new(params, &name("bn1"), c.f1);
        let conv2 = Conv2d::new(params, &name("conv2"), c.f1, c.f2, c.k2, c.p2, rng);
        let bn2 = BatchNorm::new(params, &name("bn2"), c.f2);
        let fc = Linear::new(params, &name("fc"), flat, c.hidden_dim, rng);
        let position = params.add(
            name("position"),
            Tensor::randn(&[c.windows, c.hidden_dim], 0.02, rng),
            true,
        );
        let encoder = (0..c.layers)
            .map(|i| {
                EncoderLayer::new(params, &name(&format!("encoder{i}")), c.hidden_dim, c.heads, c.dropout, rng)
            })
            .collect::<Result<_>>()?;
        let head = Linear::new(params, &name("head"), c.hidden_dim, c.head_dim(), rng);
        params[head.weight]
            .value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x *= c.head_init_scale);
        let half = c.num_nodes * c.data_points;
        for (i, b) in params[head.bias].value.data_mut().iter_mut().enumerate() {
            *b = if i < half { c.rest_state.0 } else { c.rest_state.1 };
        }
        Ok(PinnModel {
            config: config.clone(),
            prefix: prefix.to_string(),
            conv1,
            bn1,
            conv2,
            bn2,
            fc,
            position,
            encoder,
            head,
        })
    }

    /// Name prefixes of everything except the output head.
    pub fn trunk_prefixes(&self) -> Vec<String> {
        let mut out: Vec<String> = ["conv1", "bn1", "conv2", "bn2", "fc", "position"]
            .iter()
            .map(|s| format!("{}.{s}", self.prefix))
            .collect();
        out.extend((0..self.encoder.len()).map(|i| format!("{}.encoder{i}.", self.prefix)));
        out
    }

    pub fn set_trunk_trainable(&self, params: &mut ParamSet, trainable: bool) {
        for p in self.trunk_prefixes() {
            params.set_trainable_prefix(&p, trainable);
        }
    }

    /// `x[B, W, F, C, ω]` → `(v, w)`, each `[B, W, N, P]`.
    pub fn forward(&self, tape: &mut Tape, params: &mut ParamSet, x: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != c.windows || xs[2] != c.bands || xs[3] != c.channels || xs[4] != c.window_len {
            return Err(Error::Config(format!(
                "pinn input: expected [B, {}, {}, {}, {}], got {xs:?}",
                c.windows, c.bands, c.channels, c.window_len
            )));
        }
        let (b, w) = (xs[0], xs[1]);
        let h = tape.reshape(x, &[b * w, c.bands, c.channels, c.window_len])?;
        let h = self.conv1.forward(tape, params, h)?;
        let h = self.bn1.forward(tape, params, h)?;
        let h = tape.relu(h);
        let h = tape.maxpool2d(h, c.pool, c.pool_stride)?;
        let h = self.conv2.forward(tape, params, h)?;
        let h = self.bn2.forward(tape, params, h)?;
        let h = tape.relu(h);
        let h = tape.maxpool2d(h, c.pool, c.pool_stride)?;
        let h = tape.reshape(h, &[b * w, c.flat_dim()?])?;
        let h = self.fc.forward(tape, params, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, c.dropout)?;
        let h = tape.reshape(h, &[b, w, c.hidden_dim])?;
        let pos = tape.param(params, self.position);
        let mut h = tape.add_broadcast(h, pos)?;
        for layer in &self.encoder {
            h = layer.forward(tape, params, h)?;
        }
        let o = self.head.forward(tape, params, h)?;
        let o = tape.reshape(o, &[b, w, 2 * c.num_nodes, c.data_points])?;
        let v = tape.narrow(o, 2, 0, c.num_nodes)?;
        let wv = tape.narrow(o, 2, c.num_nodes, c.num_nodes)?;
        Ok((v, wv))
    }

    /// Trainable scalar count of this model (buffers excluded).
    pub fn count_parameters(&self, params: &ParamSet) -> usize {
        count_parameters(params, &format!("{}.", self.prefix))
    }
}

/// Scalar count of non-buffer parameters whose name starts with `prefix`.
pub fn count_parameters(params: &ParamSet, prefix: &str) -> usize {
    params
        .iter()
        .filter(|p| p.name.starts_with(prefix) && !crate::diff::is_buffer_name(&p.name))
        .map(|p| p.value.len())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> PinnConfig {
        PinnConfig {
            f1: 2,
            f2: 3,
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            data_points: 4,
            ..PinnConfig::for_input(2, 4, 16, 2)
        }
    }

    #[test]
    fn trace_names_failing_stage() {
        let mut c = tiny();
        c.k1 = (9, 3);
        c.p1 = (0, 1);
        let e = c.trace().unwrap_err().to_string();
        assert!(e.contains("conv1"), "{e}");
        let mut c = tiny();
        c.channels = 1;
        c.p1 = (1, 1);
        let e = c.trace().unwrap_err().to_string();
        assert!(e.contains("pool1"), "{e}");
        let mut c = tiny();
        c.heads = 3;
        assert!(c.trace().is_err());
    }

    #[test]
    fn forward_shapes() {
        let c = tiny();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = PinnModel::new(&mut params, "pinn", &c, &mut rng).unwrap();
        let mut tape = Tape::new(Mode::Train, 0);
        let x = tape.constant(Tensor::randn(&[3, 2, 2, 4, 16], 1.0, &mut rng));
        let (v, w) = m.forward(&mut tape, &mut params, x).unwrap();
        assert_eq!(tape.shape(v), &[3, 2, 4, 4]);
        assert_eq!(tape.shape(w), &[3, 2, 4, 4]);
        // fresh head emits the rest state up to the scaled weights
        let (rv, rw) = c.rest_state;
        assert!(tape.value(v).data().iter().all(|x| (x - rv).abs() < 0.1));
        assert!(tape.value(w).data().iter().all(|x| (x - rw).abs() < 0.1));
        let bad = tape.constant(Tensor::zeros(&[3, 2, 2, 5, 16]));
        assert!(matches!(m.forward(&mut tape, &mut params, bad), Err(Error::Config(_))));
    }

    #[test]
    fn config_map_round_trip() {
        let mut c = tiny();
        c.k2 = (5, 1);
        let mut map = ConfigMap::new();
        c.write("pinn", &mut map);
        let mut back = PinnConfig::for_input(1, 1, 1, 1);
        back.read("pinn", &ConfigMap::parse(&map.render()).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
