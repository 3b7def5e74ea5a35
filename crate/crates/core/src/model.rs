//! The full network: PINN trunk and head, feature branches, classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigMap;
use crate::diff::{Mode, ParamSet, Tape, Var};
use crate::error::Result;
use crate::featx::{FeatxConfig, FeatxModel};
use crate::fhn::StatePair;
use crate::pinn::{read_pair, PinnConfig, PinnModel};
use crate::tensor::Tensor;

/// Fully resolved architecture, including the input geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub pinn: PinnConfig,
    pub featx: FeatxConfig,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.pinn.trace()?;
        self.featx.trace()?;
        if self.featx.num_nodes != self.pinn.num_nodes
            || self.featx.time_len != self.pinn.windows * self.pinn.data_points
        {
            return Err(crate::Error::Config(format!(
                "featx expects {} nodes × {} samples but the pinn emits {} × {}",
                self.featx.num_nodes,
                self.featx.time_len,
                self.pinn.num_nodes,
                self.pinn.windows * self.pinn.data_points
            )));
        }
        Ok(())
    }

    pub fn write(&self, map: &mut ConfigMap) {
        self.pinn.write("net.pinn", map);
        self.featx.write("net.featx", map);
    }

    pub fn read(map: &ConfigMap) -> Result<Self> {
        let mut pinn = PinnConfig::for_input(1, 1, 1, 1);
        pinn.read("net.pinn", map)?;
        let mut featx = FeatxConfig::for_input(1, 1, 2);
        featx.read("net.featx", map)?;
        let cfg = NetConfig { pinn, featx };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Architecture knobs independent of the data; `None` means "derive from
/// the input" (`num_nodes = C`, `data_points = ω / 5`).
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub pinn_f1: usize,
    pub pinn_f2: usize,
    pub pinn_k1: (usize, usize),
    pub pinn_k2: (usize, usize),
    pub pinn_p1: (usize, usize),
    pub pinn_p2: (usize, usize),
    pub pinn_pool: (usize, usize),
    pub pinn_pool_stride: (usize, usize),
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub num_nodes: Option<usize>,
    pub data_points: Option<usize>,
    pub featx_f1: usize,
    pub featx_f2: usize,
    pub featx_kernel: usize,
    pub featx_padding: usize,
    pub featx_pool: usize,
    pub featx_pool_stride: usize,
    pub latent_dim: usize,
    pub head_init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let p = PinnConfig::for_input(1, 1, 1, 1);
        let f = FeatxConfig::for_input(1, 1, 2);
        ArchConfig {
            pinn_f1: p.f1,
            pinn_f2: p.f2,
            pinn_k1: p.k1,
            pinn_k2: p.k2,
            pinn_p1: p.p1,
            pinn_p2: p.p2,
            pinn_pool: p.pool,
            pinn_pool_stride: p.pool_stride,
            hidden_dim: p.hidden_dim,
            layers: p.layers,
            heads: p.heads,
            dropout: p.dropout,
            num_nodes: None,
            data_points: None,
            featx_f1: f.f1,
            featx_f2: f.f2,
            featx_kernel: f.kernel,
            featx_padding: f.padding,
            featx_pool: f.pool,
            featx_pool_stride: f.pool_stride,
            latent_dim: f.latent_dim,
            head_init_scale: p.head_init_scale,
        }
    }
}

impl ArchConfig {
    pub fn resolve(
        &self,
        bands: usize,
        channels: usize,
        window_len: usize,
        windows: usize,
        classes: usize,
    ) -> Result<NetConfig> {
        let base = PinnConfig::for_input(bands, channels, window_len, windows);
        let pinn = PinnConfig {
            f1: self.pinn_f1,
            f2: self.pinn_f2,
            k1: self.pinn_k1,
            k2: self.pinn_k2,
            p1: self.pinn_p1,
            p2: self.pinn_p2,
            pool: self.pinn_pool,
            pool_stride: self.pinn_pool_stride,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            num_nodes: self.num_nodes.unwrap_or(base.num_nodes),
            data_points: self.data_points.unwrap_or(base.data_points),
            head_init_scale: self.head_init_scale,
            ..base
        };
        let featx = FeatxConfig {
            f1: self.featx_f1,
            f2: self.featx_f2,
            kernel: self.featx_kernel,
            padding: self.featx_padding,
            pool: self.featx_pool,
            pool_stride: self.featx_pool_stride,
            latent_dim: self.latent_dim,
            ..FeatxConfig::for_input(pinn.num_nodes, windows * pinn.data_points, classes)
        };
        let cfg = NetConfig { pinn, featx };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, map: &mut ConfigMap) {
        let pair = |p: (usize, usize)| format!("{},{}", p.0, p.1);
        let opt = |o: Option<usize>| o.map_or("auto".to_string(), |v| v.to_string());
        map.set("model.pinn_f1", self.pinn_f1);
        map.set("model.pinn_f2", self.pinn_f2);
        map.set("model.pinn_k1", pair(self.pinn_k1));
        map.set("model.pinn_k2", pair(self.pinn_k2));
        map.set("model.pinn_p1", pair(self.pinn_p1));
        map.set("model.pinn_p2", pair(self.pinn_p2));
        map.set("model.pinn_pool", pair(self.pinn_pool));
        map.set("model.pinn_pool_stride", pair(self.pinn_pool_stride));
        map.set("model.hidden_dim", self.hidden_dim);
        map.set("model.layers", self.layers);
        map.set("model.heads", self.heads);
        map.set("model.dropout", crate::config::exact(self.dropout));
        map.set("model.num_nodes", opt(self.num_nodes));
        map.set("model.data_points", opt(self.data_points));
        map.set("model.featx_f1", self.featx_f1);
        map.set("model.featx_f2", self.featx_f2);
        map.set("model.featx_kernel", self.featx_kernel);
        map.set("model.featx_padding", self.featx_padding);
        map.set("model.featx_pool", self.featx_pool);
        map.set("model.featx_pool_stride", self.featx_pool_stride);
        map.set("model.latent_dim", self.latent_dim);
        map.set("model.head_init_scale", crate::config::exact(self.head_init_scale));
    }

    pub fn read(&mut self, map: &ConfigMap) -> Result<()> {
        read_pair(map, "model.pinn_k1", &mut self.pinn_k1)?;
        read_pair(map, "model.pinn_k2", &mut self.pinn_k2)?;
        read_pair(map, "model.pinn_p1", &mut self.pinn_p1)?;
        read_pair(map, "model.pinn_p2", &mut self.pinn_p2)?;
        read_pair(map, "model.pinn_pool", &mut self.pinn_pool)?;
        read_pair(map, "model.pinn_pool_stride", &mut self.pinn_pool_stride)?;
        map.read_into("model.pinn_f1", &mut self.pinn_f1)?;
        map.read_into("model.pinn_f2", &mut self.pinn_f2)?;
        map.read_into("model.hidden_dim", &mut self.hidden_dim)?;
        map.read_into("model.layers", &mut self.layers)?;
        map.read_into("model.heads", &mut self.heads)?;
        map.read_into("model.dropout", &mut self.dropout)?;
        for (key, slot) in [
            ("model.num_nodes", &mut self.num_nodes),
            ("model.data_points", &mut self.data_points),
        ] {
            match map.get_str(key) {
                None => {}
                Some("auto") => *slot = None,
                Some(_) => *slot = map.get(key)?,
            }
        }
        map.read_into("model.featx_f1", &mut self.featx_f1)?;
        map.read_into("model.featx_f2", &mut self.featx_f2)?;
        map.read_into("model.featx_kernel", &mut self.featx_kernel)?;
        map.read_into("model.featx_padding", &mut self.featx_padding)?;
        map.read_into("model.featx_pool", &mut self.featx_pool)?;
        map.read_into("model.featx_pool_stride", &mut self.featx_pool_stride)?;
        map.read_into("model.latent_dim", &mut self.latent_dim)?;
        map.read_into("model.head_init_scale", &mut self.head_init_scale)?;
        Ok(())
    }
}

/// Tape outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    pub v: Var,
    pub w: Var,
    pub features: Var,
    pub logits: Var,
}

/// Layer handles for the whole network; values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetConfig,
    pub pinn: PinnModel,
    pub featx: FeatxModel,
}

impl Model {
    /// Build the network with weights drawn from `seed`.
    pub fn build(config: &NetConfig, seed: u64) -> Result<(Model, ParamSet)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let pinn = PinnModel::new(&mut params, "pinn", &config.pinn, &mut rng)?;
        let featx = FeatxModel::new(&mut params, "featx", &config.featx, &mut rng)?;
        Ok((
            Model {
                config: config.clone(),
                pinn,
                featx,
            },
            params,
        ))
    }

    /// `x[B, W, F, C, ω]` → fields, trial features and logits.
    pub fn forward(&self, tape: &mut Tape, params: &mut ParamSet, x: Var) -> Result<NetOutput> {
        let (v, w) = self.pinn.forward(tape, params, x)?;
        let features = self.featx.extract(tape, params, v, w)?;
        let logits = self.featx.classify(tape, params, features)?;
        Ok(NetOutput { v, w, features, logits })
    }

    /// Eval-mode logits and fields for a concrete batch.
    pub fn predict(&self, params: &mut ParamSet, x: &Tensor, dt: f64) -> Result<(Tensor, StatePair)> {
        let mut tape = Tape::new(Mode::Eval, 0);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, params, xv)?;
        Ok((
            tape.value(out.logits).clone(),
            StatePair {
                v: tape.value(out.v).clone(),
                w: tape.value(out.w).clone(),
                dt,
            },
        ))
    }

    /// Freeze or unfreeze the PINN trunk (everything but its output head).
    pub fn set_trunk_trainable(&self, params: &mut ParamSet, trainable: bool) {
        self.pinn.set_trunk_trainable(params, trainable);
    }

    pub fn count_parameters(&self, params: &ParamSet) -> usize {
        crate::pinn::count_parameters(params, "")
    }
}
