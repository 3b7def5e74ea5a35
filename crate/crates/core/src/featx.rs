//! Feature branches over the predicted `(v, w)` fields and the classifier.
//!
//! Each branch sees every node as an independent single-channel series of
//! length `W · P` (windows concatenated in order), so branch weights are
//! shared across nodes. The two branch outputs are summed, layer-normalised
//! and averaged over nodes.

use rand::Rng;

use crate::config::ConfigMap;
use crate::diff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv1d, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatxConfig {
    pub num_nodes: usize,
    /// Series length `W · P` seen by each branch.
    pub time_len: usize,
    pub f1: usize,
    pub f2: usize,
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
    pub pool_stride: usize,
    pub latent_dim: usize,
    pub classes: usize,
}

impl FeatxConfig {
    pub fn for_input(num_nodes: usize, time_len: usize, classes: usize) -> Self {
        FeatxConfig {
            num_nodes,
            time_len,
            f1: 16,
            f2: 32,
            kernel: 5,
            padding: 2,
            pool: 2,
            pool_stride: 2,
            latent_dim: 64,
            classes,
        }
    }

    /// Series length after both conv/pool stages.
    pub fn trace(&self) -> Result<usize> {
        let counts = [
            ("num_nodes", self.num_nodes),
            ("time_len", self.time_len),
            ("f1", self.f1),
            ("f2", self.f2),
            ("kernel", self.kernel),
            ("pool", self.pool),
            ("pool_stride", self.pool_stride),
            ("latent_dim", self.latent_dim),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("featx config: {name} must be at least 1")));
        }
        let mut n = self.time_len;
        for stage in 1..=2 {
            n = (n + 2 * self.padding).checked_sub(self.kernel).map(|m| m + 1).ok_or_else(|| {
                Error::Config(format!(
                    "featx conv{stage}: kernel {} longer than series {n} with padding {}",
                    self.kernel, self.padding
                ))
            })?;
            n = n.checked_sub(self.pool).map(|m| m / self.pool_stride + 1).ok_or_else(|| {
                Error::Config(format!("featx pool{stage}: series of {n} shorter than pool {}", self.pool))
            })?;
        }
        Ok(n)
    }

    pub fn write(&self, prefix: &str, map: &mut ConfigMap) {
        map.set(&format!("{prefix}.num_nodes"), self.num_nodes);
        map.set(&format!("{prefix}.time_len"), self.time_len);
        map.set(&format!("{prefix}.f1"), self.f1);
        map.set(&format!("{prefix}.f2"), self.f2);
        map.set(&format!("{prefix}.kernel"), self.kernel);
        map.set(&format!("{prefix}.padding"), self.padding);
        map.set(&format!("{prefix}.pool"), self.pool);
        map.set(&format!("{prefix}.pool_stride"), self.pool_stride);
        map.set(&format!("{prefix}.latent_dim"), self.latent_dim);
        map.set(&format!("{prefix}.classes"), self.classes);
    }

    pub fn read(&mut self, prefix: &str, map: &ConfigMap) -> Result<()> {
        let k = |name: &str| format!("{prefix}.{name}");
        map.read_into(&k("num_nodes"), &mut self.num_nodes)?;
        map.read_into(&k("time_len"), &mut self.time_len)?;
        map.read_into(&k("f1"), &mut self.f1)?;
        map.read_into(&k("f2"), &mut self.f2)?;
        map.read_into(&k("kernel"), &mut self.kernel)?;
        map.read_into(&k("padding"), &mut self.padding)?;
        map.read_into(&k("pool"), &mut self.pool)?;
        map.read_into(&k("pool_stride"), &mut self.pool_stride)?;
        map.read_into(&k("latent_dim"), &mut self.latent_dim)?;
        map.read_into(&k("classes"), &mut self.classes)?;
        Ok(())
    }
}

/// conv1d → bn → relu → pool, twice, then flatten → linear → relu.
#[derive(Clone, Debug)]
pub struct Branch {
    pub conv1: Conv1d,
    pub bn1: BatchNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    pub fc: Linear,
}

impl Branch {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, c: &FeatxConfig, rng: &mut R) -> Result<Self> {
        let len = c.trace()?;
        Ok(Branch {
            conv1: Conv1d::new(params, &format!("{name}.conv1"), 1, c.f1, c.kernel, c.padding, rng),
            bn1: BatchNorm::new(params, &format!("{name}.bn1"), c.f1),
            conv2: Conv1d::new(params, &format!("{name}.conv2"), c.f1, c.f2, c.kernel, c.padding, rng),
            bn2: BatchNorm::new(params, &format!("{name}.bn2"), c.f2),
            fc: Linear::new(params, &format!("{name}.fc"), c.f2 * len, c.latent_dim, rng),
        })
    }

    /// `x[M, 1, T]` → `[M, N_f]`.
    pub fn forward(&self, tape: &mut Tape, params: &mut ParamSet, c: &FeatxConfig, x: Var) -> Result<Var> {
        let m = tape.shape(x)[0];
        let h = self.conv1.forward(tape, params, x)?;
        let h = self.bn1.forward(tape, params, h)?;
        let h = tape.relu(h);
        let h = tape.maxpool1d(h, c.pool, c.pool_stride)?;
        let h = self.conv2.forward(tape, params, h)?;
        let h = self.bn2.forward(tape, params, h)?;
        let h = tape.relu(h);
        let h = tape.maxpool1d(h, c.pool, c.pool_stride)?;
        let flat = tape.value(h).len() / m;
        let h = tape.reshape(h, &[m, flat])?;
        let h = self.fc.forward(tape, params, h)?;
        Ok(tape.relu(h))
    }
}

#[derive(Clone, Debug)]
pub struct FeatxModel {
    pub config: FeatxConfig,
    pub prefix: String,
    pub v_branch: Branch,
    pub w_branch: Branch,
    pub fuse: LayerNorm,
    pub classifier: Linear,
}

impl FeatxModel {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        config: &FeatxConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeatxModel {
            config: config.clone(),
            prefix: prefix.to_string(),
            v_branch: Branch::new(params, &format!("{prefix}.v"), config, rng)?,
            w_branch: Branch::new(params, &format!("{prefix}.w"), config, rng)?,
            fuse: LayerNorm::new(params, &format!("{prefix}.fuse"), config.latent_dim),
            classifier: Linear::new(params, &format!("{prefix}.classifier"), config.latent_dim, config.classes, rng),
        })
    }

    /// `[B, W, N, P]` → `[B·N, 1, W·P]`.
    pub fn fold_nodes(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[2] != self.config.num_nodes || s[1] * s[3] != self.config.time_len {
            return Err(Error::Config(format!(
                "featx input: expected [B, W, {}, P] with W·P = {}, got {s:?}",
                self.config.num_nodes, self.config.time_len
            )));
        }
        let p = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(p, &[s[0] * s[2], 1, s[1] * s[3]])
    }

    /// Trial features `[B, N_f]` from fields `v`, `w` shaped `[B, W, N, P]`.
    pub fn extract(&self, tape: &mut Tape, params: &mut ParamSet, v: Var, w: Var) -> Result<Var> {
        if tape.shape(v) != tape.shape(w) {
            return Err(Error::Dimension(format!(
                "v {:?} and w {:?} differ",
                tape.shape(v),
                tape.shape(w)
            )));
        }
        let b = tape.shape(v)[0];
        let c = &self.config;
        let fv = self.fold_nodes(tape, v)?;
        let fw = self.fold_nodes(tape, w)?;
        let hv = self.v_branch.forward(tape, params, c, fv)?;
        let hw = self.w_branch.forward(tape, params, c, fw)?;
        let fused = tape.add(hv, hw)?;
        let fused = self.fuse.forward(tape, params, fused)?;
        let fused = tape.reshape(fused, &[b, c.num_nodes, c.latent_dim])?;
        tape.mean_axis(fused, 1)
    }

    /// Logits `[B, K]`.
    pub fn classify(&self, tape: &mut Tape, params: &ParamSet, features: Var) -> Result<Var> {
        self.classifier.forward(tape, params, features)
    }
}

/// [`FeatxModel::extract`] as a free function.
pub fn extract_features(
    tape: &mut Tape,
    params: &mut ParamSet,
    model: &FeatxModel,
    v: Var,
    w: Var,
) -> Result<Var> {
    model.extract(tape, params, v, w)
}
