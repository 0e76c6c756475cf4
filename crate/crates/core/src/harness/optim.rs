//! Adaptive-moment optimizer with global-norm clipping, and the plateau
//! learning-rate schedule.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::params::{read_tensor_blob, write_tensor_blob};
use crate::network::{ParamSet, ParamShape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Configuration(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Factor by which gradients are scaled so their global norm is at most
/// `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor, Tensor)> {
        self.moments.get(name)
    }

    /// One update of every parameter in `params`. Returns the global
    /// gradient norm before clipping; a non-finite norm is a divergence and
    /// leaves the parameters untouched.
    pub fn step(&mut self, params: &ParamSet, grads: &GradStore, lr: f64, max_norm: f64) -> Result<f64> {
        let mut gs = Vec::with_capacity(params.len());
        let mut sq = 0.0;
        for (name, var) in params.iter() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            gs.push((name.clone(), var, g));
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm {norm}")));
        }
        let scale = clip_scale(norm, max_norm);
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var, g) in gs {
            let g = g.affine(scale, 0.0)?;
            let (m, v) = match self.moments.remove(&name) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = (m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?.detach();
            let v = (v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?.detach();
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
            self.moments.insert(name, (m, v));
        }
        Ok(norm)
    }

    /// Writes `m/<name>.f32` and `v/<name>.f32` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["m", "v"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (name, (m, v)) in &self.moments {
            write_tensor_blob(&dir.join("m").join(format!("{name}.f32")), m)?;
            write_tensor_blob(&dir.join("v").join(format!("{name}.f32")), v)?;
        }
        Ok(())
    }

    /// Restores moments for `shapes`. With `step == 0` no moments exist yet.
    pub fn load(
        dir: &Path,
        cfg: AdamConfig,
        step: u64,
        shapes: &[ParamShape],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut moments = BTreeMap::new();
        if step > 0 {
            for s in shapes {
                let file = format!("{}.f32", s.name);
                let m = read_tensor_blob(&dir.join("m").join(&file), &s.shape, dtype, device)?;
                let v = read_tensor_blob(&dir.join("v").join(&file), &s.shape, dtype, device)?;
                moments.insert(s.name.clone(), (m, v));
            }
        }
        Ok(Self { cfg, step, moments })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauPolicy {
    pub factor: f64,
    /// Validation rounds without improvement before the rate is reduced.
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement a round must achieve to count.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    1e-4
}

impl Default for PlateauPolicy {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-5,
            threshold: default_threshold(),
        }
    }
}

impl PlateauPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.factor > 0.0 && self.factor < 1.0 && self.patience > 0 && self.min_lr >= 0.0 && self.threshold >= 0.0;
        if !ok {
            return Err(Error::Configuration(format!("invalid plateau policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    pub bad_rounds: usize,
}

impl Plateau {
    /// Records one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, val: f64, lr: f64, policy: &PlateauPolicy) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => val < b - policy.threshold * b.abs(),
        };
        if improved {
            self.best = Some(val);
            self.bad_rounds = 0;
            return lr;
        }
        self.bad_rounds += 1;
        if self.bad_rounds >= policy.patience {
            self.bad_rounds = 0;
            return (lr * policy.factor).max(policy.min_lr);
        }
        lr
    }
}
