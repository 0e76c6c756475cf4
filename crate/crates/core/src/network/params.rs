//! Named trainable parameters, deterministic initialization and raw blob
//! persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Parameters keyed by stable dotted path, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

/// Stable per-parameter seed (FNV-1a of the name, mixed with the run seed).
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    /// Normal(0, std) weights drawn from a name-seeded generator.
    pub fn init_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
        let dist = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let t = Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?;
        self.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn init_constant(&mut self, name: &str, shape: &[usize], value: f64, dtype: DType, device: &Device) -> Result<()> {
        let t = (Tensor::ones(shape, dtype, device)? * value)?;
        self.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.var(name)?.as_tensor())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn shapes(&self) -> Vec<ParamShape> {
        self.vars
            .iter()
            .map(|(name, v)| ParamShape {
                name: name.clone(),
                shape: v.dims().to_vec(),
            })
            .collect()
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            vars: self
                .vars
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Writes one `<name>.f32` blob per parameter into `dir`.
    pub fn save_blobs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, var) in &self.vars {
            write_tensor_blob(&dir.join(format!("{name}.f32")), var.as_tensor())?;
        }
        Ok(())
    }

    /// Loads blobs named by `shapes` from `dir`.
    pub fn load_blobs(dir: &Path, shapes: &[ParamShape], dtype: DType, device: &Device) -> Result<Self> {
        let mut set = ParamSet::new();
        for p in shapes {
            let t = read_tensor_blob(&dir.join(format!("{}.f32", p.name)), &p.shape, dtype, device)?;
            set.insert(p.name.clone(), Var::from_tensor(&t)?);
        }
        Ok(set)
    }

    /// Replaces every value by the one from `other` (same names and shapes).
    pub fn assign_from(&self, other: &ParamSet) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other.get(name)?;
            if src.dims() != var.dims() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{name}: {:?} vs {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

pub fn write_tensor_blob(path: &Path, t: &Tensor) -> Result<()> {
    let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_blob(path: &Path, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("missing blob {}", path.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} holds {} bytes, expected {} for shape {shape:?}",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!("{} contains non-finite values", path.display())));
    }
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_seeded() {
        let dev = Device::Cpu;
        let mut a = ParamSet::new();
        a.init_normal("enc.w", &[4, 3], 1.0, 7, DType::F32, &dev).unwrap();
        a.init_normal("dec.w", &[4, 3], 1.0, 7, DType::F32, &dev).unwrap();
        let mut b = ParamSet::new();
        b.init_normal("dec.w", &[4, 3], 1.0, 7, DType::F32, &dev).unwrap();
        let v = |s: &ParamSet, n: &str| s.get(n).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&a, "dec.w"), v(&b, "dec.w"));
        assert_ne!(v(&a, "dec.w"), v(&a, "enc.w"));
        assert_eq!(a.num_elements(), 24);
    }

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dev = Device::Cpu;
        let mut a = ParamSet::new();
        a.init_normal("x.w", &[2, 3, 3], 0.5, 1, DType::F32, &dev).unwrap();
        a.save_blobs(dir.path()).unwrap();
        let b = ParamSet::load_blobs(dir.path(), &a.shapes(), DType::F32, &dev).unwrap();
        let v = |s: &ParamSet| s.get("x.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&a), v(&b));
        let wrong = vec![ParamShape {
            name: "x.w".into(),
            shape: vec![3, 3],
        }];
        assert!(matches!(
            ParamSet::load_blobs(dir.path(), &wrong, DType::F32, &dev),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }
}
