//! Named parameter storage with an explicit frozen/trainable split.
//!
//! Frozen entries are plain tensors and never enter the autograd graph as
//! leaves, so their gradients are absent after any backward pass. Trainable
//! entries are `Var`s handed to the optimizer.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Result, SamoraError};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone)]
enum Param {
    Frozen(Tensor),
    Trainable(Var),
}

impl Param {
    fn tensor(&self) -> Tensor {
        match self {
            Param::Frozen(t) => t.clone(),
            Param::Trainable(v) => v.as_tensor().clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Insert (or replace) a frozen tensor, converting it to the store dtype.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let t = tensor.to_dtype(self.dtype)?.to_device(&self.device)?.detach();
        self.entries.insert(name.into(), Param::Frozen(t));
        Ok(())
    }

    pub fn insert_values(&mut self, name: impl Into<String>, values: &[f64], shape: &[usize]) -> Result<()> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(SamoraError::dim(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        let t = Tensor::from_vec(values.to_vec(), shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.entries
            .get(name)
            .map(Param::tensor)
            .ok_or_else(|| SamoraError::config(format!("missing parameter `{name}`")))
    }

    pub fn get_opt(&self, name: &str) -> Option<Tensor> {
        self.entries.get(name).map(Param::tensor)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        matches!(self.entries.get(name), Some(Param::Trainable(_)))
    }

    /// Make exactly the entries selected by `pred` trainable; all others
    /// become frozen.
    pub fn set_trainable<F: Fn(&str) -> bool>(&mut self, pred: F) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let want = pred(name);
            match (&*p, want) {
                (Param::Frozen(t), true) => *p = Param::Trainable(Var::from_tensor(t)?),
                (Param::Trainable(v), false) => {
                    *p = Param::Frozen(v.as_tensor().copy()?.detach());
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) -> Result<()> {
        self.set_trainable(|_| false)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| matches!(p, Param::Trainable(_)))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter_map(|p| match p {
                Param::Trainable(v) => Some(v.clone()),
                Param::Frozen(_) => None,
            })
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        match self.entries.get(name) {
            Some(Param::Trainable(v)) => Some(v.clone()),
            _ => None,
        }
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        crate::nn::to_vec_f64(&self.get(name)?)
    }

    /// Overwrite the values of an entry in place (trainable entries keep their
    /// identity so optimizer state stays attached).
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let shape = self.get(name)?.dims().to_vec();
        let t = Tensor::from_vec(values.to_vec(), shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
        match self.entries.get_mut(name) {
            Some(Param::Trainable(v)) => v.set(&t)?,
            Some(p @ Param::Frozen(_)) => *p = Param::Frozen(t),
            None => return Err(SamoraError::config(format!("missing parameter `{name}`"))),
        }
        Ok(())
    }

    /// Deep copy with every entry frozen.
    pub fn snapshot(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new(self.dtype, &self.device);
        for (name, p) in &self.entries {
            out.entries
                .insert(name.clone(), Param::Frozen(p.tensor().copy()?.detach()));
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let mut out = ParamStore::new(dtype, &self.device);
        for (name, p) in &self.entries {
            out.insert(name.clone(), p.tensor().to_dtype(dtype)?)?;
        }
        Ok(out)
    }

    /// Frozen copy of the entries whose names start with `prefix`.
    pub fn extract(&self, prefix: &str) -> Result<ParamStore> {
        let mut out = ParamStore::new(self.dtype, &self.device);
        for (name, p) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name.clone(), p.tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Copy every entry of `other` in as frozen, replacing existing names.
    pub fn merge(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in &other.entries {
            self.insert(name.clone(), p.tensor())?;
        }
        Ok(())
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|n, _| !n.starts_with(prefix));
    }

    /// SHA-256 over names, shapes and raw values of the selected entries.
    pub fn fingerprint<F: Fn(&str) -> bool>(&self, pred: F) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(n, _)| pred(n)) {
            let t = p.tensor();
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in crate::nn::to_vec_f64(&t)? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor().elem_count()).sum()
    }

    // --- initialisers -----------------------------------------------------

    pub fn init_trunc_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut StreamRng) -> Result<()> {
        let n = shape.iter().product();
        let v = rng::trunc_normal(rng, std, n);
        self.insert_values(name, &v, shape)
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut StreamRng) -> Result<()> {
        let n = shape.iter().product();
        let v = rng::normal(rng, std, n);
        self.insert_values(name, &v, shape)
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut StreamRng) -> Result<()> {
        let n = shape.iter().product();
        let v = rng::uniform(rng, -bound, bound, n);
        self.insert_values(name, &v, shape)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert_values(name, &vec![value; n], shape)
    }

    /// Linear layer `[out, in]` with truncated-normal weights and zero bias.
    pub fn init_linear(&mut self, prefix: &str, in_dim: usize, out_dim: usize, std: f64, rng: &mut StreamRng) -> Result<()> {
        self.init_trunc_normal(&format!("{prefix}.weight"), &[out_dim, in_dim], std, rng)?;
        self.init_const(&format!("{prefix}.bias"), &[out_dim], 0.0)
    }

    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.init_const(&format!("{prefix}.weight"), &[dim], 1.0)?;
        self.init_const(&format!("{prefix}.bias"), &[dim], 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_split_and_fingerprint() {
        let mut s = ParamStore::new(DType::F32, &Device::Cpu);
        s.init_const("a.weight", &[2, 2], 1.0).unwrap();
        s.init_const("b.weight", &[2], 2.0).unwrap();
        let before = s.fingerprint(|n| n.starts_with("a")).unwrap();
        s.set_trainable(|n| n.starts_with("b")).unwrap();
        assert_eq!(s.trainable_names(), vec!["b.weight".to_string()]);
        s.set_values("b.weight", &[3.0, 4.0]).unwrap();
        assert_eq!(s.values("b.weight").unwrap(), vec![3.0, 4.0]);
        assert_eq!(before, s.fingerprint(|n| n.starts_with("a")).unwrap());
        s.freeze_all().unwrap();
        assert!(s.trainable_vars().is_empty());
    }

    #[test]
    fn snapshot_is_independent() {
        let mut s = ParamStore::new(DType::F32, &Device::Cpu);
        s.init_const("w", &[3], 1.0).unwrap();
        s.set_trainable(|_| true).unwrap();
        let snap = s.snapshot().unwrap();
        s.set_values("w", &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(snap.values("w").unwrap(), vec![1.0, 1.0, 1.0]);
    }
}
