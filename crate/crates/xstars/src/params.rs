//! Named parameter sets and the builder that modules use to declare them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// An ordered collection of trainable tensors addressed by dotted names.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        self.vars.insert(name.into(), Var::from_tensor(&tensor.detach())?);
        Ok(())
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Independent copy: later writes to either set do not affect the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.vars {
            out.vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Parameters whose name starts with `prefix`, sharing storage with `self`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds the parameters of `other` to this set, sharing storage. Names
    /// must not collide.
    pub fn extend_shared(&mut self, other: &ParamSet) -> Result<()> {
        for (k, v) in &other.vars {
            if self.vars.contains_key(k) {
                return Err(Error::Parameter(format!("parameter `{k}` defined twice")));
            }
            self.vars.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    /// Snapshot of every tensor, detached from storage sharing.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Fails with the first name whose presence or shape differs.
    pub fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        for (name, var) in &self.vars {
            match other.vars.get(name) {
                None => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` missing from the other set"
                    )))
                }
                Some(o) if o.dims() != var.dims() => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?} vs {:?}",
                        var.dims(),
                        o.dims()
                    )))
                }
                _ => {}
            }
        }
        if let Some(name) = other.vars.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Shape(format!(
                "parameter `{name}` missing from the first set"
            )));
        }
        Ok(())
    }

    /// Overwrites every value with the corresponding one of `other`.
    pub fn assign_from(&self, other: &ParamSet) -> Result<()> {
        self.check_same_structure(other)?;
        for (name, var) in &self.vars {
            var.set(&other.vars[name].as_tensor().copy()?)?;
        }
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.vars {
            out.vars
                .insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?);
        }
        Ok(out)
    }

    /// Adds the tensors of this set to `out` under `prefix`.
    pub fn export_into(&self, prefix: &str, out: &mut HashMap<String, Tensor>) {
        for (k, v) in &self.vars {
            out.insert(format!("{prefix}{k}"), v.as_detached_tensor());
        }
    }

    /// Collects every tensor named `prefix*` from `tensors`, stripping the prefix.
    pub fn import_from(prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<Self> {
        let mut out = Self::new();
        for (k, t) in tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, t)?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        self.export_into("", &mut map);
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        Self::import_from("", &map)
    }
}

/// How a freshly created parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with the given standard deviation, truncated at two deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Hands out parameters by name, creating them on first request.
///
/// Existing parameters are reused as-is (after a shape check), which is how
/// checkpoints are loaded: fill a [`ParamSet`] from disk, then construct the
/// modules on top of it.
pub struct ParamBuilder<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(params: &'a mut ParamSet, seed: u64, dtype: DType) -> Self {
        Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.params.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            if v.dtype() != self.dtype {
                let cast = Var::from_tensor(&v.as_tensor().to_dtype(self.dtype)?)?;
                self.params.vars.insert(name.to_string(), cast);
            }
            return Ok(self.params.vars[name].as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                        // consume one extra draw so retries stay decorrelated
                        let _: u32 = self.rng.random();
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.params.insert(name, &t)?;
        Ok(self.params.vars[name].as_tensor().clone())
    }
}

/// `teacher <- momentum * teacher + (1 - momentum) * student` for every parameter.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!(
            "EMA momentum must be in [0, 1], got {momentum}"
        )));
    }
    teacher.check_same_structure(student)?;
    if momentum == 1.0 {
        return Ok(());
    }
    for (name, t) in &teacher.vars {
        let s = student.vars[name].as_tensor().detach();
        let updated = if momentum == 0.0 {
            s.copy()?
        } else {
            ((t.as_tensor().detach() * momentum)? + (s * (1.0 - momentum))?)?
        };
        t.set(&updated)?;
    }
    Ok(())
}
