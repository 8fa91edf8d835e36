use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};

use crate::params::ParamSet;
use crate::{Error, Result};

/// AdamW with decoupled weight decay. Biases and other rank-1 tensors are not
/// decayed. The moment estimates are part of the training state and are
/// written into checkpoints.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

fn decays(name: &str, t: &Tensor) -> bool {
    t.rank() > 1 && !name.ends_with(".bias")
}

impl AdamW {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `params` that has a gradient.
    pub fn step(
        &mut self,
        params: &ParamSet,
        grads: &HashMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(name) else { continue };
            let p = var.as_tensor().detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let mut next = p.clone();
            if weight_decay > 0.0 && decays(name, &p) {
                next = (next * (1.0 - lr * weight_decay))?;
            }
            next = (next - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    pub fn export_into(&self, prefix: &str, out: &mut HashMap<String, Tensor>) -> Result<()> {
        for (k, t) in &self.m {
            out.insert(format!("{prefix}m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{prefix}v.{k}"), t.clone());
        }
        out.insert(
            format!("{prefix}step"),
            Tensor::new(&[self.step as f64], &Device::Cpu)?,
        );
        Ok(())
    }

    pub fn import_from(prefix: &str, tensors: &HashMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut out = Self::new();
        let step = tensors
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Parameter("optimizer state has no step counter".into()))?;
        out.step = step.to_dtype(DType::F64)?.to_vec1::<f64>()?[0] as u64;
        for (k, t) in tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                if let Some(name) = rest.strip_prefix("m.") {
                    out.m.insert(name.to_string(), t.to_dtype(dtype)?);
                } else if let Some(name) = rest.strip_prefix("v.") {
                    out.v.insert(name.to_string(), t.to_dtype(dtype)?);
                }
            }
        }
        Ok(out)
    }
}

/// Gradients of `params` pulled out of a backward pass, keyed by name.
pub fn collect_grads(params: &ParamSet, store: &GradStore) -> HashMap<String, Tensor> {
    params
        .iter()
        .filter_map(|(name, var)| store.get(var.as_tensor()).map(|g| (name.to_string(), g.clone())))
        .collect()
}

/// Rescales each gradient whose L2 norm exceeds `max_norm` (per-parameter
/// clipping). Returns the global norm before clipping.
pub fn clip_per_parameter(grads: &mut HashMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut names: Vec<String> = grads.keys().cloned().collect();
    names.sort();
    for name in names {
        let g = grads.get_mut(&name).expect("listed key");
        let sq = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += sq;
        let norm = sq.sqrt();
        if max_norm > 0.0 && norm > max_norm {
            *g = (&*g * (max_norm / (norm + 1e-6)))?;
        }
    }
    Ok(total.sqrt())
}
