use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{read_tensors, write_tensors, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before each update.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 5.0 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }

    /// Writes the moments as `m.<param>` / `v.<param>` tensors plus a `step`
    /// scalar and any `extra` scalars, in checkpoint format.
    pub fn save(&self, store: &ParamStore, path: &Path, extra: &[(&str, f64)]) -> Result<()> {
        let mut tensors = Vec::new();
        for (((name, t), m), v) in store.iter().zip(&self.m).zip(&self.v) {
            tensors.push((format!("m.{name}"), Tensor::new(t.shape().to_vec(), m.clone())?));
            tensors.push((format!("v.{name}"), Tensor::new(t.shape().to_vec(), v.clone())?));
        }
        tensors.push(("step".into(), Tensor::scalar(self.step as f64)));
        for (k, x) in extra {
            tensors.push((k.to_string(), Tensor::scalar(*x)));
        }
        write_tensors(path, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Inverse of [`AdamState::save`]; returns the extra scalars by name.
    pub fn load(store: &ParamStore, path: &Path) -> Result<(Self, Vec<(String, f64)>)> {
        let mut map: std::collections::HashMap<String, Tensor> = read_tensors(path)?.into_iter().collect();
        let mut state = AdamState::new(store);
        for (i, (name, t)) in store.iter().enumerate() {
            for (prefix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let key = format!("{prefix}.{name}");
                let stored = map.remove(&key).ok_or_else(|| Error::MissingTensor(key.clone()))?;
                if stored.shape() != t.shape() {
                    return Err(Error::TensorShape {
                        name: key,
                        stored: stored.shape().to_vec(),
                        expected: t.shape().to_vec(),
                    });
                }
                slot.copy_from_slice(stored.data());
            }
        }
        let step = map.remove("step").ok_or_else(|| Error::MissingTensor("step".into()))?;
        state.step = step.data()[0] as u64;
        let mut extra: Vec<(String, f64)> = map.into_iter().map(|(k, t)| (k, t.data()[0])).collect();
        extra.sort_by(|a, b| a.0.cmp(&b.0));
        Ok((state, extra))
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `clip`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let k = clip / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// One clipped, bias-corrected Adam update of every parameter in `store`.
/// `grads` follows store order and is clipped in place. Returns the pre-clip
/// global norm.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<f64> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer got {} gradient buffers and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    let norm = clip_global_norm(grads, cfg.clip);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in store.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        if g.len() != p.numel() {
            return Err(Error::Contract(format!("gradient {i} has {} entries for {} parameters", g.len(), p.numel())));
        }
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}
