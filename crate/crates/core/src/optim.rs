//! Adam with optional decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::params::{NamedTensor, ParamStore, ParameterGroup};
use crate::tensor::Tensor;
use crate::{Error, Result};

fn default_lr() -> f64 {
    5e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled (AdamW-style) decay coefficient.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments per store index; untouched tensors have none.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update from `(store index, gradient)` pairs. Values are rounded
    /// to f32 afterwards when `round` is set.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)], round: bool) -> Result<()> {
        let c = &self.config;
        let mut scale = 1.0;
        if let Some(max) = c.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("gradient norm is {norm}")));
            }
            if norm > max {
                scale = max / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, g) in grads {
            let p = store.entry_mut(*i).tensor.data_mut();
            let m = self.m[*i].get_or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v[*i].get_or_insert_with(|| vec![0.0; p.len()]);
            for k in 0..p.len() {
                let gk = g.data()[k] * scale;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let upd = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps) + c.weight_decay * p[k];
                p[k] -= c.lr * upd;
                if round {
                    p[k] = p[k] as f32 as f64;
                }
            }
        }
        Ok(())
    }

    /// Moments as named tensors (`m.<name>`, `v.<name>`) for saving.
    pub fn export(&self, store: &ParamStore) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, e) in store.entries().iter().enumerate() {
            for (tag, src) in [("m", &self.m), ("v", &self.v)] {
                if let Some(data) = &src[i] {
                    out.push(NamedTensor {
                        name: format!("{tag}.{}", e.name),
                        group: e.group,
                        tensor: Tensor::from_vec(e.tensor.shape(), data.clone()),
                    });
                }
            }
        }
        out
    }

    pub fn import(config: AdamConfig, step: u64, store: &ParamStore, moments: Vec<NamedTensor>) -> Result<Self> {
        let mut adam = Adam::new(config, store.len());
        adam.step = step;
        for t in moments {
            let (tag, name) = t
                .name
                .split_once('.')
                .ok_or_else(|| Error::Resume(format!("bad moment name {}", t.name)))?;
            let i = store
                .index_of(name)
                .ok_or_else(|| Error::Resume(format!("moment for unknown tensor {name}")))?;
            if store.entries()[i].tensor.shape() != t.tensor.shape() {
                return Err(Error::Resume(format!("moment shape mismatch for {name}")));
            }
            let slot = match tag {
                "m" => &mut adam.m[i],
                "v" => &mut adam.v[i],
                _ => return Err(Error::Resume(format!("bad moment name {}", t.name))),
            };
            *slot = Some(t.tensor.into_data());
        }
        Ok(adam)
    }
}

/// Groups a phase may touch, checked after the fact.
pub fn changed_groups(before: &ParamStore, after: &ParamStore) -> Vec<ParameterGroup> {
    let mut out: Vec<ParameterGroup> = before
        .entries()
        .iter()
        .zip(after.entries())
        .filter(|(a, b)| {
            a.tensor.data().iter().zip(b.tensor.data()).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|(a, _)| a.group)
        .collect();
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_exact() {
        let c = AdamConfig::default();
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.eps, 1e-8);
        assert_eq!(c.weight_decay, 0.0);
        assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        s.insert("w", ParameterGroup::Adapter, Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), 1);
        adam.update(&mut s, &[(0, Tensor::from_vec(&[2], vec![3.0, -0.5]))], false).unwrap();
        let w = s.get("w").data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn quadratic_converges() {
        let mut s = ParamStore::new();
        s.insert("x", ParameterGroup::Encoder, Tensor::from_vec(&[1], vec![5.0]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), 1);
        for _ in 0..500 {
            let x = s.get("x").data()[0];
            adam.update(&mut s, &[(0, Tensor::from_vec(&[1], vec![2.0 * (x - 2.0)]))], false).unwrap();
        }
        assert!((s.get("x").data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut s = ParamStore::new();
        s.insert("x", ParameterGroup::Encoder, Tensor::zeros(&[1]));
        let mut a = Adam::new(AdamConfig { clip_norm: Some(1.0), ..AdamConfig::with_lr(1.0) }, 1);
        a.update(&mut s, &[(0, Tensor::from_vec(&[1], vec![100.0]))], false).unwrap();
        let m = &a.export(&s)[0];
        assert!((m.tensor.data()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn export_import_round_trip() {
        let mut s = ParamStore::new();
        s.insert("a", ParameterGroup::Encoder, Tensor::zeros(&[2]));
        s.insert("b", ParameterGroup::Adapter, Tensor::zeros(&[1]));
        let mut adam = Adam::new(AdamConfig::default(), 2);
        adam.update(&mut s, &[(1, Tensor::from_vec(&[1], vec![0.3]))], false).unwrap();
        let back = Adam::import(AdamConfig::default(), adam.step, &s, adam.export(&s)).unwrap();
        assert_eq!(back, adam);
    }
}
