use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::{Dims4, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    params: Vec<ParamId>,
    first: Vec<Tensor4>,
    second: Vec<Tensor4>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let first = params
            .iter()
            .map(|&id| Tensor4::zeros(store.tensor(id).dims()))
            .collect();
        let second = params
            .iter()
            .map(|&id| Tensor4::zeros(store.tensor(id).dims()))
            .collect();
        Self {
            config,
            step: 0,
            params,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// One update of every managed parameter. A parameter absent from
    /// `grads` is updated with a zero gradient (its moments still decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (i, &id) in self.params.iter().enumerate() {
            let dims = store.tensor(id).dims();
            if let Some(g) = grads.get(id) {
                if g.dims() != dims {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        expected: dims,
                        actual: g.dims(),
                    });
                }
            }
            if self.first[i].dims() != dims {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    expected: self.first[i].dims(),
                    actual: dims,
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        for (i, &id) in self.params.iter().enumerate() {
            let grad = grads.get(id).map(Tensor4::data);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.tensor_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grad.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    /// Moment buffers and step counter as named tensors, for checkpoints.
    pub(crate) fn to_named(&self, store: &ParamStore) -> Vec<(String, Tensor4)> {
        let mut out = Vec::with_capacity(2 * self.params.len() + 1);
        // split into 16-bit halves so the count survives f32 storage exactly
        let halves = vec![(self.step >> 16) as f32, (self.step & 0xffff) as f32];
        let step = Tensor4::from_vec(Dims4::new(1, 1, 1, 2), halves).expect("fixed dims");
        out.push(("step".to_string(), step));
        for (i, &id) in self.params.iter().enumerate() {
            let name = &store.get(id).name;
            out.push((format!("m/{name}"), self.first[i].clone()));
            out.push((format!("v/{name}"), self.second[i].clone()));
        }
        out
    }

    pub(crate) fn load_named(
        &mut self,
        store: &ParamStore,
        entries: Vec<(String, Tensor4)>,
    ) -> Result<()> {
        let mut step = None;
        let mut first: Vec<Option<Tensor4>> = vec![None; self.params.len()];
        let mut second: Vec<Option<Tensor4>> = vec![None; self.params.len()];
        let index_of = |name: &str| {
            self.params
                .iter()
                .position(|&id| store.get(id).name == name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer entry for unknown parameter {name}")))
        };
        for (name, tensor) in entries {
            if name == "step" {
                let d = tensor.data();
                if d.len() != 2 {
                    return Err(Error::Checkpoint("malformed optimizer step entry".into()));
                }
                step = Some(((d[0] as u64) << 16) | d[1] as u64);
            } else if let Some(p) = name.strip_prefix("m/") {
                first[index_of(p)?] = Some(tensor);
            } else if let Some(p) = name.strip_prefix("v/") {
                second[index_of(p)?] = Some(tensor);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry {name}")));
            }
        }
        let step = step.ok_or_else(|| Error::Checkpoint("optimizer step missing".into()))?;
        let mut m_all = Vec::with_capacity(first.len());
        let mut v_all = Vec::with_capacity(second.len());
        for (i, (m, v)) in first.into_iter().zip(second).enumerate() {
            let name = &store.get(self.params[i]).name;
            let (m, v) = m
                .zip(v)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer moments missing for {name}")))?;
            let dims = store.tensor(self.params[i]).dims();
            if m.dims() != dims || v.dims() != dims {
                return Err(Error::Checkpoint(format!("optimizer moment shape mismatch for {name}")));
            }
            m_all.push(m);
            v_all.push(v);
        }
        self.step = step;
        self.first = m_all;
        self.second = v_all;
        Ok(())
    }
}
