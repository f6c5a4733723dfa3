use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Applies gradient updates to a [`ParamStore`].
///
/// Adam keeps per-parameter moments and step counts, so parameters that
/// only receive gradients occasionally (sparse embedding rows) are updated
/// lazily.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimConfig,
    moments: HashMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            moments: HashMap::new(),
        }
    }

    /// Updates every listed parameter. Each one must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, params: &[ParamId]) -> Result<()> {
        for &id in params {
            grads.require(id, store)?;
        }
        if self.config.lr == 0.0 {
            return Ok(());
        }
        for &id in params {
            let g = grads.require(id, store)?;
            match self.config.kind {
                OptimizerKind::Sgd => {
                    let lr = self.config.lr;
                    let p = store.get_mut(id);
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let OptimConfig {
                        lr,
                        beta1,
                        beta2,
                        eps,
                        ..
                    } = self.config;
                    let st = self.moments.entry(id).or_insert_with(|| Moments {
                        m: Tensor::zeros(g.shape()),
                        v: Tensor::zeros(g.shape()),
                        t: 0,
                    });
                    st.t += 1;
                    let bc1 = 1.0 - beta1.powi(st.t as i32);
                    let bc2 = 1.0 - beta2.powi(st.t as i32);
                    let p = store.get_mut(id);
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(st.m.data_mut().iter_mut())
                        .zip(st.v.data_mut().iter_mut())
                        .zip(g.data());
                    for (((w, m), v), &d) in it {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Updates every parameter that has a gradient and is not frozen.
    pub fn step_all(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let ids: Vec<ParamId> = grads.ids().filter(|&id| !store.is_frozen(id)).collect();
        self.step(store, grads, &ids)
    }
}
