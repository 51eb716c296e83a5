//! First-order optimizers over flat parameter slots.

use collage_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam or AdaGrad state for a fixed set of slots.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Option<Slot>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, slots: Vec::new() }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Optimizer { beta1, beta2, ..Self::new(OptimizerKind::Adam, lr) }
    }

    pub fn adagrad(lr: f64) -> Self {
        Self::new(OptimizerKind::Adagrad, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once before the slot updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Descends `x` along gradient `g` using the state kept for `slot`.
    pub fn update(&mut self, slot: usize, x: &mut [f64], g: &[f64]) {
        assert_eq!(x.len(), g.len(), "gradient length mismatch");
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let s = self.slots[slot].get_or_insert_with(|| Slot { m: vec![0.0; x.len()], v: vec![0.0; x.len()] });
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for i in 0..x.len() {
                    s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g[i];
                    s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mhat = s.m[i] / c1;
                    let vhat = s.v[i] / c2;
                    x[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            OptimizerKind::Adagrad => {
                for i in 0..x.len() {
                    s.v[i] += g[i] * g[i];
                    x[i] -= self.lr * g[i] / (s.v[i].sqrt() + self.eps);
                }
            }
        }
    }
}

/// Gradient post-processing applied before a parameter update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradPolicy {
    /// Global L2 norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// L2 weight decay rate added to the gradient.
    pub weight_decay: f64,
}

/// Applies one optimizer step to every tensor of `store`.
pub fn step_store(opt: &mut Optimizer, store: &mut ParamStore, grads: &mut [Tensor], policy: GradPolicy) {
    if policy.weight_decay > 0.0 {
        for (g, id) in grads.iter_mut().zip(store.ids()) {
            let w = store.get(id);
            g.data_mut().iter_mut().zip(w.data()).for_each(|(g, w)| *g += policy.weight_decay * w);
        }
    }
    if let Some(limit) = policy.clip_norm {
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > limit {
            let s = limit / norm;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    opt.begin_step();
    for (slot, (g, id)) in grads.iter().zip(store.ids()).enumerate() {
        opt.update(slot, store.get_mut(id).data_mut(), g.data());
    }
}
