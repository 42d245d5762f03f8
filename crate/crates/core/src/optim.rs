//! First-order optimizers acting on one model part at a time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::SlotKind;
use crate::model::{Part, SfasModel};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct SlotState<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Optimizer state keyed by slot name. One instance can serve every part;
/// each slot keeps its own step count.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    state: BTreeMap<String, SlotState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            state: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update to every learnable slot of `part` from its
    /// accumulated gradient. Nothing is written if any gradient is non-finite.
    pub fn step(&mut self, model: &mut SfasModel<T>, part: Part, lr: f64) -> Result<()> {
        let mut slots = model.slots_mut(part);
        slots.retain(|s| s.kind == SlotKind::Param);
        for s in &slots {
            if let Some(g) = s.grad.as_deref() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { layer: s.name.clone() });
                }
            }
        }
        let lr = T::lit(lr);
        for s in slots {
            let Some(g) = s.grad else { continue };
            let st = self.state.entry(s.name).or_insert_with(|| SlotState {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
                steps: 0,
            });
            st.steps += 1;
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                    let c1 = T::one() - T::lit(beta1.powi(st.steps.min(i32::MAX as u64) as i32));
                    let c2 = T::one() - T::lit(beta2.powi(st.steps.min(i32::MAX as u64) as i32));
                    for i in 0..g.len() {
                        st.m[i] = b1 * st.m[i] + (T::one() - b1) * g[i];
                        st.v[i] = b2 * st.v[i] + (T::one() - b2) * g[i] * g[i];
                        let mhat = st.m[i] / c1;
                        let vhat = st.v[i] / c2;
                        s.value[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::lit(momentum);
                    for i in 0..g.len() {
                        st.m[i] = mu * st.m[i] + g[i];
                        s.value[i] -= lr * st.m[i];
                    }
                }
            }
        }
        Ok(())
    }
}
