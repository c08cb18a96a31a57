//! First-order optimizers keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam with bias correction, or plain gradient descent.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: BTreeMap<String, Moments<T>>,
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    /// Applies one update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::lit(lr);
                for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let n = param.len();
                let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                    t: 0,
                });
                st.t += 1;
                let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
                let c1 = T::lit(1.0 - self.beta1.powi(st.t));
                let c2 = T::lit(1.0 - self.beta2.powi(st.t));
                let (lr, eps) = (T::lit(lr), T::lit(self.eps));
                for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    let m = b1 * st.m[i] + (T::one() - b1) * g;
                    let v = b2 * st.v[i] + (T::one() - b2) * g * g;
                    st.m[i] = m;
                    st.v[i] = v;
                    *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                }
            }
        }
    }
}
