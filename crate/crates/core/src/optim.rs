//! First-order optimizers over [`ParameterSet`]s.
//!
//! In private training these only ever see the already-privatised gradient,
//! so their internal state is post-processing.

use crate::error::{invalid, Result};
use crate::numerics::{ParameterSet, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// SGD with optional heavy-ball momentum and L2 weight decay (`g + wd·θ`).
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam(AdamHyper),
}

impl OptimizerKind {
    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::Sgd {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr >= 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerKind::Adam(h) => {
                h.lr >= 0.0
                    && (0.0..1.0).contains(&h.beta1)
                    && (0.0..1.0).contains(&h.beta2)
                    && h.eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

/// Adam first/second moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(like: &ParameterSet<T>) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step on `params` using gradient `grad`.
pub fn dp_adam_update<T: Real>(
    params: &mut ParameterSet<T>,
    state: &mut AdamState<T>,
    grad: &ParameterSet<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    params.check_structure(grad)?;
    state.m.check_structure(grad)?;
    state.step += 1;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = T::of(1.0 - b1.powi(state.step as i32));
    let c2 = T::of(1.0 - b2.powi(state.step as i32));
    let (tb1, tb2) = (T::of(b1), T::of(b2));
    let lr = T::of(hyper.lr);
    let eps = T::of(hyper.eps);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grad.iter()).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = tb1 * m[i] + (T::one() - tb1) * gi;
            v[i] = tb2 * v[i] + (T::one() - tb2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Optimizer plus whatever state it carries.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    velocity: Option<ParameterSet<T>>,
    adam: Option<AdamState<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            velocity: None,
            adam: None,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet<T>, grad: &ParameterSet<T>) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                params.check_structure(grad)?;
                let mut g = grad.clone();
                if weight_decay > 0.0 {
                    g.add_scaled(params, T::of(weight_decay))?;
                }
                if momentum > 0.0 {
                    let vel = self.velocity.get_or_insert_with(|| params.zeros_like());
                    vel.scale(T::of(momentum));
                    vel.add_scaled(&g, T::one())?;
                    params.add_scaled(vel, T::of(-lr))
                } else {
                    params.add_scaled(&g, T::of(-lr))
                }
            }
            OptimizerKind::Adam(h) => {
                let state = self.adam.get_or_insert_with(|| AdamState::new(params));
                dp_adam_update(params, state, grad, &h)
            }
        }
    }
}
