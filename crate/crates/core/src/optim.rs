//! Multi-task loss weighting and Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// L = alpha * ctc + (1 - alpha) * disc + beta * clf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtlWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MtlWeights {
    fn default() -> Self {
        MtlWeights {
            alpha: 0.4,
            beta: 0.01,
        }
    }
}

impl MtlWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(CoreError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(CoreError::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Combines the three branch losses, rejecting non-finite branches by name.
pub fn mtl_loss(ctc: f64, disc: f64, clf: f64, w: &MtlWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("ctc", ctc), ("disc", disc), ("clf", clf)] {
        if !v.is_finite() {
            return Err(CoreError::NonFinite {
                context: format!("{name} branch loss ({v})"),
            });
        }
    }
    Ok(w.alpha * ctc + (1.0 - w.alpha) * disc + w.beta * clf)
}

/// First and second moment estimates per parameter, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment pairs in sorted name order, for serialization.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.m
            .iter()
            .zip(self.v.values())
            .map(|((k, m), v)| (k.as_str(), m, v))
    }

    /// Rebuilds a state from serialized parts; shapes must match `params`.
    pub fn from_parts(
        params: &ParameterStore,
        step: u64,
        moments: BTreeMap<String, (Tensor, Tensor)>,
    ) -> Result<Self> {
        let mut state = AdamState::new(params);
        state.step = step;
        if moments.len() != params.len() {
            return Err(CoreError::Contract(format!(
                "optimizer state has {} entries for {} parameters",
                moments.len(),
                params.len()
            )));
        }
        for (name, (m, v)) in moments {
            let shape = params.get(&name)?.shape();
            if m.shape() != shape || v.shape() != shape {
                return Err(CoreError::Contract(format!(
                    "optimizer moment shape mismatch for {name:?}"
                )));
            }
            state.m.insert(name.clone(), m);
            state.v.insert(name, v);
        }
        Ok(state)
    }
}

/// One Adam update over every parameter, in sorted name order. Every
/// parameter must have a gradient slot (zero slots are fine: the parameter
/// then keeps its value while the step counter still advances).
pub fn adam_step(params: &mut ParameterStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(CoreError::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if state.m.len() != params.len() {
        return Err(CoreError::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    let names: alloc::vec::Vec<String> = params.names().iter().map(|s| s.to_string()).collect();
    for name in &names {
        let grad = params.grad(name)?.clone();
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| CoreError::Contract(format!("optimizer missing moment for {name:?}")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| CoreError::Contract(format!("optimizer missing moment for {name:?}")))?;
        if m.shape() != grad.shape() {
            return Err(CoreError::Contract(format!(
                "optimizer moment shape mismatch for {name:?}"
            )));
        }
        let p = params.get_mut(name)?;
        let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
        for i in 0..grad.numel() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (fmath::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}
