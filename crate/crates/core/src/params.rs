//! Named parameter storage with per-parameter gradient slots.
//!
//! Names are unique and iteration is always in sorted name order; the
//! optimizer and the checkpoint writer both rely on that to stay
//! deterministic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(CoreError::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CoreError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| CoreError::Contract(format!("unknown parameter {name:?}")))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(CoreError::Dimension {
                op: "parameter set",
                detail: format!("{name:?}: {:?} vs {:?}", slot.shape(), t.shape()),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Names in sorted order.
    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(|s| s.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Creates (or resets) a zero gradient slot for every parameter.
    pub fn zero_grads(&mut self) {
        self.grads = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| CoreError::Contract(format!("no gradient slot for {name:?}")))
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let param_shape = self.get(name)?.shape().to_vec();
        if param_shape != delta.shape() {
            return Err(CoreError::Dimension {
                op: "gradient accumulate",
                detail: format!("{name:?}: {:?} vs {:?}", param_shape, delta.shape()),
            });
        }
        let slot = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param_shape));
        slot.add_assign(delta)
    }

    /// Scales every gradient slot in place.
    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Tracks which parameters were placed on a tape so their adjoints can be
/// folded back into the store after `backward`. Binding the same name twice
/// returns the existing leaf.
#[derive(Default)]
pub struct TapeBinding {
    bound: BTreeMap<String, Var>,
}

impl TapeBinding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let var = tape.leaf(store.get(name)?.clone())?;
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    /// Adds each bound parameter's adjoint (scaled) to the store's gradient
    /// slots.
    pub fn accumulate(
        &self,
        tape: &Tape,
        grads: &Gradients,
        store: &mut ParameterStore,
        scale: f64,
    ) -> Result<()> {
        for (name, var) in &self.bound {
            let mut g = grads.wrt(tape, *var);
            if scale != 1.0 {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            store.accumulate_grad(name, &g)?;
        }
        Ok(())
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(|s| s.as_str())
    }
}

/// Uniform init in [-bound, bound]; `bound = 1/sqrt(fan_in)` everywhere the
/// model uses it.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product consistent")
}
