use indexmap::IndexMap;
use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Slot {
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors with gradient slots and Adam moments.
///
/// Iteration follows insertion order, so parameter enumeration (and with it
/// checkpoint layout) is a pure function of the order the model registers
/// its layers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: IndexMap<String, Slot>,
    step: u64,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let n = value.numel();
        let (idx, _) = self.slots.insert_full(
            name,
            Slot {
                value,
                grad: vec![0.0; n],
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.slots.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.slots.get_index(id.0).expect("valid ParamId").0
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        self.slots[id.0].value.data_mut()
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_ready = false;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let slot = &mut self.slots[id.0];
        assert_eq!(slot.grad.len(), g.len(), "gradient size for `{}`", self.slots.get_index(id.0).unwrap().0);
        slot.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    /// L2 norm over all gradient entries.
    pub fn grad_norm(&self) -> f64 {
        self.slots
            .values()
            .flat_map(|s| s.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Bitwise comparison of all parameter values (names and order included).
    pub fn values_bitwise_eq(&self, other: &ParamStore) -> bool {
        self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .zip(other.slots.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.value.bitwise_eq(&b.value))
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update from the current gradients, then zeroes them.
    ///
    /// Fails if no backward pass has populated the gradients since the last step.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if !store.grads_ready {
            return Err(Error::Optimizer("adam step without fresh gradients".into()));
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for slot in store.slots.values_mut() {
            let value = slot.value.data_mut();
            for i in 0..value.len() {
                let g = slot.grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Glorot-uniform weight matrix `[fan_in, fan_out]`.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound))
}
