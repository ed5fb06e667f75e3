use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array,
    pub grad: Array,
    first_moment: Array,
    second_moment: Array,
    pub trainable: bool,
}

/// AdamW hyper-parameters for one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Named learnable arrays with gradient accumulators and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("initial value of {name}")));
        }
        let zeros = Array::zeros(value.rows(), value.cols());
        let (idx, _) = self.params.insert_full(
            name,
            Param {
                grad: zeros.clone(),
                first_moment: zeros.clone(),
                second_moment: zeros,
                value,
                trainable: true,
            },
        );
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn by_id(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn set_value(&mut self, name: &str, value: Array) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", &p.value.shape(), &value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a gradient set produced by [`super::Tape::backward`].
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (idx, g) in grads.entries.iter().enumerate() {
            if let Some(g) = g {
                let p = &mut self.params[idx];
                if p.grad.shape() != g.shape() {
                    return Err(Error::shape("accumulate", &p.grad.shape(), &g.shape()));
                }
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.values_mut().filter(|p| p.trainable) {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            }
        }
        norm
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.step
    }

    /// Decoupled-weight-decay Adam update over trainable parameters.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        if !(opt.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", opt.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for p in self.params.values_mut().filter(|p| p.trainable) {
            let Param {
                value,
                grad,
                first_moment,
                second_moment,
                ..
            } = p;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(first_moment.data_mut().iter_mut().zip(second_moment.data_mut()));
            for ((w, &g), (m, v)) in it {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= opt.lr * opt.weight_decay * *w;
                *w -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }

    /// Copies values of every parameter in `other` that also exists here.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, p) in other.iter() {
            if self.contains(name) {
                self.set_value(name, p.value.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Per-parameter gradients indexed like the owning store.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) entries: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.entries.get(id.0).and_then(Option::as_ref)
    }

    /// Sums gradient sets in order.
    pub fn merge(mut self, other: &Gradients) -> Self {
        if self.entries.len() < other.entries.len() {
            self.entries.resize(other.entries.len(), None);
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.add_assign(s),
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
        self
    }
}
