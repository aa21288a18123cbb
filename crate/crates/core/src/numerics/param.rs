use rand::Rng;

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Param {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            value,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) entries: Vec<(ParamId, Vec<f32>)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

/// Owns every trainable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter initialized uniformly in `±1/√fan_in`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("length from shape");
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_elements(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.get(*id).value.len()).sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            let dst = self.params[id.0].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn zero_grad(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.params[id.0].grad.data_mut().fill(0.0);
        }
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return shape_err(format!("{}: expected {:?}, got {:?}", p.name, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Multiplies the learning rate by `factor` (one decay step).
    pub fn decay(&mut self, factor: f32) {
        self.lr *= factor;
    }

    /// Applies one update to `ids` and zeroes their gradients. Fails without
    /// touching any value if a gradient is non-finite.
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for id in ids {
            let p = store.get(*id);
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        for id in ids {
            let p = store.get_mut(*id);
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let grad = p.grad.data();
            let m = p.first_moment.data_mut();
            for (mi, g) in m.iter_mut().zip(grad) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            }
            let v = p.second_moment.data_mut();
            for (vi, g) in v.iter_mut().zip(grad) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            }
            let (m, v) = (p.first_moment.data(), p.second_moment.data());
            for ((x, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}

/// Rescales each parameter's gradient independently so its L2 norm is at
/// most `max_norm`.
pub fn clip_param_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f32) {
    assert!(max_norm > 0.0, "clip norm must be positive");
    for id in ids {
        let grad = &mut store.get_mut(*id).grad;
        let norm = grad.l2_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
}
