use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Algorithm {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    RmsProp { decay: f64, eps: f64 },
}

impl Algorithm {
    pub fn adam() -> Self {
        Algorithm::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        Algorithm::RmsProp {
            decay: 0.99,
            eps: 1e-5,
        }
    }
}

/// Optimizer state with one slot per parameter of the set it was built for.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub algorithm: Algorithm,
    pub lr: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimState {
    pub fn new(algorithm: Algorithm, lr: f64, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect::<Vec<_>>();
        let first = match algorithm {
            Algorithm::Adam { .. } => zeros(),
            Algorithm::RmsProp { .. } => Vec::new(),
        };
        Self {
            algorithm,
            lr,
            step: 0,
            first,
            second: zeros(),
        }
    }

    pub fn adam(lr: f64, params: &ParamSet) -> Self {
        Self::new(Algorithm::adam(), lr, params)
    }

    pub fn rmsprop(lr: f64, params: &ParamSet) -> Self {
        Self::new(Algorithm::rmsprop(), lr, params)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`. Frozen
    /// parameters are skipped entirely, so they stay bitwise unchanged;
    /// gradients are left for the caller to zero.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.second.len() != params.len() {
            return Err(NnError::State(format!(
                "state built for {} parameters, got {}",
                self.second.len(),
                params.len()
            )));
        }
        for i in 0..params.len() {
            let (name, p) = params.by_index(i);
            if self.second[i].shape() != p.value.shape() {
                return Err(NnError::State(format!(
                    "moment shape {:?} vs parameter `{name}` {:?}",
                    self.second[i].shape(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.algorithm {
            Algorithm::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let (_, p) = params.by_index_mut(i);
                    if !p.trainable {
                        continue;
                    }
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let g = p.grad.data();
                    for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                        let gj = g[j] as f64;
                        let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                        let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
            Algorithm::RmsProp { decay, eps } => {
                for i in 0..params.len() {
                    let (_, p) = params.by_index_mut(i);
                    if !p.trainable {
                        continue;
                    }
                    let v = self.second[i].data_mut();
                    let g = p.grad.data();
                    for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                        let gj = g[j] as f64;
                        let vj = decay * v[j] as f64 + (1.0 - decay) * gj * gj;
                        v[j] = vj as f32;
                        *w = (*w as f64 - lr * gj / (vj + eps).sqrt()) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `coeff * ||w||^2` gradients for every trainable parameter under
/// `prefix` whose name ends in `.w` (weights, not biases). Returns the
/// penalty value.
pub fn add_l2_penalty<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, coeff: f64) -> T {
    let c = T::lit(coeff);
    let two = T::lit(2.0);
    let mut total = T::zero();
    for (name, p) in params.iter_mut() {
        if !name.starts_with(prefix) || !name.ends_with(".w") {
            continue;
        }
        total += p.value.sum_squares();
        if p.trainable {
            for (g, &w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                *g += c * two * w;
            }
        }
    }
    c * total
}
