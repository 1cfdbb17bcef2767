use crate::array::Array;
use crate::error::{contract, Error, Result};
use crate::params::ParamSet;

fn check_grads(params: &ParamSet, grads: &[Array]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(contract("optimizer", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.value(i).shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                expected: params.value(i).shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                name: params.name(i).to_string(),
            });
        }
    }
    Ok(())
}

/// Stochastic gradient descent with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(contract("sgd", "learning rate must be positive"));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array]) -> Result<()> {
        check_grads(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = (0..params.len()).map(|i| vec![0.0; params.value(i).len()]).collect();
        }
        for (i, g) in grads.iter().enumerate() {
            if !params.is_trainable(i) {
                continue;
            }
            let vel = &mut self.velocity[i];
            for ((p, v), gi) in params.value_mut(i).data_mut().iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                *v = self.momentum * *v + gi;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(contract("adam", "learning rate must be positive"));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = (0..params.len()).map(|i| vec![0.0; params.value(i).len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            if !params.is_trainable(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (p, gi)) in params.value_mut(i).data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gi;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
