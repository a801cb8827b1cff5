//! AMSGrad with coupled L2 weight decay, and a step-decay learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A model whose parameters can be handed to an optimizer as flat tensors.
/// The order of `tensors_mut` must match the order of its gradients.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero_grads(&self) -> Gradients {
        Gradients(self.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
    }
}

/// Gradients laid out like [`Parameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in self.0.iter_mut().flatten() {
            *x *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmsGradConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AmsGradConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5.0e-4,
        }
    }
}

/// Moment estimates for every parameter entry. No bias correction is applied.
#[derive(Debug, Clone)]
pub struct AmsGrad {
    pub config: AmsGradConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_hat: Vec<Vec<f64>>,
    step: u64,
}

impl AmsGrad {
    pub fn new(config: AmsGradConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            v_hat: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn max_second_moment(&self) -> &[Vec<f64>] {
        &self.v_hat
    }

    /// One update. With `g' = g + λθ`:
    /// `m ← β1·m + (1-β1)·g'`, `v ← β2·v + (1-β2)·g'²`, `v̂ ← max(v̂, v)`,
    /// `θ ← θ - lr·m / (√v̂ + ε)`.
    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &Gradients, lr: f64) -> Result<()> {
        if params.len() != grads.0.len()
            || params.iter().zip(&grads.0).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::ShapeMismatch(
                "parameter and gradient layouts differ".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("optimizer gradient".into()));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if self.m.is_empty() {
            let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.m = zeros.clone();
            self.v = zeros.clone();
            self.v_hat = zeros;
        } else if self.m.len() != params.len()
            || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::ShapeMismatch(
                "optimizer state does not match parameters".into(),
            ));
        }
        let AmsGradConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (t, p) in params.iter_mut().enumerate() {
            let (m, v, vh, g) = (&mut self.m[t], &mut self.v[t], &mut self.v_hat[t], &grads.0[t]);
            for i in 0..p.len() {
                let gi = g[i] + weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let prev = vh[i];
                vh[i] = prev.max(v[i]);
                debug_assert!(vh[i] >= prev);
                p[i] -= lr * m[i] / (vh[i].sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Piecewise-constant decay: the rate is divided by `decay_factor` at each
/// boundary epoch reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 3.0e-5,
            decay_factor: 10.0,
            decay_epochs: vec![8],
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::InvalidArgument(format!("negative epoch {epoch}")));
        }
        let passed = self
            .decay_epochs
            .iter()
            .filter(|&&b| epoch as usize >= b)
            .count();
        Ok(self.initial / self.decay_factor.powi(passed as i32))
    }
}
