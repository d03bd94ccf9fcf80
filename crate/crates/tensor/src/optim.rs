use std::collections::BTreeMap;

use crate::params::{Grads, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("gradient shape {got:?} does not match parameter {name} {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: AdamConfig, step_count: u64, moments: BTreeMap<String, Moments<T>>) -> Self {
        Self {
            config,
            step_count,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    /// Applies one update to every parameter in `stores` that has a gradient.
    ///
    /// All gradients are validated before any parameter is touched, so a
    /// failed step leaves both the parameters and the moments unchanged.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], grads: Grads<T>) -> Result<(), OptimError> {
        for store in stores.iter() {
            for (name, p) in store.iter() {
                if let Some(g) = grads.get(name) {
                    if g.shape() != p.shape() {
                        return Err(OptimError::ShapeMismatch {
                            name: name.clone(),
                            want: p.shape().to_vec(),
                            got: g.shape().to_vec(),
                        });
                    }
                    if !g.all_finite() {
                        return Err(OptimError::NonFiniteGradient(name.clone()));
                    }
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let lr_t = T::of(c.learning_rate / bc1);
        let sqrt_bc2 = T::of(bc2.sqrt());
        let eps = T::of(c.epsilon);
        for store in stores.iter_mut() {
            for (name, p) in store.iter_mut() {
                let Some(g) = grads.get(name) else { continue };
                let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                });
                let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
                for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *mi = b1 * *mi + ob1 * gi;
                    *vi = b2 * *vi + ob2 * gi * gi;
                    *w -= lr_t * *mi / (vi.sqrt() / sqrt_bc2 + eps);
                }
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Real>(grads: &Grads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
