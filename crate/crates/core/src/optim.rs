//! Adam with bias correction and the step-then-linear-decay learning rate.

use serde::{Deserialize, Serialize};
use svbrdf_tensor::{Element, Tensor};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(invalid(format!("invalid Adam hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// Adam state for a list of parameter tensors (or flat slices).
#[derive(Clone, Debug)]
pub struct Adam<T: Element> {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Ok(Self {
            cfg,
            t: 0,
            m: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
            v: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
        })
    }

    pub fn for_tensors(params: &[Tensor<T>], cfg: AdamConfig) -> Result<Self> {
        Self::new(params.iter().map(|t| t.numel()), cfg)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    pub fn step_tensors(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let mut p: Vec<&mut [T]> = params.iter_mut().map(|t| t.data_mut()).collect();
        let g: Vec<&[T]> = grads.iter().map(|t| t.data()).collect();
        self.step(&mut p, &g, lr)
    }

    /// One update. A non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {k}: state {} vs parameter {} vs gradient {}",
                    self.m[k].len(),
                    p.len(),
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step: self.t as usize,
                    what: format!("gradient of tensor {k} is {:?} at {bad}", g[bad]),
                });
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = T::of(p[i].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Constant `lr0` for the first half of the epochs, then linear decay that
/// would reach 0 at epoch `epochs`.
pub fn lr_schedule(epoch: usize, epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= epochs {
        return Err(invalid(format!("epoch {epoch} outside [0, {epochs})")));
    }
    let half = epochs / 2;
    if epoch < half {
        return Ok(lr0);
    }
    Ok(lr0 * (epochs - epoch) as f64 / (epochs - half) as f64)
}
