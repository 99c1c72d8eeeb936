use std::collections::BTreeMap;

use super::Parameters;
use crate::error::{MoceError, Result};
use crate::tensor::{Binder, Gradients};

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that received a gradient.
    ///
    /// Returns the pre-clipping gradient norm.
    pub fn step<P: Parameters + ?Sized>(
        &mut self,
        model: &mut P,
        binder: &Binder,
        grads: &Gradients,
    ) -> Result<f64> {
        let mut collected: Vec<(String, Vec<f64>)> = Vec::new();
        model.visit_params(&mut |name, t| {
            if t.requires_grad() {
                if let Some(g) = binder.gradient(grads, name) {
                    collected.push((name.to_string(), g.to_vec()));
                }
            }
        });
        let norm = collected
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(MoceError::numeric("non-finite gradient"));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut grads: BTreeMap<String, Vec<f64>> = collected.into_iter().collect();
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |name, p| {
            let Some(g) = grads.remove(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        });
        Ok(norm)
    }
}
