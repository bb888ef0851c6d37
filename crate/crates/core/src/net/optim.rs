use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::DenoiserModel;
use crate::error::{Error, Result};

fn require_grads(model: &DenoiserModel) -> Result<()> {
    if model.parameters().iter().any(|(_, p)| p.grad.is_none()) {
        return Err(Error::State("optimizer step without populated gradients".into()));
    }
    Ok(())
}

fn check_finite(model: &DenoiserModel) -> Result<()> {
    if model.all_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            message: "parameters became non-finite after an update".into(),
            diagnostics: format!("model role {:?}", model.role()),
        })
    }
}

/// Plain gradient descent, `p ← p − lr·∇p`; clears the gradients.
pub fn sgd_step(model: &mut DenoiserModel, lr: f64) -> Result<()> {
    require_grads(model)?;
    for p in model.parameters_mut() {
        let g = p.grad.take().expect("checked above");
        p.value.scaled_add(-lr, &g);
    }
    check_finite(model)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment state for one model.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(model: &DenoiserModel, cfg: AdamConfig) -> Self {
        let zeros: Vec<Array2<f64>> = model
            .parameters()
            .iter()
            .map(|(_, p)| Array2::zeros(p.value.dim()))
            .collect();
        Self {
            cfg,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, model: &mut DenoiserModel) -> Result<()> {
        require_grads(model)?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((p, m), v) in model
            .parameters_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = p.grad.take().expect("checked above");
            m.zip_mut_with(&g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| *w -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
        check_finite(model)
    }
}
