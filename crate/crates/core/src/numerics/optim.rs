use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    /// `(name prefix, decay)` pairs; the first matching prefix wins and
    /// unmatched parameters get no decay.
    pub weight_decay: Vec<(String, f32)>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1.0e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: vec![("detector.".into(), 0.05)],
        }
    }
}

impl AdamWConfig {
    pub fn decay_for(&self, name: &str) -> f32 {
        self.weight_decay
            .iter()
            .find(|(prefix, _)| name.starts_with(prefix.as_str()))
            .map(|&(_, d)| d)
            .unwrap_or(0.0)
    }
}

/// AdamW with bias correction and decoupled, per-parameter weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| p.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { config, step: 0, first_moment: zeros(params), second_moment: zeros(params) }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Vec<f32>>, second: Vec<Vec<f32>>) -> Result<(), NumericsError> {
        let same = |a: &[Vec<f32>], b: &[Vec<f32>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&first, &self.first_moment) || !same(&second, &self.second_moment) {
            return Err(NumericsError::CorruptCheckpoint("optimizer moments do not match parameters".into()));
        }
        self.step = step;
        self.first_moment = first;
        self.second_moment = second;
        Ok(())
    }

    /// Applies one update using the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), NumericsError> {
        let missing: Vec<String> = params
            .iter()
            .filter(|(_, _, t)| t.grad().is_none())
            .map(|(_, n, _)| n.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(NumericsError::MissingGrad(missing));
        }
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.config.lr;
        let eps = self.config.eps;
        let names: Vec<String> = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let wd = self.config.decay_for(name);
            let tensor = params.get_mut(super::ParamId(i));
            let grad = tensor.take_grad().expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (((p, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * wd * *p;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            if tensor.data().iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { op: "adamw_step", index: i });
            }
        }
        Ok(())
    }
}
