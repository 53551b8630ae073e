use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }
}

/// One parameter handed to [`Optimizer::step`].
pub struct ParamSlot<'p, T: Scalar> {
    pub key: &'p str,
    pub value: &'p mut Matrix<T>,
    pub grad: Option<&'p Matrix<T>>,
    pub trainable: bool,
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW (decoupled weight decay) or plain SGD with per-parameter masks.
pub struct Optimizer<T: Scalar> {
    cfg: OptimizerConfig,
    step_count: u64,
    moments: HashMap<String, Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Number of optimizer-state scalars currently held (two per trainable
    /// entry for AdamW, none for SGD).
    pub fn state_len(&self) -> usize {
        self.moments.values().map(|m| m.m.len() + m.v.len()).sum()
    }

    /// Applies one update. Frozen slots are left bitwise untouched; a
    /// trainable slot without a gradient is an error and nothing is updated.
    pub fn step(&mut self, params: &mut [ParamSlot<'_, T>]) -> Result<(), NumericsError> {
        for p in params.iter() {
            if !p.trainable {
                continue;
            }
            let g = p
                .grad
                .ok_or_else(|| NumericsError::MissingGradient(p.key.to_string()))?;
            if g.shape() != p.value.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "optimizer step",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = T::lit(self.cfg.lr);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = p.grad.expect("checked above");
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    let wd = T::lit(self.cfg.weight_decay);
                    for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * (gi + wd * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let (b1, b2) = (T::lit(self.cfg.betas.0), T::lit(self.cfg.betas.1));
                    let eps = T::lit(self.cfg.eps);
                    let decay = T::one() - lr * T::lit(self.cfg.weight_decay);
                    let bc1 = T::one() - b1.powi(t);
                    let bc2 = T::one() - b2.powi(t);
                    let n = p.value.len();
                    let mom = self.moments.entry(p.key.to_string()).or_insert_with(|| Moments {
                        m: vec![T::zero(); n],
                        v: vec![T::zero(); n],
                    });
                    for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                        let gi = g.data()[k];
                        mom.m[k] = b1 * mom.m[k] + (T::one() - b1) * gi;
                        mom.v[k] = b2 * mom.v[k] + (T::one() - b2) * gi * gi;
                        let m_hat = mom.m[k] / bc1;
                        let v_hat = mom.v[k] / bc2;
                        *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if !p.value.is_finite() {
                return Err(NumericsError::NonFinite(format!("parameter {}", p.key)));
            }
        }
        Ok(())
    }
}
