//! Optimizers and learning-rate schedules for the training loops.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer as _, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Lars,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// LARS momentum.
    pub momentum: f64,
    /// LARS trust coefficient.
    pub eta: f64,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            betas,
            weight_decay,
            momentum: 0.9,
            eta: 0.001,
        }
    }
}

/// Layer-wise adaptive rate scaling with heavy-ball momentum. Parameters with
/// zero norm (for example zero-initialised LoRA factors) use a trust ratio of 1.
pub struct Lars {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    eta: f64,
}

impl Lars {
    pub fn new(vars: Vec<Var>, cfg: &OptimizerConfig) -> Self {
        let n = vars.len();
        Self {
            vars,
            velocity: vec![None; n],
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            eta: cfg.eta,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let w = var.as_tensor();
            // biases and norms are excluded from decay and adaptation
            let adapt = w.rank() > 1;
            let g = if adapt && self.weight_decay > 0.0 {
                (g + (w * self.weight_decay)?)?
            } else {
                g.clone()
            };
            let trust = if adapt {
                let wn = w.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?.sqrt();
                let gn = g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?.sqrt();
                if wn > 0.0 && gn > 0.0 {
                    self.eta * wn / gn
                } else {
                    1.0
                }
            } else {
                1.0
            };
            let upd = (g * (self.lr * trust))?;
            let v = match vel.take() {
                Some(v) => ((v * self.momentum)? + upd)?,
                None => upd,
            };
            var.set(&(w - &v)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

enum Inner {
    AdamW(AdamW),
    Lars(Lars),
}

pub struct Optimizer {
    inner: Inner,
    lr: f64,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, cfg: &OptimizerConfig) -> Result<Self> {
        let inner = match cfg.kind {
            OptimizerKind::AdamW => Inner::AdamW(AdamW::new(
                vars,
                ParamsAdamW {
                    lr: cfg.lr,
                    beta1: cfg.betas.0,
                    beta2: cfg.betas.1,
                    eps: 1e-8,
                    weight_decay: cfg.weight_decay,
                },
            )?),
            OptimizerKind::Lars => Inner::Lars(Lars::new(vars, cfg)),
        };
        Ok(Self { inner, lr: cfg.lr })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
        match &mut self.inner {
            Inner::AdamW(o) => o.set_learning_rate(lr),
            Inner::Lars(o) => o.lr = lr,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match &mut self.inner {
            Inner::AdamW(o) => o.step(grads)?,
            Inner::Lars(o) => o.step(grads)?,
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Moving average with the given window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Mean of the first and last `window` entries.
pub fn first_last_window(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let w = window.clamp(1, values.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..w]), mean(&values[values.len() - w..])))
}
