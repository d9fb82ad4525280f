//! Trainable and fixed parameters and the SGD update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    /// Fixed parameters are never modified by [`sgd_step`].
    pub trainable: bool,
    pub grad: Option<Vec<f64>>,
    pub momentum: Option<Vec<f64>>,
}

impl Parameter {
    pub fn trainable(value: Tensor) -> Self {
        Self {
            value,
            trainable: true,
            grad: None,
            momentum: None,
        }
    }

    pub fn fixed(value: Tensor) -> Self {
        Self {
            value,
            trainable: false,
            grad: None,
            momentum: None,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Records the current value on `tape`; only trainable parameters track gradients.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.leaf(self.value.clone(), self.trainable)
    }

    /// Adds the gradient computed on `tape` for `var` into `self.grad`.
    pub fn absorb_grad(&mut self, tape: &Tape, var: Var) {
        if !self.trainable {
            return;
        }
        if let Some(g) = tape.grad(var) {
            match &mut self.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => self.grad = Some(g.to_vec()),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum * v + grad + weight_decay * value; value <- value - lr * v`.
///
/// Fixed parameters are skipped. All gradients are cleared afterwards. Fails
/// without touching anything if a trainable parameter has no gradient.
pub fn sgd_step(params: &mut [&mut Parameter], cfg: &SgdConfig) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.trainable && p.grad.is_none()) {
        return Err(Error::Contract(format!("trainable parameter #{i} has no gradient")));
    }
    for p in params.iter_mut() {
        if p.trainable {
            let grad = p.grad.as_ref().expect("checked above");
            let buf = p.momentum.get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((v, w), g) in buf.iter_mut().zip(p.value.data_mut()).zip(grad) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                *w -= cfg.lr * *v;
            }
        }
        p.grad = None;
    }
    Ok(())
}
