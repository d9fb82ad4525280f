//! Batch normalization over `N x C x H x W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running statistics carried between batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    /// Unbiased (n - 1) estimate, like the reference implementations.
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: BnMode,
}

pub(crate) fn forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut BnState,
    mode: BnMode,
) -> Result<(Vec<f64>, BnSaved)> {
    let [n, c, h, w] = x.dims4("batchnorm2d")?;
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "{c} channels but gamma={}, beta={}, running stats={}",
                gamma.len(),
                beta.len(),
                state.channels()
            ),
        ));
    }
    let plane = h * w;
    let m = n * plane;
    let xd = x.data();
    let mut inv_std = vec![0.0; c];
    let mut means = vec![0.0; c];
    match mode {
        BnMode::Train => {
            if m < 2 {
                return Err(Error::DegenerateStatistics(m));
            }
            for ch in 0..c {
                let values = || (0..n).flat_map(move |s| &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
                let mean = values().sum::<f64>() / m as f64;
                let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                means[ch] = mean;
                inv_std[ch] = 1.0 / (var + state.eps).sqrt();
                let mom = state.momentum;
                state.running_mean[ch] = (1.0 - mom) * state.running_mean[ch] + mom * mean;
                let unbiased = var * m as f64 / (m - 1) as f64;
                state.running_var[ch] = (1.0 - mom) * state.running_var[ch] + mom * unbiased;
            }
        }
        BnMode::Infer => {
            for ch in 0..c {
                means[ch] = state.running_mean[ch];
                inv_std[ch] = 1.0 / (state.running_var[ch] + state.eps).sqrt();
            }
        }
    }
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + plane {
                let xh = (xd[i] - means[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    Ok((out, BnSaved { xhat, inv_std, mode }))
}

pub(crate) fn backward(
    saved: &BnSaved,
    shape: &[usize],
    gamma: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for (g, xh) in dy[base..base + plane].iter().zip(&saved.xhat[base..base + plane]) {
                dbeta[ch] += g;
                dgamma[ch] += g * xh;
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let scale = gamma[ch] * saved.inv_std[ch];
            for i in base..base + plane {
                dx[i] = match saved.mode {
                    BnMode::Train => {
                        scale * (dy[i] - dbeta[ch] / m - saved.xhat[i] * dgamma[ch] / m)
                    }
                    BnMode::Infer => scale * dy[i],
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn two_point_normalization() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::new(&[1], vec![2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let mut st = BnState::new(1);
        let y = tape.batchnorm2d(x, g, b, &mut st, BnMode::Train).unwrap();
        let s = 1.0 / (1.0_f64 + 1e-5).sqrt();
        let want = [-s * 2.0 + 0.5, s * 2.0 + 0.5];
        for (a, w) in tape.value(y).data().iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
        // running stats: mean 0.9*0 + 0.1*2, var 0.9*1 + 0.1*2 (unbiased var of {1,3})
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((st.running_var[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn infer_with_default_stats_scales_input() {
        let mut tape = Tape::new();
        let data = vec![0.5, -2.0, 3.0, 4.0];
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], data.clone()).unwrap());
        let g = tape.constant(Tensor::ones(&[1]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let mut st = BnState::new(1);
        let before = st.clone();
        let y = tape.batchnorm2d(x, g, b, &mut st, BnMode::Infer).unwrap();
        let k = 1.0 / (1.0_f64 + 1e-5).sqrt();
        for (a, x) in tape.value(y).data().iter().zip(&data) {
            assert!((a - x * k).abs() < 1e-15);
        }
        assert_eq!(st, before);
    }

    #[test]
    fn single_element_train_batch_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]).unwrap());
        let g = tape.constant(Tensor::ones(&[2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        let mut st = BnState::new(2);
        assert!(matches!(
            tape.batchnorm2d(x, g, b, &mut st, BnMode::Train),
            Err(Error::DegenerateStatistics(1))
        ));
    }
}
