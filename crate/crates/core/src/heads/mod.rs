//! Output classifier heads: learned, fixed orthogonal, fixed Hadamard and
//! fixed identity (no head at all).
//!
//! Weight matrices are `classes x in_features` (rows are classes), so the
//! forward pass is `y = x W^T + b` on a batch `x[N x in_features]`.

mod hadamard;
mod qr;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use hadamard::{hadamard_matrix, sylvester_exponent, HadamardMatrix};
pub use qr::householder_qr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(alias = "learned")]
    Learned,
    #[serde(alias = "fixed_orthogonal")]
    FixedOrthogonal,
    #[serde(alias = "fixed_hadamard")]
    FixedHadamard,
    #[serde(alias = "fixed_identity")]
    FixedIdentity,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Learned,
        HeadKind::FixedOrthogonal,
        HeadKind::FixedHadamard,
        HeadKind::FixedIdentity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Learned => "Learned",
            HeadKind::FixedOrthogonal => "FixedOrthogonal",
            HeadKind::FixedHadamard => "FixedHadamard",
            HeadKind::FixedIdentity => "FixedIdentity",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    /// Accepts the canonical names and their snake_case / lowercase forms.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '_' && *c != '-').collect();
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| Error::Config(format!("unknown head kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub trainable_param_count: usize,
    pub stored_param_count: usize,
    pub duplicate_row_count: usize,
    /// 0-indexed `(i, j)` with `i < j`; add one to each index for 1-indexed reporting.
    pub duplicate_pairs: Vec<(usize, usize)>,
}

impl HeadReport {
    pub fn one_indexed_pairs(&self) -> Vec<(usize, usize)> {
        self.duplicate_pairs.iter().map(|&(i, j)| (i + 1, j + 1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub in_features: usize,
    pub classes: usize,
    /// `classes x in_features`. For the Hadamard head the entries are exactly `+-1`.
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub alpha: Option<Parameter>,
}

/// Tape handles created by [`Head::forward`].
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub logits: Var,
    weight: Option<Var>,
    bias: Option<Var>,
    alpha: Option<Var>,
}

/// Builds a head with its construction report.
///
/// * `Learned`: `W ~ N(0, 2 / in_features)`, `b = 0`.
/// * `FixedOrthogonal`: Householder QR of a standard normal square matrix of
///   order `max(in_features, classes)`; `W` is the leading `classes x
///   in_features` block of `Q`, so its rows are orthonormal when `classes <=
///   in_features` and its columns are orthonormal otherwise. Fixed `W`,
///   trainable `b = 0`.
/// * `FixedHadamard`: leading `classes x in_features` block of the Sylvester
///   matrix of order `2^ceil(log2 max(in_features, classes))`. Fixed `W`,
///   trainable `alpha = 1` and `b = 0`. The forward pass scales by
///   `1 / sqrt(in_features)`.
/// * `FixedIdentity`: `W = I`, no bias, no scale; needs `in_features == classes`.
pub fn build_head(
    kind: HeadKind,
    in_features: usize,
    classes: usize,
    rng: &mut Rng,
) -> Result<(Head, HeadReport)> {
    if in_features == 0 || classes == 0 {
        return Err(Error::Dimension(format!(
            "head needs in_features >= 1 and classes >= 1, got {in_features} and {classes}"
        )));
    }
    let zeros_bias = || Tensor::zeros(&[classes]).map(Parameter::trainable);
    let head = match kind {
        HeadKind::Learned => {
            let std = (2.0 / in_features as f64).sqrt();
            let mut w = Tensor::randn(&[classes, in_features], rng)?;
            w.data_mut().iter_mut().for_each(|v| *v *= std);
            Head {
                kind,
                in_features,
                classes,
                weight: Parameter::trainable(w),
                bias: Some(zeros_bias()?),
                alpha: None,
            }
        }
        HeadKind::FixedOrthogonal => {
            let order = in_features.max(classes);
            let (q, _) = householder_qr(&Tensor::randn(&[order, order], rng)?)?;
            let mut w = Vec::with_capacity(classes * in_features);
            for i in 0..classes {
                w.extend_from_slice(&q.row(i)[..in_features]);
            }
            Head {
                kind,
                in_features,
                classes,
                weight: Parameter::fixed(Tensor::new(&[classes, in_features], w)?),
                bias: Some(zeros_bias()?),
                alpha: None,
            }
        }
        HeadKind::FixedHadamard => {
            let h = hadamard_matrix(1 << sylvester_exponent(in_features, classes))?;
            let mut w = Vec::with_capacity(classes * in_features);
            for i in 0..classes {
                w.extend(h.row(i)[..in_features].iter().map(|&v| f64::from(v)));
            }
            Head {
                kind,
                in_features,
                classes,
                weight: Parameter::fixed(Tensor::new(&[classes, in_features], w)?),
                bias: Some(zeros_bias()?),
                alpha: Some(Parameter::trainable(Tensor::scalar(1.0))),
            }
        }
        HeadKind::FixedIdentity => {
            if in_features != classes {
                return Err(Error::Dimension(format!(
                    "identity head cannot map {in_features} features to {classes} classes; \
                     the final convolution must have exactly one channel per class"
                )));
            }
            Head {
                kind,
                in_features,
                classes,
                weight: Parameter::fixed(Tensor::eye(classes)?),
                bias: None,
                alpha: None,
            }
        }
    };
    let report = head.report();
    Ok((head, report))
}

/// All `(i, j)`, `i < j`, whose rows compare equal, in lexicographic order.
pub fn detect_duplicate_rows(w: &Tensor) -> Vec<(usize, usize)> {
    let rows = w.shape()[0];
    let mut groups: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
    for i in 0..rows {
        let row = w.row(i);
        if row.iter().any(|v| v.is_nan()) {
            continue;
        }
        // +0.0 normalizes -0.0 so the key matches float equality
        let key = row.iter().map(|&v| (v + 0.0).to_bits()).collect();
        groups.entry(key).or_default().push(i);
    }
    let mut pairs: Vec<(usize, usize)> = groups
        .values()
        .filter(|g| g.len() > 1)
        .flat_map(|g| {
            g.iter()
                .enumerate()
                .flat_map(move |(a, &i)| g[a + 1..].iter().map(move |&j| (i, j)))
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Number of trainable scalars in the head.
pub fn trainable_params(head: &Head) -> usize {
    head.params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.len())
        .sum()
}

impl Head {
    fn params(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .chain(self.alpha.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .chain(self.alpha.as_mut())
            .collect()
    }

    /// Values that must be stored to run the head. The identity head stores nothing.
    pub fn stored_params(&self) -> usize {
        match self.kind {
            HeadKind::FixedIdentity => 0,
            _ => self.params().iter().map(|p| p.len()).sum(),
        }
    }

    pub fn report(&self) -> HeadReport {
        let duplicate_pairs = match self.kind {
            HeadKind::FixedIdentity => Vec::new(),
            _ => detect_duplicate_rows(&self.weight.value),
        };
        let mut dup_rows: Vec<usize> = duplicate_pairs.iter().map(|&(_, j)| j).collect();
        dup_rows.dedup();
        dup_rows.sort_unstable();
        dup_rows.dedup();
        HeadReport {
            trainable_param_count: trainable_params(self),
            stored_param_count: self.stored_params(),
            duplicate_row_count: dup_rows.len(),
            duplicate_pairs,
        }
    }

    /// Fixed `1 / sqrt(in_features)` normalization of the Hadamard head.
    pub fn hadamard_scale(&self) -> f64 {
        1.0 / (self.in_features as f64).sqrt()
    }

    /// Records the head on `tape` for a batch `x[N x in_features]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<HeadVars> {
        let (_, f) = tape.value(x).dims2("head_forward")?;
        if f != self.in_features {
            return Err(Error::shape(
                "head_forward",
                format!("head expects {} features, input has {f}", self.in_features),
            ));
        }
        if self.kind == HeadKind::FixedIdentity {
            return Ok(HeadVars {
                logits: x,
                weight: None,
                bias: None,
                alpha: None,
            });
        }
        let w = self.weight.bind(tape);
        let wt = tape.transpose(w)?;
        let mut y = tape.matmul(x, wt)?;
        let mut alpha_var = None;
        if let Some(alpha) = &self.alpha {
            let s = tape.constant(Tensor::scalar(self.hadamard_scale()));
            y = tape.scale(y, s)?;
            let a = alpha.bind(tape);
            y = tape.scale(y, a)?;
            alpha_var = Some(a);
        }
        let mut bias_var = None;
        if let Some(bias) = &self.bias {
            let b = bias.bind(tape);
            y = tape.add_bias(y, b)?;
            bias_var = Some(b);
        }
        Ok(HeadVars {
            logits: y,
            weight: Some(w),
            bias: bias_var,
            alpha: alpha_var,
        })
    }

    /// Tape-free forward pass.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn absorb_grads(&mut self, tape: &Tape, vars: &HeadVars) {
        if let Some(w) = vars.weight {
            self.weight.absorb_grad(tape, w);
        }
        if let (Some(p), Some(v)) = (self.bias.as_mut(), vars.bias) {
            p.absorb_grad(tape, v);
        }
        if let (Some(p), Some(v)) = (self.alpha.as_mut(), vars.alpha) {
            p.absorb_grad(tape, v);
        }
    }
}
