//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends one node to the [`Tape`]; a node only references
//! values recorded before it, so the node list is already in topological
//! order. [`Tape::backward`] walks the list once in reverse and accumulates
//! gradients additively, which handles fan-out (a value used twice receives
//! the sum of both contributions).
//!
//! ```
//! use fixhead::autodiff::Tape;
//! use fixhead::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let y = tape.add(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
//! ```

mod conv;
mod norm;

pub use conv::Conv2dParams;
pub use norm::{BnMode, BnState};

use crate::error::{Error, Result};
use crate::kernels;
use crate::par::ExecMode;
use crate::tensor::Tensor;

use conv::ConvGeom;
use norm::BnSaved;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Scale { x: usize, alpha: usize },
    Relu { x: usize },
    Sum { x: usize },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: BnSaved,
    },
    GlobalAvgPool { x: usize },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::Transpose { x }
            | Op::Relu { x }
            | Op::Sum { x }
            | Op::GlobalAvgPool { x } => vec![x],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::Scale { x, alpha } => vec![x, alpha],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![x, w];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    out: usize,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    nodes: Vec<Node>,
    mode: ExecMode,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: ExecMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    /// Records an input value. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.needs_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last [`Tape::backward`] loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_values(&self) -> usize {
        self.values.len()
    }

    fn push(&mut self, op: Op, out: Tensor) -> Var {
        let needs = op.inputs().iter().any(|&i| self.needs_grad[i]);
        self.values.push(out);
        self.requires_grad.push(false);
        self.needs_grad.push(needs);
        self.grads.push(None);
        let out = self.values.len() - 1;
        self.nodes.push(Node { op, out });
        Var(out)
    }

    fn check_var(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 >= self.values.len() {
            return Err(Error::Contract(format!("{op}: value {} not on this tape", v.0)));
        }
        Ok(())
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a, "matmul")?;
        self.check_var(b, "matmul")?;
        let out = self.values[a.0].matmul2(&self.values[b.0])?;
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_var(x, "transpose")?;
        let out = self.values[x.0].transpose2()?;
        Ok(self.push(Op::Transpose { x: x.0 }, out))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check_var(a, op)?;
        self.check_var(b, op)?;
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, out))
    }

    /// `x[N x K] + bias[K]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_var(x, "add_bias")?;
        self.check_var(bias, "add_bias")?;
        let (vx, vb) = (&self.values[x.0], &self.values[bias.0]);
        let (_, k) = vx.dims2("add_bias")?;
        if vb.len() != k {
            return Err(Error::shape(
                "add_bias",
                format!("bias has {} entries, rows have {k}", vb.len()),
            ));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb.data()[i % k])
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push(Op::AddBias { x: x.0, bias: bias.0 }, out))
    }

    /// `alpha * x` with a scalar (one-element) `alpha`.
    pub fn scale(&mut self, x: Var, alpha: Var) -> Result<Var> {
        self.check_var(x, "scale")?;
        self.check_var(alpha, "scale")?;
        let va = &self.values[alpha.0];
        if !va.is_scalar() {
            return Err(Error::shape("scale", format!("alpha must be scalar, got {:?}", va.shape())));
        }
        let a = va.data()[0];
        let vx = &self.values[x.0];
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|v| a * v).collect())?;
        Ok(self.push(Op::Scale { x: x.0, alpha: alpha.0 }, out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_var(x, "relu")?;
        let vx = &self.values[x.0];
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|&v| v.max(0.0)).collect())?;
        Ok(self.push(Op::Relu { x: x.0 }, out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var(x, "sum")?;
        let s = self.values[x.0].data().iter().sum();
        Ok(self.push(Op::Sum { x: x.0 }, Tensor::scalar(s)))
    }

    /// Grouped 2-D convolution, `x[N x Cin x H x W]`, `w[Cout x Cin/g x kh x kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        params: Conv2dParams,
    ) -> Result<Var> {
        self.check_var(x, "conv2d")?;
        self.check_var(w, "conv2d")?;
        let geom = ConvGeom::new(self.values[x.0].shape(), self.values[w.0].shape(), params)?;
        let bias_data = match bias {
            Some(b) => {
                self.check_var(b, "conv2d")?;
                let vb = &self.values[b.0];
                if vb.len() != geom.c_out {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias has {} entries for {} output channels", vb.len(), geom.c_out),
                    ));
                }
                Some(vb.data())
            }
            None => None,
        };
        let data = conv::forward(
            &geom,
            self.values[x.0].data(),
            self.values[w.0].data(),
            bias_data,
            self.mode,
        );
        let out = Tensor::new(&geom.out_shape(), data)?;
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            bias: bias.map(|b| b.0),
            geom,
        };
        Ok(self.push(op, out))
    }

    /// Per-channel batch normalization of `x[N x C x H x W]`.
    ///
    /// In [`BnMode::Train`] the batch statistics normalize `x` and `state`'s
    /// running averages are updated; in [`BnMode::Infer`] the running averages
    /// are used and `state` is left untouched.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: BnMode,
    ) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check_var(v, "batchnorm2d")?;
        }
        let (data, saved) = norm::forward(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            state,
            mode,
        )?;
        let out = Tensor::new(self.values[x.0].shape(), data)?;
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            saved,
        };
        Ok(self.push(op, out))
    }

    /// Spatial mean per channel: `[N x C x H x W] -> [N x C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_var(x, "global_avg_pool")?;
        let vx = &self.values[x.0];
        let [n, c, h, w] = vx.dims4("global_avg_pool")?;
        let out = Tensor::new(&[n, c], channel_means(vx.data(), h * w))?;
        Ok(self.push(Op::GlobalAvgPool { x: x.0 }, out))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_var(logits, "softmax_cross_entropy")?;
        let vl = &self.values[logits.0];
        let (n, k) = vl.dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&label) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Label { label, classes: k });
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = vl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += z.ln() - (row[t] - max);
        }
        let out = Tensor::scalar(loss / n as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(op, out))
    }

    /// Back-propagates from the scalar `loss`, replacing any previous gradients.
    ///
    /// Every leaf created with `requires_grad` ends up with a gradient, zero
    /// if the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss, "backward")?;
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            if !self.needs_grad[node.out] {
                continue;
            }
            let Some(g) = grads[node.out].take() else {
                continue;
            };
            self.node_backward(node, &g, &mut grads);
            grads[node.out] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if self.requires_grad[i] && g.is_none() {
                *g = Some(vec![0.0; self.values[i].len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |i: usize| self.needs_grad[i];
        let val = |i: usize| &self.values[i];
        match &node.op {
            &Op::MatMul { a, b } => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, g, val(b).data(), &mut da);
                    accumulate(grads, a, da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, val(a).data(), g, &mut db);
                    accumulate(grads, b, db);
                }
            }
            &Op::Transpose { x } => {
                // g has the transposed shape [c x r]
                let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if needs(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let d = g.iter().zip(val(b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, a, d);
                }
                if needs(b) {
                    let d = g.iter().zip(val(a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, b, d);
                }
            }
            &Op::AddBias { x, bias } => {
                if needs(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if needs(bias) {
                    let k = val(bias).len();
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Scale { x, alpha } => {
                let a = val(alpha).data()[0];
                if needs(x) {
                    accumulate(grads, x, g.iter().map(|v| a * v).collect());
                }
                if needs(alpha) {
                    let da = g.iter().zip(val(x).data()).map(|(g, x)| g * x).sum();
                    accumulate(grads, alpha, vec![da]);
                }
            }
            &Op::Relu { x } => {
                let d = g
                    .iter()
                    .zip(val(x).data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, x, d);
            }
            &Op::Sum { x } => {
                accumulate(grads, x, vec![g[0]; val(x).len()]);
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (dx, dw, db) = conv::backward(
                    geom,
                    val(*x).data(),
                    val(*w).data(),
                    g,
                    needs(*x),
                    needs(*w),
                    bias.is_some_and(needs),
                    self.mode,
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) =
                    norm::backward(saved, val(*x).shape(), val(*gamma).data(), g);
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            &Op::GlobalAvgPool { x } => {
                let s = val(x).shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                let mut dx = vec![0.0; val(x).len()];
                for (chunk, &gv) in dx.chunks_mut(hw).zip(g) {
                    chunk.iter_mut().for_each(|d| *d = gv * inv);
                }
                accumulate(grads, x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * k + t] -= scale;
                }
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Mean of every consecutive `plane`-sized block. Shared by the pooling op and
/// the CAM export so both reduce in the same order.
pub fn channel_means(data: &[f64], plane: usize) -> Vec<f64> {
    let inv = 1.0 / plane as f64;
    data.chunks(plane)
        .map(|c| c.iter().sum::<f64>() * inv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2).unwrap());
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 1.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 2], &[0.; 4]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1., 0., 2.]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // gradient at exactly zero is zero
        assert_eq!(tape.grad(x).unwrap(), &[0., 0., 1.]);
    }

    #[test]
    fn relu_gradient_masks_negative() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1., 2.]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 1.]);
    }

    #[test]
    fn add_zero_is_identity_and_shape_checked() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3., -4.]));
        let z = tape.constant(Tensor::zeros(&[2]).unwrap());
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let w = tape.constant(Tensor::zeros(&[3]).unwrap());
        assert!(tape.add(x, w).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 2., 2.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        assert!(tape.backward(Var(99)).is_err());
    }

    #[test]
    fn unused_leaf_gets_zero_grad_and_constants_none() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let unused = tape.leaf(t(&[2], &[1., 2.]), true);
        let c = tape.constant(t(&[2], &[5., 5.]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5., 5.]);
        assert_eq!(tape.grad(unused).unwrap(), &[0., 0.]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]), true);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);

        let x = tape.constant(t(&[2, 3, 1, 1], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(tape.value(y).shape(), &[2, 3]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0., 0.]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let l = tape.constant(t(&[1, 2], &[1000., 0.]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-12);

        let l = tape.constant(t(&[1, 2], &[0., 0.]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[2]),
            Err(Error::Label { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[2, 2], &[0., 0., 0., 0.]), true);
        let loss = tape.softmax_cross_entropy(l, &[0, 1]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(l).unwrap(), &[-0.25, 0.25, 0.25, -0.25]);
    }

    #[test]
    fn scale_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]), true);
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let b = tape.leaf(t(&[2], &[10., 20.]), true);
        let y = tape.scale(x, a).unwrap();
        let y = tape.add_bias(y, b).unwrap();
        assert_eq!(tape.value(y).data(), &[12., 24., 16., 28.]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[10.]);
        assert_eq!(tape.grad(b).unwrap(), &[2., 2.]);
        assert_eq!(tape.grad(x).unwrap(), &[2.; 4]);
    }

    #[test]
    fn nodes_are_topological() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = tape.relu(x).unwrap();
        let z = tape.add(y, x).unwrap();
        let _ = tape.sum(z).unwrap();
        for node in &tape.nodes {
            assert!(node.op.inputs().iter().all(|&i| i < node.out));
        }
        assert_eq!(tape.num_nodes(), 3);
    }
}
