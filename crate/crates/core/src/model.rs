//! Small CNN presets with a pluggable classifier head.

use serde::{Deserialize, Serialize};

use crate::audit::{ArchitectureSpec, LayerSpec};
use crate::autodiff::{BnMode, BnState, Conv2dParams, Tape, Var};
use crate::error::{Error, Result};
use crate::heads::{build_head, Head, HeadKind, HeadReport, HeadVars};
use crate::param::Parameter;
use crate::par::ExecMode;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TINY3: &str = "tiny3";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    /// Requested block widths. With the identity head the last one is
    /// replaced by the class count.
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub classes: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn tiny3(head: HeadKind, classes: usize, in_channels: usize) -> Self {
        Self {
            preset: TINY3.into(),
            widths: vec![16, 32, 64],
            in_channels,
            classes,
            head,
        }
    }

    /// Widths actually built.
    pub fn effective_widths(&self) -> Result<Vec<usize>> {
        if self.preset != TINY3 {
            return Err(Error::Config(format!("unknown preset `{}` (available: {TINY3})", self.preset)));
        }
        if self.widths.len() != 3 || self.widths.contains(&0) {
            return Err(Error::Config(format!("{TINY3} needs three non-zero widths, got {:?}", self.widths)));
        }
        if self.classes < 1 || self.in_channels < 1 {
            return Err(Error::Config("classes and in_channels must be >= 1".into()));
        }
        let mut w = self.widths.clone();
        if self.head == HeadKind::FixedIdentity {
            let last = w[2];
            if self.classes > last {
                return Err(Error::Dimension(format!(
                    "identity head needs {} final channels but the preset is only {last} wide",
                    self.classes
                )));
            }
            w[2] = self.classes;
        }
        Ok(w)
    }
}

/// conv 3x3 stride 2 (no bias) -> batch norm -> ReLU
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: Parameter,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub bn: BnState,
}

pub const BLOCK_CONV: Conv2dParams = Conv2dParams {
    stride: 2,
    padding: 1,
    groups: 1,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub head_report: HeadReport,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub logits: Var,
    /// Last block output, before pooling.
    pub features: Var,
    blocks: Vec<[Var; 3]>,
    head: HeadVars,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let widths = config.effective_widths()?;
    let mut rng = Rng::new(seed).fork(0x6d6f_6465);
    let mut blocks = Vec::new();
    let mut c_in = config.in_channels;
    for &c_out in &widths {
        let fan_in = (c_in * 9) as f64;
        let mut w = Tensor::randn(&[c_out, c_in, 3, 3], &mut rng)?;
        let std = (2.0 / fan_in).sqrt();
        w.data_mut().iter_mut().for_each(|v| *v *= std);
        blocks.push(Block {
            conv: Parameter::trainable(w),
            gamma: Parameter::trainable(Tensor::ones(&[c_out])?),
            beta: Parameter::trainable(Tensor::zeros(&[c_out])?),
            bn: BnState::new(c_out),
        });
        c_in = c_out;
    }
    let (head, head_report) = build_head(config.head, c_in, config.classes, &mut rng)?;
    Ok(Model {
        config: config.clone(),
        blocks,
        head,
        head_report,
    })
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        self.head.in_features
    }

    /// Records a forward pass of `x[N x C x H x W]`. Train mode updates the
    /// batch-norm running statistics.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, mode: BnMode) -> Result<ModelVars> {
        let mut h = tape.constant(x.clone());
        let mut bound = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let w = b.conv.bind(tape);
            let g = b.gamma.bind(tape);
            let be = b.beta.bind(tape);
            h = tape.conv2d(h, w, None, BLOCK_CONV)?;
            h = tape.batchnorm2d(h, g, be, &mut b.bn, mode)?;
            h = tape.relu(h)?;
            bound.push([w, g, be]);
        }
        let pooled = tape.global_avg_pool(h)?;
        let head = self.head.forward(tape, pooled)?;
        Ok(ModelVars {
            logits: head.logits,
            features: h,
            blocks: bound,
            head,
        })
    }

    /// Inference-mode `(features, logits)` without touching any state.
    pub fn infer(&self, x: &Tensor, exec: ExecMode) -> Result<(Tensor, Tensor)> {
        let mut scratch = self.clone();
        let mut tape = Tape::with_mode(exec);
        let vars = scratch.forward(&mut tape, x, BnMode::Infer)?;
        Ok((tape.value(vars.features).clone(), tape.value(vars.logits).clone()))
    }

    pub fn logits(&self, x: &Tensor, exec: ExecMode) -> Result<Tensor> {
        Ok(self.infer(x, exec)?.1)
    }

    pub fn absorb_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        for (b, [w, g, be]) in self.blocks.iter_mut().zip(&vars.blocks) {
            b.conv.absorb_grad(tape, *w);
            b.gamma.absorb_grad(tape, *g);
            b.beta.absorb_grad(tape, *be);
        }
        self.head.absorb_grads(tape, &vars.head);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Parameters with stable names, in the order of [`Model::params_mut`].
    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &b.conv));
            out.push((format!("bn{}.gamma", i + 1), &b.gamma));
            out.push((format!("bn{}.beta", i + 1), &b.beta));
        }
        out.push(("head.weight".into(), &self.head.weight));
        if let Some(p) = &self.head.bias {
            out.push(("head.bias".into(), p));
        }
        if let Some(p) = &self.head.alpha {
            out.push(("head.alpha".into(), p));
        }
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }

    /// Fixed parameters as raw bits, for immutability checks.
    pub fn fixed_snapshot(&self) -> Vec<(String, Vec<u64>)> {
        self.named_params()
            .into_iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n, p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    /// The network as an auditable spec. Non-identity heads appear as a
    /// biased fully connected layer.
    pub fn arch_spec(&self) -> ArchitectureSpec {
        let mut layers = Vec::new();
        let mut c_in = self.config.in_channels;
        for b in &self.blocks {
            let c_out = b.bn.running_mean.len();
            layers.push(LayerSpec::Conv {
                c_in,
                c_out,
                kh: 3,
                kw: 3,
                stride: 2,
                groups: 1,
                bias: false,
            });
            layers.push(LayerSpec::BatchNorm { c: c_out });
            layers.push(LayerSpec::Activation { kind: "relu".into() });
            c_in = c_out;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        if self.head.kind != HeadKind::FixedIdentity {
            layers.push(LayerSpec::Fc {
                n_in: c_in,
                n_out: self.config.classes,
                bias: true,
            });
        }
        ArchitectureSpec {
            schema: crate::audit::SCHEMA_VERSION,
            name: format!("{}-{}", self.config.preset, self.head.kind.as_str()),
            in_channels: self.config.in_channels,
            num_classes: self.config.classes,
            feature_dim: c_in,
            layers,
        }
    }
}
