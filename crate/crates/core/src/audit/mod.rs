//! Exact learnable-parameter accounting for CNN architecture specs and the
//! headless transform (final convolution resized to one channel per class,
//! fully connected classifier removed).
//!
//! Specs are JSON data files (`schema: 1`). Four reference networks ship with
//! the crate, see [`shipped`].

pub mod shipped;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn rgb() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        groups: usize,
        #[serde(default)]
        bias: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm { c: usize },
    Fc {
        n_in: usize,
        n_out: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    GlobalAvgPool,
    Pool {
        #[serde(default)]
        kind: String,
        k: usize,
        stride: usize,
    },
    /// Any parameter-free elementwise stage (relu, relu6, dropout, ...).
    Activation {
        #[serde(default)]
        kind: String,
    },
    /// `branch(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        branch: Vec<LayerSpec>,
        #[serde(default)]
        shortcut: Vec<LayerSpec>,
    },
    /// Channel concatenation of branch outputs. With `split`, the input
    /// channels are divided equally between branches; otherwise every branch
    /// sees the whole input. An empty branch passes its input through.
    Concat {
        branches: Vec<Vec<LayerSpec>>,
        #[serde(default)]
        split: bool,
    },
    ChannelShuffle { groups: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub schema: u32,
    pub name: String,
    #[serde(default = "rgb")]
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels entering global average pooling.
    pub feature_dim: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub total_params: u64,
    pub classifier_params: u64,
    pub feature_params: u64,
    pub classifier_fraction: f64,
    /// Learnable parameters plus batch-norm running statistics.
    pub stored_params: u64,
    pub savings_vs_baseline: Option<f64>,
}

pub fn count_layer_params(layer: &LayerSpec) -> u64 {
    match layer {
        LayerSpec::Conv {
            c_in,
            c_out,
            kh,
            kw,
            groups,
            bias,
            ..
        } => {
            let w = (c_in / groups) * kh * kw * c_out;
            (w + if *bias { *c_out } else { 0 }) as u64
        }
        LayerSpec::BatchNorm { c } => 2 * *c as u64,
        LayerSpec::Fc { n_in, n_out, bias } => (n_in * n_out + if *bias { *n_out } else { 0 }) as u64,
        LayerSpec::GlobalAvgPool
        | LayerSpec::Pool { .. }
        | LayerSpec::Activation { .. }
        | LayerSpec::ChannelShuffle { .. } => 0,
        LayerSpec::Residual { branch, shortcut } => {
            branch.iter().chain(shortcut).map(count_layer_params).sum()
        }
        LayerSpec::Concat { branches, .. } => branches.iter().flatten().map(count_layer_params).sum(),
    }
}

/// Leaf layers in order, with residual and concat containers expanded.
pub fn flatten(layers: &[LayerSpec]) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    for layer in layers {
        match layer {
            LayerSpec::Residual { branch, shortcut } => {
                out.extend(flatten(branch));
                out.extend(flatten(shortcut));
            }
            LayerSpec::Concat { branches, .. } => {
                for b in branches {
                    out.extend(flatten(b));
                }
            }
            other => out.push(other.clone()),
        }
    }
    out
}

/// Walks `layers` from `c` input channels; returns the output channel count.
fn chain(layers: &[LayerSpec], mut c: usize, path: &str) -> Result<usize> {
    for (i, layer) in layers.iter().enumerate() {
        let at = format!("{path}[{i}]");
        c = match layer {
            LayerSpec::Conv {
                c_in,
                c_out,
                kh,
                kw,
                stride,
                groups,
                ..
            } => {
                if *c_in != c {
                    return Err(Error::spec(at, format!("conv c_in {c_in} but previous layer gives {c}")));
                }
                if *groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                    return Err(Error::spec(
                        at,
                        format!("channels {c_in}->{c_out} not divisible by groups {groups}"),
                    ));
                }
                if *kh == 0 || *kw == 0 || *stride == 0 || *c_out == 0 {
                    return Err(Error::spec(at, "conv dimensions must be >= 1"));
                }
                *c_out
            }
            LayerSpec::BatchNorm { c: bc } => {
                if *bc != c {
                    return Err(Error::spec(at, format!("batchnorm width {bc} but input has {c}")));
                }
                c
            }
            LayerSpec::Residual { branch, shortcut } => {
                let b = chain(branch, c, &format!("{at}.branch"))?;
                let s = chain(shortcut, c, &format!("{at}.shortcut"))?;
                if b != s {
                    return Err(Error::spec(
                        at,
                        format!("residual branch gives {b} channels, shortcut gives {s}"),
                    ));
                }
                b
            }
            LayerSpec::Concat { branches, split } => {
                if branches.is_empty() {
                    return Err(Error::spec(at, "concat needs at least one branch"));
                }
                let each = if *split {
                    if !c.is_multiple_of(branches.len()) {
                        return Err(Error::spec(
                            at,
                            format!("cannot split {c} channels into {} branches", branches.len()),
                        ));
                    }
                    c / branches.len()
                } else {
                    c
                };
                let mut total = 0;
                for (j, b) in branches.iter().enumerate() {
                    total += chain(b, each, &format!("{at}.branches[{j}]"))?;
                }
                total
            }
            LayerSpec::ChannelShuffle { groups } => {
                if *groups == 0 || !c.is_multiple_of(*groups) {
                    return Err(Error::spec(at, format!("cannot shuffle {c} channels in {groups} groups")));
                }
                c
            }
            LayerSpec::Pool { .. } | LayerSpec::Activation { .. } => c,
            LayerSpec::GlobalAvgPool | LayerSpec::Fc { .. } => {
                return Err(Error::spec(at, "pooling / fully connected layers only allowed at top level"));
            }
        };
    }
    Ok(c)
}

impl ArchitectureSpec {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let spec: ArchitectureSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            detail: e.to_string(),
        })?;
        if spec.schema != SCHEMA_VERSION {
            return Err(Error::Parse {
                path: origin.to_string(),
                detail: format!("field `schema`: unsupported version {}", spec.schema),
            });
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn gap_index(&self) -> Result<usize> {
        let gaps: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::GlobalAvgPool))
            .map(|(i, _)| i)
            .collect();
        match gaps[..] {
            [g] => Ok(g),
            _ => Err(Error::spec(
                self.name.clone(),
                format!("expected exactly one global_avg_pool, found {}", gaps.len()),
            )),
        }
    }

    fn fc(&self) -> Option<(usize, usize, bool)> {
        match self.layers.last() {
            Some(&LayerSpec::Fc { n_in, n_out, bias }) => Some((n_in, n_out, bias)),
            _ => None,
        }
    }

    /// Checks channel chaining, pooling/classifier placement and the header fields.
    pub fn validate(&self) -> Result<()> {
        let g = self.gap_index()?;
        let c = chain(&self.layers[..g], self.in_channels, "layers")?;
        if c != self.feature_dim {
            return Err(Error::spec(
                format!("layers[{g}]"),
                format!("{c} channels reach global_avg_pool but feature_dim is {}", self.feature_dim),
            ));
        }
        let tail = &self.layers[g + 1..];
        for (j, layer) in tail.iter().enumerate() {
            let at = format!("layers[{}]", g + 1 + j);
            match layer {
                LayerSpec::Activation { .. } => {}
                LayerSpec::Fc { n_in, .. } => {
                    if j + 1 != tail.len() {
                        return Err(Error::spec(at, "fully connected classifier must be the last layer"));
                    }
                    if *n_in != c {
                        return Err(Error::spec(at, format!("fc n_in {n_in} but pooled features have {c}")));
                    }
                }
                _ => return Err(Error::spec(at, "only activations and one fc may follow pooling")),
            }
        }
        let classes = self.fc().map_or(self.feature_dim, |(_, n_out, _)| n_out);
        if classes != self.num_classes {
            return Err(Error::spec(
                self.name.clone(),
                format!("num_classes {} but the network emits {classes} scores", self.num_classes),
            ));
        }
        Ok(())
    }

    /// Same network with a `classes`-way fully connected classifier.
    pub fn with_classes(&self, classes: usize) -> Result<Self> {
        let mut out = self.clone();
        match out.layers.last_mut() {
            Some(LayerSpec::Fc { n_out, .. }) => *n_out = classes,
            _ => {
                return Err(Error::spec(
                    self.name.clone(),
                    "no fully connected classifier to resize",
                ))
            }
        }
        out.num_classes = classes;
        out.validate()?;
        Ok(out)
    }
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<ArchitectureSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    ArchitectureSpec::from_json(&text, &path.display().to_string())
}

pub fn count_total(spec: &ArchitectureSpec) -> Result<AuditReport> {
    spec.validate()?;
    let total: u64 = spec.layers.iter().map(count_layer_params).sum();
    let classifier = spec
        .fc()
        .map_or(0, |(n_in, n_out, bias)| count_layer_params(&LayerSpec::Fc { n_in, n_out, bias }));
    let bn_buffers: u64 = flatten(&spec.layers)
        .iter()
        .map(|l| match l {
            LayerSpec::BatchNorm { c } => 2 * *c as u64,
            _ => 0,
        })
        .sum();
    Ok(AuditReport {
        total_params: total,
        classifier_params: classifier,
        feature_params: total - classifier,
        classifier_fraction: if total == 0 { 0.0 } else { classifier as f64 / total as f64 },
        stored_params: total + bn_buffers,
        savings_vs_baseline: None,
    })
}

/// `(baseline.total - variant.total) / baseline.total`
pub fn savings(baseline: &AuditReport, variant: &AuditReport) -> f64 {
    (baseline.total_params as f64 - variant.total_params as f64) / baseline.total_params as f64
}

/// Sets every batch-norm after index `from` (up to the next conv) to `width`.
fn resize_trailing_bn(layers: &mut [LayerSpec], from: usize, width: usize) {
    for layer in &mut layers[from..] {
        match layer {
            LayerSpec::BatchNorm { c } => *c = width,
            LayerSpec::Conv { .. } => break,
            _ => {}
        }
    }
}

/// Resizes the last conv in `layers` (and the batch-norms after it) to `width`.
fn resize_last_conv(layers: &mut [LayerSpec], width: usize, at: &str) -> Result<()> {
    let idx = layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
        .ok_or_else(|| Error::spec(at.to_string(), "no convolution to resize"))?;
    if let LayerSpec::Conv { c_out, groups, .. } = &mut layers[idx] {
        if *groups != 1 {
            return Err(Error::spec(
                format!("{at}[{idx}]"),
                "final convolution is grouped; cannot change its width independently",
            ));
        }
        *c_out = width;
    }
    resize_trailing_bn(layers, idx + 1, width);
    Ok(())
}

fn total_stride(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv { stride, .. } => *stride,
            _ => 1,
        })
        .product()
}

/// Removes the fully connected classifier and resizes the final convolution
/// stage to `classes` channels so pooled features are the class scores.
///
/// The final stage is the last top-level conv before pooling, or the last
/// conv inside the last residual block before pooling. For a residual block
/// the shortcut follows: an existing projection is resized, and an identity
/// shortcut whose width no longer matches becomes a 1x1 projection conv
/// (stride of the block, no bias) plus batch-norm. Batch-norms following the
/// resized conv are resized with it.
pub fn headless_transform(spec: &ArchitectureSpec, classes: usize) -> Result<ArchitectureSpec> {
    spec.validate()?;
    if classes == 0 || classes > spec.feature_dim {
        return Err(Error::Dimension(format!(
            "{} classes cannot be read from {} final channels",
            classes, spec.feature_dim
        )));
    }
    let mut out = spec.clone();
    let g = out.gap_index()?;
    let stage = out.layers[..g]
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Residual { .. } | LayerSpec::Concat { .. }))
        .ok_or_else(|| Error::spec(spec.name.clone(), "no convolution before pooling"))?;
    let block_in = chain(&out.layers[..stage], out.in_channels, "layers")?;
    let at = format!("layers[{stage}]");
    match &mut out.layers[stage] {
        LayerSpec::Conv { .. } => resize_last_conv(&mut out.layers[..=stage], classes, "layers")?,
        LayerSpec::Residual { branch, shortcut } => {
            resize_last_conv(branch, classes, &format!("{at}.branch"))?;
            if shortcut.is_empty() {
                if block_in != classes {
                    *shortcut = vec![
                        LayerSpec::Conv {
                            c_in: block_in,
                            c_out: classes,
                            kh: 1,
                            kw: 1,
                            stride: total_stride(branch),
                            groups: 1,
                            bias: false,
                        },
                        LayerSpec::BatchNorm { c: classes },
                    ];
                }
            } else {
                resize_last_conv(shortcut, classes, &format!("{at}.shortcut"))?;
            }
        }
        _ => {
            return Err(Error::spec(
                at,
                "final stage is a concat block; headless transform not supported",
            ))
        }
    }
    resize_trailing_bn(&mut out.layers[..g], stage + 1, classes);
    if out.fc().is_some() {
        out.layers.pop();
    }
    // drop now-dangling post-pooling layers (dropout before the removed classifier)
    out.layers.truncate(g + 1);
    out.feature_dim = classes;
    out.num_classes = classes;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(c_in: usize, c_out: usize, k: usize) -> LayerSpec {
        LayerSpec::Conv {
            c_in,
            c_out,
            kh: k,
            kw: k,
            stride: 1,
            groups: 1,
            bias: false,
        }
    }

    fn tiny(fc: bool) -> ArchitectureSpec {
        let mut layers = vec![
            conv(3, 8, 3),
            LayerSpec::BatchNorm { c: 8 },
            LayerSpec::Activation { kind: "relu".into() },
            LayerSpec::Residual {
                branch: vec![conv(8, 8, 3), LayerSpec::BatchNorm { c: 8 }],
                shortcut: vec![],
            },
            LayerSpec::GlobalAvgPool,
        ];
        if fc {
            layers.push(LayerSpec::Fc {
                n_in: 8,
                n_out: 4,
                bias: true,
            });
        }
        ArchitectureSpec {
            schema: 1,
            name: "tiny".into(),
            in_channels: 3,
            num_classes: if fc { 4 } else { 8 },
            feature_dim: 8,
            layers,
        }
    }

    #[test]
    fn layer_formulas() {
        let stem = LayerSpec::Conv {
            c_in: 3,
            c_out: 64,
            kh: 7,
            kw: 7,
            stride: 2,
            groups: 1,
            bias: false,
        };
        assert_eq!(count_layer_params(&stem), 9_408);
        let fc = LayerSpec::Fc {
            n_in: 512,
            n_out: 1000,
            bias: true,
        };
        assert_eq!(count_layer_params(&fc), 513_000);
        let dw = LayerSpec::Conv {
            c_in: 32,
            c_out: 32,
            kh: 3,
            kw: 3,
            stride: 1,
            groups: 32,
            bias: false,
        };
        assert_eq!(count_layer_params(&dw), 288);
        assert_eq!(count_layer_params(&LayerSpec::BatchNorm { c: 10 }), 20);
    }

    #[test]
    fn no_fc_means_no_classifier() {
        let r = count_total(&tiny(false)).unwrap();
        assert_eq!(r.classifier_params, 0);
        assert_eq!(r.classifier_fraction, 0.0);
    }

    #[test]
    fn chaining_error_names_layer() {
        let mut s = tiny(true);
        s.layers[3] = LayerSpec::Residual {
            branch: vec![conv(7, 8, 3)],
            shortcut: vec![],
        };
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("layers[3].branch[0]"), "{err}");
    }

    #[test]
    fn missing_layers_field_is_parse_error() {
        let err = ArchitectureSpec::from_json(
            r#"{"schema": 1, "name": "x", "num_classes": 2, "feature_dim": 2}"#,
            "inline",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("layers"), "{err}");
    }

    #[test]
    fn headless_adds_projection_for_identity_shortcut() {
        let h = headless_transform(&tiny(true), 4).unwrap();
        assert_eq!(h.feature_dim, 4);
        assert!(h.fc().is_none());
        match &h.layers[3] {
            LayerSpec::Residual { shortcut, .. } => assert_eq!(shortcut.len(), 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(headless_transform(&h, 4).unwrap(), h);
    }

    #[test]
    fn headless_rejects_too_many_classes() {
        assert!(matches!(headless_transform(&tiny(true), 9), Err(Error::Dimension(_))));
    }
}
