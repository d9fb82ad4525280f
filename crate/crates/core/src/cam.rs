//! Class activation maps from the identity head: each final channel is the
//! spatial map of one class score.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::channel_means;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::heads::HeadKind;
use crate::model::Model;
use crate::par::ExecMode;
use crate::tensor::Tensor;

/// Largest allowed `|mean(map) - logit|`.
pub const CAM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub image_id: String,
    /// `classes x height x width`
    pub maps: Tensor,
    pub logits: Vec<f64>,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub image_id: String,
    pub predicted: usize,
    pub logits: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub files: Vec<String>,
    #[serde(default)]
    pub label: Option<usize>,
}

/// Per-class maps for one normalized image `x[1 x C x H x W]`.
pub fn class_maps(model: &Model, x: &Tensor, image_id: &str, exec: ExecMode) -> Result<Heatmap> {
    if model.head.kind != HeadKind::FixedIdentity {
        return Err(Error::UnsupportedHead(
            model.head.kind.to_string(),
            "class maps are only available for the identity head",
        ));
    }
    let [n, ..] = x.dims4("class_maps")?;
    if n != 1 {
        return Err(Error::shape("class_maps", format!("expected one image, got {n}")));
    }
    let (features, logits) = model.infer(x, exec)?;
    let [_, k, h, w] = features.dims4("class_maps")?;
    let means = channel_means(features.data(), h * w);
    for (c, (m, l)) in means.iter().zip(logits.data()).enumerate() {
        if (m - l).abs() > CAM_TOLERANCE {
            return Err(Error::Contract(format!("map mean {m} differs from logit {l} for class {c}")));
        }
    }
    let predicted = logits.argmax_rows()[0];
    Ok(Heatmap {
        image_id: image_id.to_string(),
        maps: Tensor::new(&[k, h, w], features.into_data())?,
        logits: logits.into_data(),
        predicted,
    })
}

/// Min-max scaling to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(map: &[f64]) -> Vec<u8> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; map.len()];
    }
    map.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary greyscale PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a file written by [`encode_pgm`]: `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos + 1..)?;
    (data.len() == w * h).then(|| (w, h, data.to_vec()))
}

/// Writes `{id}_class{c}.pgm` for every class and `{id}.json`. Returns the
/// sidecar path.
pub fn write_heatmap(heatmap: &Heatmap, out_dir: impl AsRef<Path>, label: Option<usize>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let [k, h, w] = [heatmap.maps.shape()[0], heatmap.maps.shape()[1], heatmap.maps.shape()[2]];
    let mut files = Vec::with_capacity(k);
    for c in 0..k {
        let name = format!("{}_class{c}.pgm", heatmap.image_id);
        let map = &heatmap.maps.data()[c * h * w..(c + 1) * h * w];
        write_atomic(&out_dir.join(&name), &encode_pgm(w, h, &to_gray(map)))?;
        files.push(name);
    }
    let sidecar = HeatmapSidecar {
        image_id: heatmap.image_id.clone(),
        predicted: heatmap.predicted,
        logits: heatmap.logits.clone(),
        height: h,
        width: w,
        files,
        label,
    };
    let path = out_dir.join(format!("{}.json", heatmap.image_id));
    write_atomic(&path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(path)
}

/// [`class_maps`] followed by [`write_heatmap`].
pub fn export_cam(
    model: &Model,
    x: &Tensor,
    image_id: &str,
    out_dir: impl AsRef<Path>,
    label: Option<usize>,
    exec: ExecMode,
) -> Result<Heatmap> {
    let hm = class_maps(model, x, image_id, exec)?;
    write_heatmap(&hm, out_dir, label)?;
    Ok(hm)
}
