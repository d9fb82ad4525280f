//! Image datasets: IDX files, a synthetic generator, augmentation and batching.

mod augment;
mod idx;
mod synth;

pub use augment::{augment, augment_image, AugmentConfig};
pub use idx::{read_idx, read_idx_images, read_idx_labels, write_idx};
pub use synth::{blob_center, synth_blobs};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `N x C x H x W` bytes with one label per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<u8>,
    shape: [usize; 4],
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        shape: [usize; 4],
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(shape.to_vec()));
        }
        if images.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "dataset",
                format!("{} bytes for shape {shape:?}", images.len()),
            ));
        }
        if labels.len() != shape[0] {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for {} images", labels.len(), shape[0]),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self {
            images,
            shape,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    /// `[N, C, H, W]`
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Images `[start, start + count)` as a new dataset.
    pub fn slice(&self, start: usize, count: usize) -> Result<Self> {
        let end = (start + count).min(self.len());
        if start >= end {
            return Err(Error::Config(format!("empty slice {start}..{end} of {}", self.len())));
        }
        let n = self.image_len();
        Dataset::new(
            self.images[start * n..end * n].to_vec(),
            [end - start, self.shape[1], self.shape[2], self.shape[3]],
            self.labels[start..end].to_vec(),
            self.classes,
            self.split,
        )
    }
}

/// Per-channel `(x / 255 - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Maps bytes to `[0, 1]`.
    pub fn unit(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics of `data` after scaling to `[0, 1]`.
    pub fn fit(data: &Dataset) -> Self {
        let [n, c, h, w] = data.shape();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for (ch, px) in data.image(i).chunks_exact(plane).enumerate() {
                for &p in px {
                    let x = p as f64 / 255.0;
                    mean[ch] += x;
                    sq[ch] += x * x;
                }
            }
        }
        let m = (n * plane) as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let mu = s / m;
                (q / m - mu * mu).max(0.0).sqrt().max(1e-3)
            })
            .collect();
        Self {
            mean: mean.iter().map(|s| s / m).collect(),
            std,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization has {}/{} entries for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalization std must be positive and finite".into()));
        }
        Ok(())
    }

    /// Normalizes `images` (`N x C x plane` bytes).
    pub fn apply(&self, images: &[u8], plane: usize) -> Vec<f64> {
        let c = self.mean.len();
        images
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = (i / plane) % c;
                (p as f64 / 255.0 - self.mean[ch]) / self.std[ch]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Mini-batches over a dataset in a seeded order, last partial batch kept.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    norm: Normalization,
    augment: Option<(AugmentConfig, Rng)>,
}

/// `shuffle_seed = None` keeps dataset order.
pub fn batch_iter<'a>(
    data: &'a Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    norm: &Normalization,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    norm.validate(data.shape()[1])?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Ok(BatchIter {
        data,
        order,
        batch_size,
        pos: 0,
        norm: norm.clone(),
        augment: None,
    })
}

impl BatchIter<'_> {
    /// Augments every batch with draws from `rng`. An identity config is a no-op.
    pub fn with_augment(mut self, cfg: AugmentConfig, rng: Rng) -> Result<Self> {
        let [_, _, h, w] = self.data.shape();
        cfg.validate(h, w)?;
        if !cfg.is_identity(h, w) {
            self.augment = Some((cfg, rng));
        }
        Ok(self)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let [_, c, mut h, mut w] = self.data.shape();
        let mut bytes = Vec::with_capacity(indices.len() * self.data.image_len());
        for &i in &indices {
            bytes.extend_from_slice(self.data.image(i));
        }
        if let Some((cfg, rng)) = &mut self.augment {
            bytes = augment(&bytes, [indices.len(), c, h, w], cfg, rng).expect("validated config");
            h = cfg.crop;
            w = cfg.crop;
        }
        let x = self.norm.apply(&bytes, h * w);
        let y = indices.iter().map(|&i| self.data.labels[i]).collect();
        Some(Batch {
            x: Tensor::new(&[indices.len(), c, h, w], x).expect("non-empty batch"),
            y,
            indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images = (0..n * 4).map(|i| (i * 17 % 256) as u8).collect();
        Dataset::new(images, [n, 1, 2, 2], (0..n).map(|i| i % 3).collect(), 3, Split::Train).unwrap()
    }

    #[test]
    fn partial_final_batch() {
        let d = toy(10);
        let sizes: Vec<usize> = batch_iter(&d, 4, Some(1), &Normalization::unit(1))
            .unwrap()
            .map(|b| b.y.len())
            .collect();
        assert_eq!(sizes, [4, 4, 2]);
    }

    #[test]
    fn unit_normalization_in_range() {
        let d = toy(7);
        for b in batch_iter(&d, 3, None, &Normalization::unit(1)).unwrap() {
            assert!(b.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_bad_labels_and_batch_size() {
        assert!(matches!(
            Dataset::new(vec![0; 4], [1, 1, 2, 2], vec![3], 3, Split::Test),
            Err(Error::Label { label: 3, classes: 3 })
        ));
        assert!(batch_iter(&toy(2), 0, None, &Normalization::unit(1)).is_err());
    }

    #[test]
    fn fit_gives_zero_mean() {
        let d = toy(9);
        let norm = Normalization::fit(&d);
        let x = norm.apply(d.images(), 4);
        let mean: f64 = x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 1e-12);
    }
}
