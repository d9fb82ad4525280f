use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

const BACKGROUND: f64 = 40.0;
const AMPLITUDE: f64 = 170.0;
const NOISE: f64 = 20.0;

/// Centre `(row, col)` of the bump for class `c`: cells of a square grid
/// laid over the image, so every class sits somewhere else.
pub fn blob_center(c: usize, classes: usize, size: usize) -> (f64, f64) {
    let g = (classes as f64).sqrt().ceil() as usize;
    let margin = size as f64 / 10.0;
    let span = size as f64 - 1.0 - 2.0 * margin;
    let at = |i: usize| margin + span * (i as f64 + 0.5) / g as f64;
    (at(c / g), at(c % g))
}

/// `classes * n_per_class` single-channel `size x size` images: a Gaussian
/// bump at the class location plus Gaussian pixel noise. Labels cycle
/// through the classes. The test split uses an independent noise stream.
pub fn synth_blobs(classes: usize, n_per_class: usize, size: usize, seed: u64, split: Split) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("synth_blobs needs >= 2 classes, got {classes}")));
    }
    if size < 8 {
        return Err(Error::Config(format!("synth_blobs needs size >= 8, got {size}")));
    }
    if n_per_class == 0 {
        return Err(Error::Config("synth_blobs needs n_per_class >= 1".into()));
    }
    let sigma = size as f64 / 8.0;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let (cy, cx) = blob_center(c, classes, size);
            (0..size * size)
                .map(|p| {
                    let (y, x) = ((p / size) as f64, (p % size) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    BACKGROUND + AMPLITUDE * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        })
        .collect();
    let mut rng = Rng::new(seed).fork(match split {
        Split::Train => 0,
        Split::Test => 1,
    });
    let n = classes * n_per_class;
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &t in &templates[c] {
            images.push((t + NOISE * rng.normal()).round().clamp(0.0, 255.0) as u8);
        }
    }
    Dataset::new(images, [n, 1, size, size], labels, classes, split)
}
