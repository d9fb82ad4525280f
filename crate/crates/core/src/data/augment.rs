use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Zero-pad, random horizontal flip, random crop. `crop = 0` means the
/// input size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop: usize,
    pub hflip_prob: f64,
}

impl AugmentConfig {
    /// Pad 4, flip half the time, crop back to `size`.
    pub fn standard(size: usize) -> Self {
        Self {
            pad: 4,
            crop: size,
            hflip_prob: 0.5,
        }
    }

    pub(crate) fn resolved(mut self, h: usize) -> Self {
        if self.crop == 0 {
            self.crop = h;
        }
        self
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let crop = self.resolved(h).crop;
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} not in [0, 1]", self.hflip_prob)));
        }
        if crop > h + 2 * self.pad || crop > w + 2 * self.pad {
            return Err(Error::Config(format!(
                "crop {crop} larger than padded image {}x{}",
                h + 2 * self.pad,
                w + 2 * self.pad
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self, h: usize, w: usize) -> bool {
        let c = self.resolved(h);
        c.pad == 0 && c.hflip_prob == 0.0 && c.crop == h && c.crop == w
    }
}

/// One image (`c x h x w`) with explicit choices: output pixel `(y, x)` is
/// padded pixel `(dy + y, dx + x)`, after an optional horizontal mirror of
/// the padded image.
pub fn augment_image(
    img: &[u8],
    [c, h, w]: [usize; 3],
    pad: usize,
    crop: usize,
    flip: bool,
    dy: usize,
    dx: usize,
) -> Vec<u8> {
    let pw = w + 2 * pad;
    let mut out = vec![0u8; c * crop * crop];
    for ch in 0..c {
        for y in 0..crop {
            let sy = (dy + y) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..crop {
                let px = if flip { pw - 1 - (dx + x) } else { dx + x };
                let sx = px as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * crop + y) * crop + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Augments a batch of `N x C x H x W` bytes; returns `N x C x crop x crop`.
/// Per image the draws are: flip, row offset, column offset.
pub fn augment(images: &[u8], [n, c, h, w]: [usize; 4], cfg: &AugmentConfig, rng: &mut Rng) -> Result<Vec<u8>> {
    cfg.validate(h, w)?;
    let cfg = cfg.resolved(h);
    if cfg.is_identity(h, w) {
        return Ok(images.to_vec());
    }
    let len = c * h * w;
    let mut out = Vec::with_capacity(n * c * cfg.crop * cfg.crop);
    for i in 0..n {
        let flip = rng.bernoulli(cfg.hflip_prob);
        let dy = rng.below((h + 2 * cfg.pad - cfg.crop + 1) as u64) as usize;
        let dx = rng.below((w + 2 * cfg.pad - cfg.crop + 1) as u64) as usize;
        out.extend(augment_image(
            &images[i * len..(i + 1) * len],
            [c, h, w],
            cfg.pad,
            cfg.crop,
            flip,
            dy,
            dx,
        ));
    }
    Ok(out)
}
