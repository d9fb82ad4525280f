//! IDX files: big-endian magic `0x0000_08dd` (unsigned bytes, `dd` dims),
//! then one big-endian u32 per dimension, then the payload. Gzip input is
//! detected from its magic bytes.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

const U8_TYPE: u8 = 0x08;

fn load(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad gzip stream: {e}"),
        })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Returns `(dims, payload)` after checking magic and payload length.
fn parse(path: &Path, bytes: &[u8], allowed_dims: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != U8_TYPE || !allowed_dims.contains(&bytes[3]) {
        return Err(fmt(format!(
            "magic 0x{magic:08x}, expected one of {}",
            allowed_dims
                .iter()
                .map(|d| format!("0x{:08x}", 0x800 | *d as u32))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let nd = bytes[3] as usize;
    let header = 4 + 4 * nd;
    if bytes.len() < header {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..nd)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    if dims.contains(&0) {
        return Err(fmt(format!("zero dimension in {dims:?}")));
    }
    let payload: usize = dims.iter().product();
    if bytes.len() != header + payload {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: header + payload,
            found: bytes.len(),
        });
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Images as `[N, C, H, W]`; 3-dim files have one channel.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<([usize; 4], Vec<u8>)> {
    let path = path.as_ref();
    let (dims, data) = parse(path, &load(path)?, &[3, 4])?;
    let shape = match dims[..] {
        [n, h, w] => [n, 1, h, w],
        [n, c, h, w] => [n, c, h, w],
        _ => unreachable!(),
    };
    Ok((shape, data))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let (_, data) = parse(path, &load(path)?, &[1])?;
    Ok(data.into_iter().map(usize::from).collect())
}

/// Reads an image/label file pair. `classes = None` infers `max label + 1`.
pub fn read_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    classes: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let (shape, images) = read_idx_images(&images_path)?;
    let labels = read_idx_labels(&labels_path)?;
    if labels.len() != shape[0] {
        return Err(Error::Format {
            path: labels_path.as_ref().to_path_buf(),
            detail: format!("{} labels for {} images", labels.len(), shape[0]),
        });
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(images, shape, labels, classes, split)
}

/// Writes uncompressed IDX files; single-channel images use the 3-dim layout.
/// Labels must fit in a byte.
pub fn write_idx(data: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [n, c, h, w] = data.shape();
    let dims: Vec<usize> = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
    let mut img = vec![0, 0, U8_TYPE, dims.len() as u8];
    for d in &dims {
        img.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    img.extend_from_slice(data.images());

    let mut lab = vec![0, 0, U8_TYPE, 1];
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in data.labels() {
        let b = u8::try_from(l).map_err(|_| Error::Label {
            label: l,
            classes: 256,
        })?;
        lab.push(b);
    }
    write_atomic(images_path.as_ref(), &img)?;
    write_atomic(labels_path.as_ref(), &lab)
}
