//! Grouped 2-D convolution via patch expansion (im2col) and matrix products.
//!
//! Work is split per batch sample. Weight and bias gradients are reduced over
//! samples in index order regardless of [`ExecMode`].

use crate::error::{Error, Result};
use crate::kernels;
use crate::par::{self, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// `floor((size + 2 * padding - kernel) / stride) + 1`, or `None` if the
    /// kernel does not fit the padded input.
    pub fn output_size(&self, size: usize, kernel: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if kernel > padded || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], p: Conv2dParams) -> Result<Self> {
        let (&[n, c_in, h, wd], &[c_out, cin_g, kh, kw]) = (x, w) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-D input and weight, got {x:?} and {w:?}"),
            ));
        };
        let g = p.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={c_in} out={c_out} not divisible by groups={g}"),
            ));
        }
        if cin_g != c_in / g {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {cin_g} input channels per group, input gives {}", c_in / g),
            ));
        }
        if p.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let (Some(h_out), Some(w_out)) = (p.output_size(h, kh), p.output_size(wd, kw)) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (padding {})", p.padding),
            ));
        };
        Ok(Self {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride: p.stride,
            pad: p.padding,
            groups: g,
            h_out,
            w_out,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the patch matrix for one group.
    fn patch_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_sample(&self) -> usize {
        self.c_in * self.h * self.w
    }

    /// Input coordinate for output position `o` and kernel offset `k`.
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.pad)?;
        (pos < limit).then_some(pos)
    }
}

fn im2col(g: &ConvGeom, x: &[f64], group: usize, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.cin_g() {
        let c = group * g.cin_g() + ci;
        let x_c = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.h_out {
                    let ih = g.src(oh, ki, g.h);
                    for ow in 0..g.w_out {
                        dst[oh * g.w_out + ow] = match (ih, g.src(ow, kj, g.w)) {
                            (Some(ih), Some(iw)) => x_c[ih * g.w + iw],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], group: usize, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.cin_g() {
        let c = group * g.cin_g() + ci;
        let dx_c = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.h_out {
                    let Some(ih) = g.src(oh, ki, g.h) else { continue };
                    for ow in 0..g.w_out {
                        if let Some(iw) = g.src(ow, kj, g.w) {
                            dx_c[ih * g.w + iw] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    mode: ExecMode,
) -> Vec<f64> {
    let plane = g.out_plane();
    let rows = g.patch_rows();
    let cout_g = g.cout_g();
    let mut out = vec![0.0; g.n * g.c_out * plane];
    par::for_each_chunk(mode, &mut out, g.c_out * plane, |n, out_n| {
        let x_n = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        let mut cols = vec![0.0; rows * plane];
        for group in 0..g.groups {
            im2col(g, x_n, group, &mut cols);
            let w_g = &w[group * cout_g * rows..(group + 1) * cout_g * rows];
            let out_g = &mut out_n[group * cout_g * plane..(group + 1) * cout_g * plane];
            kernels::gemm_nn(cout_g, rows, plane, w_g, &cols, out_g);
        }
        if let Some(b) = bias {
            for (o, chunk) in out_n.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    out
}

type Grads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
    mode: ExecMode,
) -> Grads {
    let plane = g.out_plane();
    let rows = g.patch_rows();
    let cout_g = g.cout_g();
    let w_len = w.len();

    let per_sample = par::map_range(mode, g.n, |n| {
        let x_n = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dy_n = &dy[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        let mut cols = vec![0.0; rows * plane];
        let mut dw_n = if need_dw { vec![0.0; w_len] } else { Vec::new() };
        let mut dx_n = if need_dx { vec![0.0; g.in_sample()] } else { Vec::new() };
        for group in 0..g.groups {
            let dy_g = &dy_n[group * cout_g * plane..(group + 1) * cout_g * plane];
            if need_dw {
                im2col(g, x_n, group, &mut cols);
                let dw_g = &mut dw_n[group * cout_g * rows..(group + 1) * cout_g * rows];
                kernels::gemm_nt(cout_g, plane, rows, dy_g, &cols, dw_g);
            }
            if need_dx {
                cols.iter_mut().for_each(|c| *c = 0.0);
                let w_g = &w[group * cout_g * rows..(group + 1) * cout_g * rows];
                kernels::gemm_tn(rows, cout_g, plane, w_g, dy_g, &mut cols);
                col2im(g, &cols, group, &mut dx_n);
            }
        }
        (dx_n, dw_n)
    });

    let mut dx = need_dx.then(|| Vec::with_capacity(x.len()));
    let mut dw = need_dw.then(|| vec![0.0; w_len]);
    for (dx_n, dw_n) in per_sample {
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&dx_n);
        }
        if let Some(dw) = dw.as_mut() {
            for (a, b) in dw.iter_mut().zip(&dw_n) {
                *a += b;
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![0.0; g.c_out];
        for dy_n in dy.chunks(g.c_out * plane) {
            for (o, chunk) in dy_n.chunks(plane).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}
