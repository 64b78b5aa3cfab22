//! Cross-correlation kernels via im2col + gemm.

use super::gemm::{gemm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let plane = g.col_cols();
    for c in 0..g.c {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let plane = g.col_cols();
    for c in 0..g.c {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let in_plane = g.c * g.h * g.w;
    let out_plane = g.k * g.col_cols();
    let mut out = vec![0.0; g.n * out_plane];
    let weights = Mat::new(kernel, g.k, g.col_rows());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    for b in 0..g.n {
        let img = &input[b * in_plane..(b + 1) * in_plane];
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        if g.is_pointwise() {
            gemm(weights, Mat::new(img, g.c, g.col_cols()), dst, 0.0);
        } else {
            im2col(g, img, &mut cols);
            gemm(
                weights,
                Mat::new(&cols, g.col_rows(), g.col_cols()),
                dst,
                0.0,
            );
        }
    }
    out
}

/// Accumulates input and kernel gradients for upstream gradient `d_out`.
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_kernel: Option<&mut [f64]>,
) {
    let in_plane = g.c * g.h * g.w;
    let out_plane = g.k * g.col_cols();
    let weights = Mat::new(kernel, g.k, g.col_rows());
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    let mut d_input = d_input;
    let mut d_kernel = d_kernel;
    for b in 0..g.n {
        let grad = Mat::new(&d_out[b * out_plane..(b + 1) * out_plane], g.k, g.col_cols());
        if let Some(dk) = d_kernel.as_deref_mut() {
            let img = &input[b * in_plane..(b + 1) * in_plane];
            if g.is_pointwise() {
                gemm(grad, Mat::new(img, g.c, g.col_cols()).t(), dk, 1.0);
            } else {
                im2col(g, img, &mut cols);
                gemm(
                    grad,
                    Mat::new(&cols, g.col_rows(), g.col_cols()).t(),
                    dk,
                    1.0,
                );
            }
        }
        if let Some(di) = d_input.as_deref_mut() {
            let dst = &mut di[b * in_plane..(b + 1) * in_plane];
            if g.is_pointwise() {
                gemm(weights.t(), grad, dst, 1.0);
            } else {
                gemm(weights.t(), grad, &mut cols, 0.0);
                col2im_add(g, &cols, dst);
            }
        }
    }
}
