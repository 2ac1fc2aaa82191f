//! Raw numeric kernels on row-major slices. The autograd tape and the
//! post-processing code both call into these.

use alloc::vec;
use alloc::vec::Vec;

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// A 1x1, stride-1, unpadded convolution reads its input directly as
    /// the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
pub fn im2col(image: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for ci in 0..g.in_channels {
        let src = &image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto an image gradient (adds).
pub fn col2im(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for ci in 0..g.in_channels {
        let dst = &mut image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`, all row-major.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, k] += a[m, n] * b[k, n]^T`.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * k + j] += s;
        }
    }
}

/// `out[k, n] += a[m, k]^T * b[m, n]`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Forward convolution. Returns the output and, when `keep_cols` is set and
/// the convolution is not pointwise, the unfolded inputs for the backward
/// pass.
pub fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
    keep_cols: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let k = g.patch_len();
    let in_per = g.in_channels * g.height * g.width;
    let out_per = g.out_channels * plane;
    let mut out = vec![0.0; g.batch * out_per];
    let pointwise = g.is_pointwise();
    let mut stored = if keep_cols && !pointwise {
        Some(vec![0.0; g.batch * k * plane])
    } else {
        None
    };
    let mut scratch = if pointwise { Vec::new() } else { vec![0.0; k * plane] };
    for n in 0..g.batch {
        let image = &input[n * in_per..(n + 1) * in_per];
        let cols: &[f64] = if pointwise {
            image
        } else {
            let buf = match stored.as_mut() {
                Some(s) => &mut s[n * k * plane..(n + 1) * k * plane],
                None => &mut scratch[..],
            };
            im2col(image, g, buf);
            buf
        };
        let dst = &mut out[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        gemm_acc(weight, cols, dst, g.out_channels, k, plane);
    }
    (out, stored)
}

/// Gradients of a convolution. `cols` must be the unfolded inputs kept by
/// the forward pass (ignored for pointwise convolutions, which read `input`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    cols: Option<&[f64]>,
    weight: &[f64],
    g: &ConvGeometry,
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let plane = g.out_height() * g.out_width();
    let k = g.patch_len();
    let in_per = g.in_channels * g.height * g.width;
    let out_per = g.out_channels * plane;
    let pointwise = g.is_pointwise();

    if let Some(gb) = grad_bias {
        for n in 0..g.batch {
            let dy = &grad_out[n * out_per..(n + 1) * out_per];
            for (co, row) in dy.chunks(plane).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
    }
    if let Some(gw) = grad_weight {
        let mut scratch = Vec::new();
        for n in 0..g.batch {
            let dy = &grad_out[n * out_per..(n + 1) * out_per];
            let c: &[f64] = if pointwise {
                &input[n * in_per..(n + 1) * in_per]
            } else if let Some(all) = cols {
                &all[n * k * plane..(n + 1) * k * plane]
            } else {
                scratch.resize(k * plane, 0.0);
                im2col(&input[n * in_per..(n + 1) * in_per], g, &mut scratch);
                &scratch
            };
            gemm_nt_acc(dy, c, gw, g.out_channels, plane, k);
        }
    }
    if let Some(gi) = grad_input {
        let mut dcols = if pointwise { Vec::new() } else { vec![0.0; k * plane] };
        for n in 0..g.batch {
            let dy = &grad_out[n * out_per..(n + 1) * out_per];
            let dx = &mut gi[n * in_per..(n + 1) * in_per];
            if pointwise {
                gemm_tn_acc(weight, dy, dx, g.out_channels, k, plane);
            } else {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn_acc(weight, dy, &mut dcols, g.out_channels, k, plane);
                col2im(&dcols, g, dx);
            }
        }
    }
}

/// Source taps for one axis of a bilinear resize with half-pixel centres:
/// `(i0, i1, w1)` such that `out = (1 - w1) * in[i0] + w1 * in[i1]`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `[h, w]` maps to `[oh, ow]`.
pub fn resize_bilinear(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    if oh == h && ow == w {
        return input.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = (1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
                let bottom = (1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
                dst[oy * ow + ox] = (1.0 - wy) * top + wy * bottom;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients onto the input.
pub fn resize_bilinear_backward(
    grad_out: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [f64],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                dst[y0 * w + x1] += (1.0 - wy) * wx * g;
                dst[y1 * w + x0] += wy * (1.0 - wx) * g;
                dst[y1 * w + x1] += wy * wx * g;
            }
        }
    }
}

/// Nearest-neighbour upsampling of stacked planes by an integer factor.
pub fn upsample_nearest(input: &[f64], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(
    grad_out: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    grad_in: &mut [f64],
) {
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
}

/// Mirrors stacked planes along the width axis.
pub fn flip_horizontal(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for p in 0..planes {
        for y in 0..h {
            let base = (p * h + y) * w;
            for x in 0..w {
                out[base + x] = input[base + w - 1 - x];
            }
        }
    }
    out
}
