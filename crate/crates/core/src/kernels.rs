//! Raw numeric kernels on flat NHWC buffers.
//!
//! These functions know nothing about the tape; `ops` wraps them into
//! differentiable operations. Convolution goes through im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Matrix operand: a row-major `rows × cols` buffer, optionally used transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    // (row stride, column stride) of the logical matrix
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a · b` (or `out += a · b` when `accumulate`), `out` row-major.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the logical dimensions and strides above address exactly the
    // checked buffers; `out` is a distinct, contiguous m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output is `ceil(in / stride)`; padding split with the extra row/col at the bottom/right.
    Same,
    /// No padding.
    Valid,
}

/// Spatial geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be at least 1"));
        }
        if k_h == 0 || k_w == 0 {
            return Err(Error::shape("convolution kernel has a zero spatial dim"));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h.max(1) - 1) * stride + k_h).saturating_sub(in_h);
                let pad_w = ((out_w.max(1) - 1) * stride + k_w).saturating_sub(in_w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if in_h < k_h || in_w < k_w {
                    return Err(Error::shape(format!(
                        "valid convolution of {in_h}×{in_w} input with {k_h}×{k_w} kernel"
                    )));
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry {
            in_h,
            in_w,
            out_h,
            out_w,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
        })
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        self.k_h * self.k_w * channels
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    // Input coordinate under kernel tap `k` at output coordinate `o`, if inside.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let v = (o * stride + k).checked_sub(pad)?;
        (v < limit).then_some(v)
    }
}

/// Unfolds one image (`in_h × in_w × c`) into `(out_h·out_w) × (k_h·k_w·c)`.
/// Column order is `(ky, kx, channel)`, matching a `k_h×k_w×c_in×c_out` kernel.
pub fn im2col(image: &[f64], channels: usize, g: &ConvGeometry, cols: &mut [f64]) {
    let patch = g.patch_len(channels);
    debug_assert_eq!(cols.len(), g.out_positions() * patch);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.k_h {
                let sy = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h);
                for kx in 0..g.k_w {
                    let dst = &mut row[(ky * g.k_w + kx) * channels..][..channels];
                    match (sy, ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.in_w)) {
                        (Some(y), Some(x)) => {
                            dst.copy_from_slice(&image[(y * g.in_w + x) * channels..][..channels])
                        }
                        _ => dst.fill(0.0),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds the columns back into `image`.
pub fn col2im_add(cols: &[f64], channels: usize, g: &ConvGeometry, image: &mut [f64]) {
    let patch = g.patch_len(channels);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.k_h {
                let Some(y) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h) else {
                    continue;
                };
                for kx in 0..g.k_w {
                    let Some(x) = ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.in_w) else {
                        continue;
                    };
                    let src = &row[(ky * g.k_w + kx) * channels..][..channels];
                    let dst = &mut image[(y * g.in_w + x) * channels..][..channels];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Shape bookkeeping shared by the forward and backward passes of `conv2d`.
#[derive(Clone, Copy, Debug)]
pub struct ConvPlan {
    pub input: Shape,
    pub output: Shape,
    pub c_in: usize,
    pub c_out: usize,
    pub geom: ConvGeometry,
}

impl ConvPlan {
    pub fn conv2d(input: Shape, kernel: Shape, stride: usize, padding: Padding) -> Result<Self> {
        let [k_h, k_w, c_in, c_out] = kernel.dims();
        if c_in != input.c {
            return Err(Error::shape(format!(
                "conv2d kernel {kernel} expects {c_in} input channels, input {input} has {}",
                input.c
            )));
        }
        let geom = ConvGeometry::new(input.h, input.w, k_h, k_w, stride, padding)?;
        Ok(ConvPlan {
            input,
            output: Shape::new(input.n, geom.out_h, geom.out_w, c_out),
            c_in,
            c_out,
            geom,
        })
    }

    /// The plan of the convolution whose adjoint maps `input` up by `stride`.
    /// The transposed convolution's kernel is `k_h×k_w×c_out×c_in`.
    pub fn conv2d_transpose(input: Shape, kernel: Shape, stride: usize) -> Result<Self> {
        let [k_h, k_w, c_out, c_in] = kernel.dims();
        if c_in != input.c {
            return Err(Error::shape(format!(
                "conv2d_transpose kernel {kernel} expects {c_in} input channels, input {input} has {}",
                input.c
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d_transpose stride must be at least 1"));
        }
        let (h, w) = (input.h * stride, input.w * stride);
        let geom = ConvGeometry::new(h, w, k_h, k_w, stride, Padding::Same)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (input.h, input.w));
        Ok(ConvPlan {
            input,
            output: Shape::new(input.n, h, w, c_out),
            c_in,
            c_out,
            geom,
        })
    }
}

/// `out = conv(input; kernel) + bias`.
pub fn conv2d_forward(
    plan: &ConvPlan,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let g = &plan.geom;
    let patch = g.patch_len(plan.c_in);
    let positions = g.out_positions();
    let mut cols = vec![0.0; positions * patch];
    let in_stride = g.in_h * g.in_w * plan.c_in;
    let out_stride = positions * plan.c_out;
    for n in 0..plan.input.n {
        im2col(&input[n * in_stride..][..in_stride], plan.c_in, g, &mut cols);
        let o = &mut out[n * out_stride..][..out_stride];
        gemm(
            MatRef::new(&cols, positions, patch),
            MatRef::new(kernel, patch, plan.c_out),
            o,
            false,
        );
        if let Some(b) = bias {
            add_row_bias(o, b);
        }
    }
}

/// Gradients of `conv2d` given the upstream gradient `d_out`.
/// Each of `d_input` / `d_kernel` is accumulated into when provided.
pub fn conv2d_backward(
    plan: &ConvPlan,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_kernel: Option<&mut [f64]>,
) {
    let g = &plan.geom;
    let patch = g.patch_len(plan.c_in);
    let positions = g.out_positions();
    let in_stride = g.in_h * g.in_w * plan.c_in;
    let out_stride = positions * plan.c_out;
    let mut cols = vec![0.0; positions * patch];
    if let Some(dk) = d_kernel {
        for n in 0..plan.input.n {
            im2col(&input[n * in_stride..][..in_stride], plan.c_in, g, &mut cols);
            gemm(
                MatRef::new(&cols, positions, patch).t(),
                MatRef::new(&d_out[n * out_stride..][..out_stride], positions, plan.c_out),
                dk,
                true,
            );
        }
    }
    if let Some(dx) = d_input {
        for n in 0..plan.input.n {
            gemm(
                MatRef::new(&d_out[n * out_stride..][..out_stride], positions, plan.c_out),
                MatRef::new(kernel, patch, plan.c_out).t(),
                &mut cols,
                false,
            );
            col2im_add(&cols, plan.c_in, g, &mut dx[n * in_stride..][..in_stride]);
        }
    }
}

/// `out = convᵀ(input; kernel) + bias`, the exact adjoint of `conv2d` with
/// the same kernel, mapping `h×w` to `(h·stride)×(w·stride)`.
pub fn conv2d_transpose_forward(
    plan: &ConvPlan,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let g = &plan.geom;
    let patch = g.patch_len(plan.c_out);
    let positions = g.out_positions();
    let in_stride = positions * plan.c_in;
    let out_stride = g.in_h * g.in_w * plan.c_out;
    let mut cols = vec![0.0; positions * patch];
    out.fill(0.0);
    for n in 0..plan.input.n {
        gemm(
            MatRef::new(&input[n * in_stride..][..in_stride], positions, plan.c_in),
            MatRef::new(kernel, patch, plan.c_in).t(),
            &mut cols,
            false,
        );
        let o = &mut out[n * out_stride..][..out_stride];
        col2im_add(&cols, plan.c_out, g, o);
        if let Some(b) = bias {
            add_row_bias(o, b);
        }
    }
}

pub fn conv2d_transpose_backward(
    plan: &ConvPlan,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_kernel: Option<&mut [f64]>,
) {
    let g = &plan.geom;
    let patch = g.patch_len(plan.c_out);
    let positions = g.out_positions();
    let in_stride = positions * plan.c_in;
    let out_stride = g.in_h * g.in_w * plan.c_out;
    let mut cols = vec![0.0; positions * patch];
    let mut d_input = d_input;
    let mut d_kernel = d_kernel;
    for n in 0..plan.input.n {
        im2col(&d_out[n * out_stride..][..out_stride], plan.c_out, g, &mut cols);
        let cols_m = MatRef::new(&cols, positions, patch);
        if let Some(dx) = d_input.as_deref_mut() {
            gemm(
                cols_m,
                MatRef::new(kernel, patch, plan.c_in),
                &mut dx[n * in_stride..][..in_stride],
                true,
            );
        }
        if let Some(dk) = d_kernel.as_deref_mut() {
            gemm(
                cols_m.t(),
                MatRef::new(&input[n * in_stride..][..in_stride], positions, plan.c_in),
                dk,
                true,
            );
        }
    }
}

fn add_row_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Column sums of a `rows × bias.len()` buffer, accumulated into `bias`.
pub fn bias_grad_add(d_out: &[f64], bias: &mut [f64]) {
    for row in d_out.chunks_exact(bias.len()) {
        for (b, d) in bias.iter_mut().zip(row) {
            *b += d;
        }
    }
}

/// Non-overlapping max pooling; the bottom/right edge is replicate-padded
/// when the spatial dims are not multiples of `window`. Returns the output
/// and, per output element, the flat index of the winning input element.
pub fn maxpool_forward(input: &[f64], shape: Shape, window: usize) -> Result<(Shape, Vec<f64>, Vec<usize>)> {
    if window == 0 {
        return Err(Error::invalid("max-pool window must be at least 1"));
    }
    if shape.h == 0 || shape.w == 0 {
        return Err(Error::shape(format!("max-pool of empty input {shape}")));
    }
    let out_shape = Shape::new(shape.n, shape.h.div_ceil(window), shape.w.div_ceil(window), shape.c);
    let mut out = vec![f64::NEG_INFINITY; out_shape.numel()];
    let mut arg = vec![0usize; out_shape.numel()];
    let c = shape.c;
    for n in 0..shape.n {
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let o_base = ((n * out_shape.h + oy) * out_shape.w + ox) * c;
                for dy in 0..window {
                    let y = (oy * window + dy).min(shape.h - 1);
                    for dx in 0..window {
                        let x = (ox * window + dx).min(shape.w - 1);
                        let i_base = ((n * shape.h + y) * shape.w + x) * c;
                        for ch in 0..c {
                            let v = input[i_base + ch];
                            if v > out[o_base + ch] {
                                out[o_base + ch] = v;
                                arg[o_base + ch] = i_base + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out_shape, out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeometry::new(5, 5, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (5, 5, 1, 1));
        let g = ConvGeometry::new(8, 8, 4, 4, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 1));
        let g = ConvGeometry::new(5, 7, 3, 3, 1, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 5));
        assert!(ConvGeometry::new(5, 5, 3, 3, 0, Padding::Same).is_err());
        assert!(ConvGeometry::new(2, 2, 3, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2), &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(MatRef::new(&a, 2, 2).t(), MatRef::new(&b, 2, 2), &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2).t(), &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(5, 4, 3, 2, 2, Padding::Same).unwrap();
        let c = 2;
        let img: Vec<f64> = (0..5 * 4 * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_len = g.out_positions() * g.patch_len(c);
        let other: Vec<f64> = (0..cols_len).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cols_len];
        im2col(&img, c, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&other).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im_add(&other, c, &g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_replicates_ragged_edges() {
        let x = [1.0, 5.0, 2.0, 3.0, 4.0, 9.0, 0.0, 8.0, 7.0];
        let (s, out, arg) = maxpool_forward(&x, Shape::new(1, 3, 3, 1), 2).unwrap();
        assert_eq!(s, Shape::new(1, 2, 2, 1));
        assert_eq!(out, vec![5.0, 9.0, 8.0, 7.0]);
        assert_eq!(arg, vec![1, 5, 7, 8]);
        assert!(maxpool_forward(&x, Shape::new(1, 3, 3, 1), 0).is_err());
    }
}
