//! Dense N×C×H×W tensors and the differentiable primitives the rest of the
//! crate is built from.
//!
//! Storage is `f32`; every reduction (convolution dot products, gradient
//! sums) accumulates in `f64` and rounds once on store. Convolution follows
//! the cross-correlation convention (no kernel flip).
//!
//! Batched convolution runs samples in parallel. Per-sample partial weight
//! gradients are summed afterwards in ascending sample order, so results do
//! not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the number of `f64` entries in one im2col buffer.
const IM2COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample (C·H·W).
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from a closure over `(n, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copy of a single sample as a batch-of-one tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let len = self.shape.sample_len();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks batch-of-one (or larger) tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?
            .shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in parts {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::shape("stack", format!("{s} vs {first}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    /// Spatial crop `[y0, y0+h) × [x0, x0+w)` of every sample and channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w {
            return Err(Error::shape(
                "crop",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {s}"),
            ));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..h {
                    let row = (y0 + y) * s.w + x0;
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[row..row + w]);
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Spatial padding mode for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad by `(k-1)/2` so the output keeps the input's spatial size.
    Same,
    /// No padding; output shrinks by `k-1`.
    Valid,
}

impl Padding {
    fn amounts(self, kh: usize, kw: usize) -> (usize, usize) {
        match self {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }
}

/// Convolution weights `(out, in, kh, kw)` plus one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl ConvKernel {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        let s = weight.shape();
        if s.h.is_multiple_of(2) || s.w.is_multiple_of(2) {
            return Err(Error::shape(
                "ConvKernel",
                format!("kernel sides must be odd, got {}x{}", s.h, s.w),
            ));
        }
        if bias.len() != s.n {
            return Err(Error::shape(
                "ConvKernel",
                format!("{} biases for {} output channels", bias.len(), s.n),
            ));
        }
        Ok(ConvKernel { weight, bias })
    }

    /// 1×1 identity mapping on `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let weight = Tensor::from_fn(Shape::new(channels, channels, 1, 1), |o, i, _, _| {
            if o == i {
                1.0
            } else {
                0.0
            }
        });
        ConvKernel {
            weight,
            bias: vec![0.0; channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }
}

/// Cross-correlates `input` with `kernel`.
pub fn conv2d(input: &Tensor, kernel: &ConvKernel, padding: Padding) -> Result<Tensor> {
    conv2d_parts(input, &kernel.weight, &kernel.bias, padding)
}

struct ConvGeometry {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(op: &'static str, input: Shape, weight: Shape, bias_len: usize, padding: Padding) -> Result<Self> {
        if input.numel() == 0 {
            return Err(Error::shape(op, format!("empty input {input}")));
        }
        if weight.numel() == 0 {
            return Err(Error::shape(op, format!("empty kernel {weight}")));
        }
        if input.c != weight.c {
            return Err(Error::shape(
                op,
                format!("input has {} channels, kernel expects {}", input.c, weight.c),
            ));
        }
        if bias_len != weight.n {
            return Err(Error::shape(
                op,
                format!("{} biases for {} output channels", bias_len, weight.n),
            ));
        }
        if weight.h.is_multiple_of(2) || weight.w.is_multiple_of(2) {
            return Err(Error::shape(op, format!("even kernel side {}x{}", weight.h, weight.w)));
        }
        let (ph, pw) = padding.amounts(weight.h, weight.w);
        if input.h + 2 * ph < weight.h || input.w + 2 * pw < weight.w {
            return Err(Error::shape(
                op,
                format!("kernel {}x{} larger than input {input}", weight.h, weight.w),
            ));
        }
        Ok(ConvGeometry {
            cin: weight.c,
            cout: weight.n,
            kh: weight.h,
            kw: weight.w,
            ph,
            pw,
            h: input.h,
            w: input.w,
            ho: input.h + 2 * ph - weight.h + 1,
            wo: input.w + 2 * pw - weight.w + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output rows per im2col chunk.
    fn rows_per_chunk(&self) -> usize {
        (IM2COL_BUDGET / (self.patch_len() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Fills `cols` (patch_len × rows·wo, row-major) for output rows `[r0, r1)`.
    fn im2col(&self, sample: &[f32], r0: usize, r1: usize, cols: &mut [f64]) {
        let p = (r1 - r0) * self.wo;
        for c in 0..self.cin {
            let plane = &sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    let dst = &mut cols[row..row + p];
                    for y in r0..r1 {
                        let out_row = &mut dst[(y - r0) * self.wo..(y - r0 + 1) * self.wo];
                        let iy = (y + i) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (x, v) in out_row.iter_mut().enumerate() {
                            let ix = (x + j) as isize - self.pw as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize] as f64
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto an input-shaped `f64` buffer.
    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, sample: &mut [f64]) {
        let p = (r1 - r0) * self.wo;
        for c in 0..self.cin {
            let plane = &mut sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    let src = &cols[row..row + p];
                    for y in r0..r1 {
                        let iy = (y + i) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let in_row = &src[(y - r0) * self.wo..(y - r0 + 1) * self.wo];
                        for (x, &g) in in_row.iter().enumerate() {
                            let ix = (x + j) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k] · b[k×n]` on row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n views; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// [`conv2d`] on a bare weight tensor and bias slice.
pub fn conv2d_parts(input: &Tensor, weight: &Tensor, bias: &[f32], padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new("conv2d", input.shape, weight.shape, bias.len(), padding)?;
    let wmat: Vec<f64> = weight.data.iter().map(|&v| v as f64).collect();
    let in_len = input.shape.sample_len();
    let out_len = g.cout * g.ho * g.wo;
    let mut out = vec![0.0f32; input.shape.n * out_len];
    let rows = g.rows_per_chunk();
    let k = g.patch_len();

    out.par_chunks_mut(out_len)
        .zip(input.data.par_chunks(in_len))
        .for_each(|(dst, src)| {
            let mut cols = vec![0.0f64; k * rows * g.wo];
            let mut acc = vec![0.0f64; g.cout * rows * g.wo];
            let mut r0 = 0;
            while r0 < g.ho {
                let r1 = (r0 + rows).min(g.ho);
                let p = (r1 - r0) * g.wo;
                g.im2col(src, r0, r1, &mut cols[..k * p]);
                gemm(
                    g.cout,
                    k,
                    p,
                    &wmat,
                    (k as isize, 1),
                    &cols,
                    (p as isize, 1),
                    0.0,
                    &mut acc[..g.cout * p],
                );
                for o in 0..g.cout {
                    let b = bias[o] as f64;
                    let plane = &mut dst[o * g.ho * g.wo + r0 * g.wo..o * g.ho * g.wo + r1 * g.wo];
                    for (d, &a) in plane.iter_mut().zip(&acc[o * p..(o + 1) * p]) {
                        *d = (a + b) as f32;
                    }
                }
                r0 = r1;
            }
        });

    Ok(Tensor {
        shape: Shape::new(input.shape.n, g.cout, g.ho, g.wo),
        data: out,
    })
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

/// Exact reverse-mode gradients of [`conv2d_parts`] at `input`.
pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, padding: Padding) -> Result<ConvGrads> {
    let ws = weight.shape;
    let g = ConvGeometry::new("conv2d_backward", input.shape, ws, ws.n, padding)?;
    let expected = Shape::new(input.shape.n, g.cout, g.ho, g.wo);
    if grad_out.shape != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {} but forward output is {expected}", grad_out.shape),
        ));
    }
    let wmat: Vec<f64> = weight.data.iter().map(|&v| v as f64).collect();
    let k = g.patch_len();
    let in_len = input.shape.sample_len();
    let out_len = g.cout * g.ho * g.wo;
    let rows = g.rows_per_chunk();

    struct Partial {
        grad_input: Vec<f32>,
        grad_weight: Vec<f64>,
        grad_bias: Vec<f64>,
    }

    let partials: Vec<Partial> = input
        .data
        .par_chunks(in_len)
        .zip(grad_out.data.par_chunks(out_len))
        .map(|(src, gout)| {
            let mut cols = vec![0.0f64; k * rows * g.wo];
            let mut dcols = vec![0.0f64; k * rows * g.wo];
            let mut gmat = vec![0.0f64; g.cout * rows * g.wo];
            let mut gin = vec![0.0f64; in_len];
            let mut gw = vec![0.0f64; g.cout * k];
            let mut gb = vec![0.0f64; g.cout];
            let mut r0 = 0;
            while r0 < g.ho {
                let r1 = (r0 + rows).min(g.ho);
                let p = (r1 - r0) * g.wo;
                for o in 0..g.cout {
                    let src_row = &gout[o * g.ho * g.wo + r0 * g.wo..o * g.ho * g.wo + r1 * g.wo];
                    let dst = &mut gmat[o * p..(o + 1) * p];
                    let mut s = 0.0;
                    for (d, &v) in dst.iter_mut().zip(src_row) {
                        *d = v as f64;
                        s += v as f64;
                    }
                    gb[o] += s;
                }
                g.im2col(src, r0, r1, &mut cols[..k * p]);
                // dW += G · colsᵀ
                gemm(
                    g.cout,
                    p,
                    k,
                    &gmat,
                    (p as isize, 1),
                    &cols,
                    (1, p as isize),
                    1.0,
                    &mut gw,
                );
                // dcols = Wᵀ · G
                gemm(
                    k,
                    g.cout,
                    p,
                    &wmat,
                    (1, k as isize),
                    &gmat,
                    (p as isize, 1),
                    0.0,
                    &mut dcols[..k * p],
                );
                g.col2im(&dcols[..k * p], r0, r1, &mut gin);
                r0 = r1;
            }
            Partial {
                grad_input: gin.into_iter().map(|v| v as f32).collect(),
                grad_weight: gw,
                grad_bias: gb,
            }
        })
        .collect();

    let mut grad_input = Vec::with_capacity(input.numel());
    let mut gw = vec![0.0f64; g.cout * k];
    let mut gb = vec![0.0f64; g.cout];
    for part in partials {
        grad_input.extend_from_slice(&part.grad_input);
        for (a, b) in gw.iter_mut().zip(&part.grad_weight) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(&part.grad_bias) {
            *a += b;
        }
    }

    Ok(ConvGrads {
        input: Tensor {
            shape: input.shape,
            data: grad_input,
        },
        weight: Tensor {
            shape: ws,
            data: gw.into_iter().map(|v| v as f32).collect(),
        },
        bias: gb.into_iter().map(|v| v as f32).collect(),
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_out` where `input > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", input, grad_out)?;
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape,
        data,
    })
}

/// Concatenates along the channel axis, preserving input order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape;
    let mut channels = 0;
    for t in inputs {
        let s = t.shape;
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat_channels", format!("{s} vs {first}")));
        }
        channels += s.c;
    }
    let shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for t in inputs {
            let len = t.shape.sample_len();
            data.extend_from_slice(&t.data[n * len..(n + 1) * len]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Channels `[start, start+len)`; the backward of [`concat_channels`].
pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = input.shape;
    if start + len > s.c || len == 0 {
        return Err(Error::shape(
            "slice_channels",
            format!("channels [{start}, {}) of {s}", start + len),
        ));
    }
    let shape = Shape::new(s.n, len, s.h, s.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s.n {
        let from = (n * s.c + start) * s.plane();
        data.extend_from_slice(&input.data[from..from + len * s.plane()]);
    }
    Ok(Tensor { shape, data })
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{} vs {}", a.shape, b.shape)));
    }
    Ok(())
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    same_shape(op, a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

/// `a - b`. Backward: `+grad` to `a`, `-grad` to `b`.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn scale(a: &Tensor, alpha: f32) -> Tensor {
    a.map(|v| v * alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Straight four-loop correlation, valid padding, single sample/channel.
    fn direct_valid(input: &Tensor, k: &Tensor, bias: f32) -> Tensor {
        let (h, w) = (input.shape.h, input.shape.w);
        let (kh, kw) = (k.shape.h, k.shape.w);
        Tensor::from_fn(Shape::new(1, 1, h - kh + 1, w - kw + 1), |_, _, y, x| {
            let mut s = bias as f64;
            for i in 0..kh {
                for j in 0..kw {
                    s += input.at(0, 0, y + i, x + j) as f64 * k.at(0, 0, i, j) as f64;
                }
            }
            s as f32
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(2, 3, 5, 7), &mut rng);
        let y = conv2d(&x, &ConvKernel::identity(3), Padding::Same).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_input_interior() {
        let x = Tensor::full(Shape::new(1, 2, 7, 7), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(Shape::new(1, 2, 3, 3), &mut rng);
        let s: f64 = w.data().iter().map(|&v| v as f64).sum();
        let k = ConvKernel::new(w, vec![0.25]).unwrap();
        let y = conv2d(&x, &k, Padding::Same).unwrap();
        for yy in 1..6 {
            for xx in 1..6 {
                assert!((y.at(0, 0, yy, xx) as f64 - (s * 0.5 + 0.25)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn valid_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Shape::new(1, 1, 5, 5), &mut rng);
        let w = random(Shape::new(1, 1, 3, 3), &mut rng);
        let expected = direct_valid(&x, &w, 0.1);
        let got = conv2d(&x, &ConvKernel::new(w, vec![0.1]).unwrap(), Padding::Valid).unwrap();
        assert_eq!(got.shape(), Shape::new(1, 1, 3, 3));
        assert!(got.max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn rejects_channel_mismatch_and_empty() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let k = ConvKernel::identity(3);
        assert!(matches!(conv2d(&x, &k, Padding::Same), Err(Error::Shape { .. })));
        let empty = Tensor::zeros(Shape::new(0, 3, 4, 4));
        assert!(matches!(conv2d(&empty, &k, Padding::Same), Err(Error::Shape { .. })));
        assert!(ConvKernel::new(Tensor::zeros(Shape::new(1, 1, 2, 2)), vec![0.0]).is_err());
    }

    #[test]
    fn backward_zero_grad_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(Shape::new(2, 3, 4, 4), &mut rng);
        let w = random(Shape::new(2, 3, 3, 3), &mut rng);
        let g = conv2d_backward(&x, &w, &Tensor::zeros(Shape::new(2, 2, 4, 4)), Padding::Same).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));

        let go = random(Shape::new(2, 3, 4, 4), &mut rng);
        let id = ConvKernel::identity(3);
        let g = conv2d_backward(&x, &id.weight, &go, Padding::Same).unwrap();
        assert_eq!(g.input, go);
    }

    #[test]
    fn backward_rejects_mismatched_grad() {
        let x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        let bad = Tensor::zeros(Shape::new(1, 1, 4, 4));
        assert!(conv2d_backward(&x, &w, &bad, Padding::Valid).is_err());
    }

    #[test]
    fn bias_grad_is_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Shape::new(3, 2, 5, 6), &mut rng);
        let w = random(Shape::new(4, 2, 3, 3), &mut rng);
        let go = random(Shape::new(3, 4, 5, 6), &mut rng);
        let g = conv2d_backward(&x, &w, &go, Padding::Same).unwrap();
        for o in 0..4 {
            let s: f64 = (0..3).flat_map(|n| go.plane(n, o).to_vec()).map(|v| v as f64).sum();
            assert!((g.bias[o] as f64 - s).abs() < 1e-5);
        }
    }

    #[test]
    fn chunked_im2col_matches_single_chunk() {
        // Large enough that one sample spans several im2col chunks.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(Shape::new(1, 32, 150, 150), &mut rng);
        let w = random(Shape::new(2, 32, 3, 3), &mut rng);
        let g = ConvGeometry::new("t", x.shape(), w.shape(), 2, Padding::Same).unwrap();
        assert!(g.rows_per_chunk() < g.ho);
        let y = conv2d_parts(&x, &w, &[0.0, 0.0], Padding::Same).unwrap();
        for &(yy, xx) in &[(0usize, 0usize), (75, 3), (149, 149), (100, 57)] {
            let mut s = 0.0f64;
            for c in 0..32 {
                for i in 0..3 {
                    for j in 0..3 {
                        let iy = yy as isize + i as isize - 1;
                        let ix = xx as isize + j as isize - 1;
                        if (0..150).contains(&iy) && (0..150).contains(&ix) {
                            s += x.at(0, c, iy as usize, ix as usize) as f64 * w.at(1, c, i, j) as f64;
                        }
                    }
                }
            }
            assert!((y.at(0, 1, yy, xx) as f64 - s).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(Shape::new(1, 2, 2, 2), -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let g = Tensor::full(Shape::new(1, 1, 1, 3), 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn concat_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(Shape::new(2, 3, 4, 5), &mut rng);
        let b = random(Shape::new(2, 3, 4, 5), &mut rng);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape().c, 6);
        assert_eq!(slice_channels(&ab, 0, 3).unwrap(), a);
        let odd = Tensor::zeros(Shape::new(2, 1, 4, 6));
        assert!(concat_channels(&[&a, &odd]).is_err());
    }

    #[test]
    fn elementwise_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(Shape::new(1, 3, 4, 4), &mut rng);
        let b = random(Shape::new(1, 3, 4, 4), &mut rng);
        assert!(sub(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(sub(&a, &Tensor::zeros(a.shape())).unwrap(), a);
        let round = sub(&add(&a, &b).unwrap(), &b).unwrap();
        assert!(round.max_abs_diff(&a) < 1e-6);
        assert!(sub(&a, &Tensor::zeros(Shape::new(1, 3, 4, 5))).is_err());
        assert_eq!(scale(&a, 2.0).at(0, 1, 2, 3), 2.0 * a.at(0, 1, 2, 3));
    }
}
