//! Classical Retinex in the log domain.
//!
//! ```text
//! SSR:  R = log I − F_c ∗ log I
//! MSR:  R = Σ_n w_n (log I − F_{c_n} ∗ log I)
//! ```
//!
//! `F_c` is a sampled Gaussian surround renormalized to unit mass. Because
//! the 2-D Gaussian factors into two 1-D Gaussians, every blur here runs as
//! two separable passes, which is exactly the 2-D zero-padded correlation
//! with the outer-product kernel.
//!
//! [`MsrCascade`] is the same computation written as a feedforward network:
//! Gaussian layers of variance `c1², c2²−c1², c3²−c2²` in series, a tap after
//! each, channel concatenation, a fixed 1×1 averaging convolution and a
//! residual subtraction from `log I`. Intermediate stages run on a canvas
//! that grows by each kernel's radius, so no stage re-pads a truncated
//! intermediate and the taps equal direct blurs of the zero-extended log
//! image everywhere in the frame.

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, conv2d, sub, ConvKernel, Padding, Shape, Tensor};

/// Floor applied before taking logarithms of [0, 1] intensities.
pub const LOG_FLOOR: f32 = 1.0 / 255.0;

/// Kernel radius as a multiple of the standard deviation, rounded up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusRule {
    pub sigmas: f64,
}

impl Default for RadiusRule {
    fn default() -> Self {
        RadiusRule { sigmas: 3.0 }
    }
}

impl RadiusRule {
    pub fn radius(&self, c: f64) -> usize {
        ((self.sigmas * c).ceil() as usize).max(1)
    }
}

/// Discrete, unit-mass Gaussian surround of standard deviation `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSurround {
    c: f64,
    radius: usize,
    /// Normalized 1-D profile, length `2·radius+1`.
    taps: Vec<f64>,
}

/// Samples `exp(-(x²+y²)/2c²)` on `[-radius, radius]²` and renormalizes to sum 1.
pub fn gaussian_kernel(c: f64, radius: usize) -> Result<GaussianSurround> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Gaussian standard deviation must be positive, got {c}"
        )));
    }
    if radius == 0 {
        return Err(Error::InvalidArgument("Gaussian radius must be at least 1".into()));
    }
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * c * c)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(GaussianSurround {
        c,
        radius,
        taps: raw.into_iter().map(|v| v / total).collect(),
    })
}

impl GaussianSurround {
    pub fn with_rule(c: f64, rule: RadiusRule) -> Result<Self> {
        gaussian_kernel(c, rule.radius(c))
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Kernel value at offset `(dy, dx)` from the center.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        if dy.abs() > r || dx.abs() > r {
            return 0.0;
        }
        self.taps[(dy + r) as usize] * self.taps[(dx + r) as usize]
    }

    /// Full 2-D kernel, row-major, `side × side`.
    pub fn kernel(&self) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.side() * self.side());
        for a in &self.taps {
            for b in &self.taps {
                k.push(a * b);
            }
        }
        k
    }

    /// Per-channel kernel for the generic [`conv2d`]: `(C, C, side, side)`,
    /// zero off the channel diagonal.
    pub fn to_conv_kernel(&self, channels: usize) -> ConvKernel {
        let side = self.side();
        let r = self.radius as isize;
        let weight = Tensor::from_fn(Shape::new(channels, channels, side, side), |o, i, y, x| {
            if o == i {
                self.at(y as isize - r, x as isize - r) as f32
            } else {
                0.0
            }
        });
        ConvKernel {
            weight,
            bias: vec![0.0; channels],
        }
    }

    /// Zero-padded `same` blur of every plane.
    pub fn blur(&self, input: &Tensor) -> Tensor {
        let s = input.shape();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = blur_plane(&self.taps, input.plane(n, c), s.h, s.w, 0, 0);
                out.plane_mut(n, c)
                    .iter_mut()
                    .zip(plane)
                    .for_each(|(d, v)| *d = v as f32);
            }
        }
        out
    }
}

/// Canvas covering `[-margin, h+margin) × [-margin, w+margin)` of a frame `h × w`.
#[derive(Clone, Debug)]
struct Canvas {
    margin: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn rows(&self) -> usize {
        self.h + 2 * self.margin
    }

    fn cols(&self) -> usize {
        self.w + 2 * self.margin
    }

    fn frame(&self) -> Vec<f64> {
        let m = self.margin;
        let mut out = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            let row = (y + m) * self.cols() + m;
            out.extend_from_slice(&self.data[row..row + self.w]);
        }
        out
    }
}

/// 1-D correlation of `src` (length `len_in`, logical origin `-m_in`) with
/// centered `taps`, evaluated at logical positions `[-m_out, len + m_out)`.
#[inline]
fn correlate_line(taps: &[f64], src: &[f64], stride: usize, m_in: usize, len: usize, m_out: usize, dst: &mut [f64]) {
    let r = (taps.len() / 2) as isize;
    let len_in = (len + 2 * m_in) as isize;
    for (k, d) in dst.iter_mut().enumerate().take(len + 2 * m_out) {
        // index into src of tap 0
        let base = k as isize - m_out as isize - r + m_in as isize;
        let lo = (-base).max(0);
        let hi = (len_in - base).min(taps.len() as isize);
        let mut s = 0.0;
        for t in lo..hi {
            s += taps[t as usize] * src[(base + t) as usize * stride];
        }
        *d = s;
    }
}

/// Separable blur of a canvas, producing a canvas with margin `m_out`.
fn blur_canvas(taps: &[f64], input: &Canvas, m_out: usize) -> Canvas {
    let (h, w, m_in) = (input.h, input.w, input.margin);
    let rows_in = input.rows();
    let cols_in = input.cols();
    let cols_out = w + 2 * m_out;
    let rows_out = h + 2 * m_out;

    // horizontal: rows_in × cols_out
    let mut tmp = vec![0.0; rows_in * cols_out];
    for y in 0..rows_in {
        correlate_line(
            taps,
            &input.data[y * cols_in..(y + 1) * cols_in],
            1,
            m_in,
            w,
            m_out,
            &mut tmp[y * cols_out..(y + 1) * cols_out],
        );
    }
    // vertical: rows_out × cols_out
    let mut data = vec![0.0; rows_out * cols_out];
    let mut column = vec![0.0; rows_out];
    for x in 0..cols_out {
        correlate_line(taps, &tmp[x..], cols_out, m_in, h, m_out, &mut column);
        for (y, v) in column.iter().enumerate() {
            data[y * cols_out + x] = *v;
        }
    }
    Canvas {
        margin: m_out,
        h,
        w,
        data,
    }
}

fn blur_plane(taps: &[f64], plane: &[f32], h: usize, w: usize, m_in: usize, m_out: usize) -> Vec<f64> {
    let canvas = Canvas {
        margin: m_in,
        h,
        w,
        data: plane.iter().map(|&v| v as f64).collect(),
    };
    blur_canvas(taps, &canvas, m_out).data
}

/// Weighted Gaussian scales for MSR.
#[derive(Clone, Debug, PartialEq)]
pub struct MsrScales {
    scales: Vec<(f64, f64)>,
}

impl MsrScales {
    /// Validates `(c_n, w_n)` pairs: non-empty, `c` strictly increasing and
    /// positive, weights summing to 1.
    pub fn new(scales: Vec<(f64, f64)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument("MSR needs at least one scale".into()));
        }
        if scales.iter().any(|&(c, _)| !(c > 0.0)) {
            return Err(Error::InvalidArgument("scales must be positive".into()));
        }
        if scales.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(Error::InvalidArgument(format!(
                "scales must be strictly increasing: {:?}",
                scales.iter().map(|s| s.0).collect::<Vec<_>>()
            )));
        }
        let total: f64 = scales.iter().map(|s| s.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("scale weights sum to {total}, not 1")));
        }
        Ok(MsrScales { scales })
    }

    /// Equal weights over the given standard deviations.
    pub fn uniform(cs: &[f64]) -> Result<Self> {
        let w = 1.0 / cs.len().max(1) as f64;
        Self::new(cs.iter().map(|&c| (c, w)).collect())
    }

    pub fn scales(&self) -> &[(f64, f64)] {
        &self.scales
    }
}

impl Default for MsrScales {
    /// One small, one intermediate and one large surround.
    fn default() -> Self {
        MsrScales::uniform(&[15.0, 80.0, 250.0]).expect("valid default scales")
    }
}

fn log_image(image: &Tensor, log_floor: f32) -> Result<Tensor> {
    if !(log_floor > 0.0) {
        return Err(Error::InvalidArgument(format!("log floor must be positive, got {log_floor}")));
    }
    Ok(image.map(|v| v.max(log_floor).ln()))
}

/// Single-scale Retinex, per channel.
pub fn ssr(image: &Tensor, surround: &GaussianSurround, log_floor: f32) -> Result<Tensor> {
    let logi = log_image(image, log_floor)?;
    sub(&logi, &surround.blur(&logi))
}

/// Multi-scale Retinex with the default radius rule.
pub fn msr(image: &Tensor, scales: &MsrScales, log_floor: f32) -> Result<Tensor> {
    msr_with(image, scales, RadiusRule::default(), log_floor)
}

pub fn msr_with(image: &Tensor, scales: &MsrScales, rule: RadiusRule, log_floor: f32) -> Result<Tensor> {
    let logi = log_image(image, log_floor)?;
    let mut acc = vec![0.0f64; logi.numel()];
    for &(c, w) in scales.scales() {
        let blurred = GaussianSurround::with_rule(c, rule)?.blur(&logi);
        for ((a, &l), &b) in acc.iter_mut().zip(logi.data()).zip(blurred.data()) {
            *a += w * (l as f64 - b as f64);
        }
    }
    Tensor::from_vec(logi.shape(), acc.into_iter().map(|v| v as f32).collect())
}

/// The MSR network: cascaded Gaussian layers, taps, concat, 1×1 average,
/// residual subtraction.
#[derive(Clone, Debug)]
pub struct MsrCascade {
    stages: Vec<GaussianSurround>,
    weights: Vec<f64>,
}

/// Builds the cascade for `scales`. Stage `n` has variance `c_n² − c_{n−1}²`.
pub fn build_msr_cascade(scales: &MsrScales, rule: RadiusRule) -> Result<MsrCascade> {
    let mut stages = Vec::with_capacity(scales.scales().len());
    let mut prev_var = 0.0;
    for &(c, _) in scales.scales() {
        let var = c * c - prev_var;
        if !(var > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cascade stage for c={c} would need non-positive variance {var}"
            )));
        }
        stages.push(GaussianSurround::with_rule(var.sqrt(), rule)?);
        prev_var = c * c;
    }
    Ok(MsrCascade {
        stages,
        weights: scales.scales().iter().map(|s| s.1).collect(),
    })
}

impl MsrCascade {
    pub fn stages(&self) -> &[GaussianSurround] {
        &self.stages
    }

    /// The fixed 1×1 averaging layer over `3·stages` concatenated channels.
    pub fn mixing_kernel(&self, channels: usize) -> ConvKernel {
        let taps = self.stages.len();
        let weight = Tensor::from_fn(Shape::new(channels, channels * taps, 1, 1), |o, i, _, _| {
            if i % channels == o {
                self.weights[i / channels] as f32
            } else {
                0.0
            }
        });
        ConvKernel {
            weight,
            bias: vec![0.0; channels],
        }
    }

    /// Output of each Gaussian stage, cropped to the input frame.
    pub fn taps(&self, input: &Tensor) -> Vec<Tensor> {
        let s = input.shape();
        let mut taps = vec![Tensor::zeros(s); self.stages.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let mut canvas = Canvas {
                    margin: 0,
                    h: s.h,
                    w: s.w,
                    data: input.plane(n, c).iter().map(|&v| v as f64).collect(),
                };
                for (k, stage) in self.stages.iter().enumerate() {
                    let needed: usize = self.stages[k + 1..].iter().map(|g| g.radius).sum();
                    let m_out = needed.min(canvas.margin + stage.radius);
                    canvas = blur_canvas(&stage.taps, &canvas, m_out);
                    taps[k]
                        .plane_mut(n, c)
                        .iter_mut()
                        .zip(canvas.frame())
                        .for_each(|(d, v)| *d = v as f32);
                }
            }
        }
        taps
    }

    /// Runs the network on a [0, 1] image.
    pub fn forward(&self, image: &Tensor, log_floor: f32) -> Result<Tensor> {
        let logi = log_image(image, log_floor)?;
        let taps = self.taps(&logi);
        let refs: Vec<&Tensor> = taps.iter().collect();
        let stacked = concat_channels(&refs)?;
        let smooth = conv2d(&stacked, &self.mixing_kernel(image.shape().c), Padding::Same)?;
        sub(&logi, &smooth)
    }
}

/// Default CRF gain `α`.
pub const CRF_ALPHA: f32 = 125.0;
/// Default CRF scale `β`.
pub const CRF_BETA: f32 = 46.0;

/// Chromaticity-log color restoration applied to an MSR output:
/// `out_i = β·(ln(α·I_i) − ln Σ_j I_j) · msr_i`. Intensities are floored at
/// [`LOG_FLOOR`].
pub fn crf_baseline(msr_out: &Tensor, original: &Tensor, alpha: f32, beta: f32) -> Result<Tensor> {
    let s = original.shape();
    if s != msr_out.shape() {
        return Err(Error::shape("crf_baseline", format!("{} vs {}", msr_out.shape(), s)));
    }
    if s.c != 3 {
        return Err(Error::shape("crf_baseline", format!("expected 3 channels, got {}", s.c)));
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let vals: [f64; 3] =
                    std::array::from_fn(|c| original.at(n, c, y, x).max(LOG_FLOOR) as f64);
                let total_ln = vals.iter().sum::<f64>().ln();
                for (c, v) in vals.iter().enumerate() {
                    let gain = beta as f64 * ((alpha as f64 * v).ln() - total_ln);
                    out.set(n, c, y, x, (gain * msr_out.at(n, c, y, x) as f64) as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Maps a signed Retinex output to displayable [0, 1]: clip at the
/// `clip_percent` and `100 − clip_percent` percentiles (over all channels
/// jointly, nearest rank) and stretch affinely. A constant input maps to 0.5.
pub fn postprocess_display(retinex_out: &Tensor, clip_percent: f32) -> Result<Tensor> {
    if !(0.0..=10.0).contains(&clip_percent) {
        return Err(Error::InvalidArgument(format!(
            "clip percent must lie in [0, 10], got {clip_percent}"
        )));
    }
    let mut sorted: Vec<f32> = retinex_out.data().to_vec();
    if sorted.is_empty() {
        return Ok(retinex_out.clone());
    }
    sorted.sort_by(f32::total_cmp);
    let rank = |p: f64| sorted[((p / 100.0) * (sorted.len() - 1) as f64).round() as usize];
    let lo = rank(clip_percent as f64) as f64;
    let hi = rank(100.0 - clip_percent as f64) as f64;
    if !(hi - lo > f64::EPSILON * hi.abs().max(lo.abs()).max(1.0)) {
        return Ok(Tensor::full(retinex_out.shape(), 0.5));
    }
    Ok(retinex_out.map(|v| (((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)) as f32))
}
