//! SSIM, discrete entropy and angular color error, plus a manifest-driven
//! evaluation harness.
//!
//! Images are `(1, 3, H, W)` tensors in [0, 1]. Luminance is BT.601:
//! `0.299 R + 0.587 G + 0.114 B`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_rgb, ImagePair};
use crate::error::{Error, Result};
use crate::model::{enhance_image, MsrNet, Tiling};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_rgb(op: &'static str, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(op, format!("expected 1x3xHxW, got {s}")));
    }
    Ok(())
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    check_rgb(op, a)?;
    check_rgb(op, b)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// BT.601 luma plane in f64.
pub fn luminance(img: &Tensor) -> Result<Vec<f64>> {
    check_rgb("luminance", img)?;
    let (r, g, b) = (img.plane(0, 0), img.plane(0, 1), img.plane(0, 2));
    Ok((0..r.len())
        .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimMode {
    /// Single SSIM on the luma plane.
    #[default]
    Luma,
    /// Mean of the three per-channel SSIMs.
    ChannelMean,
}

fn ssim_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel planes over valid window positions.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim", format!("planes of {} and {} values for {h}x{w}", a.len(), b.len())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = ssim_window();
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &taps);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(sum / mu_a.len() as f64)
}

/// SSIM on luminance.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, SsimMode::Luma)
}

pub fn ssim_with(a: &Tensor, b: &Tensor, mode: SsimMode) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let s = a.shape();
    match mode {
        SsimMode::Luma => ssim_plane(&luminance(a)?, &luminance(b)?, s.h, s.w),
        SsimMode::ChannelMean => {
            let mut total = 0.0;
            for c in 0..3 {
                let pa: Vec<f64> = a.plane(0, c).iter().map(|&v| v as f64).collect();
                let pb: Vec<f64> = b.plane(0, c).iter().map(|&v| v as f64).collect();
                total += ssim_plane(&pa, &pb, s.h, s.w)?;
            }
            Ok(total / 3.0)
        }
    }
}

/// 256-bin histogram of the 8-bit quantized luma.
pub fn gray_histogram(img: &Tensor) -> Result<[u64; 256]> {
    let mut hist = [0u64; 256];
    for y in luminance(img)? {
        hist[(y.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    Ok(hist)
}

/// Shannon entropy in bits of the 8-bit gray histogram.
pub fn discrete_entropy(img: &Tensor) -> Result<f64> {
    Ok(histogram_entropy(&gray_histogram(img)?))
}

pub fn histogram_entropy(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum();
    // a single occupied bin gives -1·log2(1) = -0.0
    h.max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngularMode {
    /// Both images flattened to one vector each.
    #[default]
    Global,
    /// Mean RGB angle over pixels; pixels where either vector is zero are skipped.
    PerPixel,
}

/// Angle in degrees between two vectors, or `None` if either is zero.
///
/// Uses `2·atan2(|â − b̂|, |â + b̂|)`, which stays accurate near 0° and 180°
/// where `acos` of the cosine does not.
fn angle_deg(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let na = a.clone().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.clone().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.zip(b) {
        let (x, y) = (x / na, y / nb);
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    Some((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
}

pub fn angular_error(y: &Tensor, yhat: &Tensor, mode: AngularMode) -> Result<f64> {
    check_pair("angular_error", y, yhat)?;
    let f = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    match mode {
        AngularMode::Global => {
            let (a, b) = (f(y), f(yhat));
            angle_deg(a.iter().copied(), b.iter().copied())
                .ok_or_else(|| Error::InvalidArgument("angular error of a zero image".into()))
        }
        AngularMode::PerPixel => {
            let plane = y.shape().plane();
            let (mut total, mut count) = (0.0, 0usize);
            for i in 0..plane {
                let a = (0..3).map(|c| y.plane(0, c)[i] as f64);
                let b = (0..3).map(|c| yhat.plane(0, c)[i] as f64);
                if let Some(a) = angle_deg(a, b) {
                    total += a;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::InvalidArgument("per-pixel angular error: every pixel is zero".into()));
            }
            Ok(total / count as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub ssim: Option<f64>,
    pub entropy: f64,
    pub angular_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub ssim: Option<f64>,
    pub entropy: Option<f64>,
    pub angular_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    /// Aggregates are means over the rows where a metric is present.
    pub fn new(per_image: Vec<ImageMetrics>) -> Self {
        let aggregate = Aggregate {
            count: per_image.len(),
            ssim: mean(per_image.iter().filter_map(|m| m.ssim)),
            entropy: mean(per_image.iter().map(|m| m.entropy)),
            angular_deg: mean(per_image.iter().filter_map(|m| m.angular_deg)),
        };
        MetricReport { per_image, aggregate }
    }

    /// `id,ssim,entropy,angular_deg`; absent metrics are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,ssim,entropy,angular_deg\n");
        for m in &self.per_image {
            let _ = writeln!(out, "{},{},{},{}", m.id, opt_field(m.ssim), m.entropy, opt_field(m.angular_deg));
        }
        out
    }

    /// Aggregate JSON with the producing configuration echoed back.
    pub fn summary_json(&self, config: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "aggregate": self.aggregate,
            "niqe": null,
            "niqe_note": "not implemented",
            "config": config,
        })
    }

    pub fn summary_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        format!(
            "images={} ssim={} entropy={} angular_deg={}",
            self.aggregate.count,
            f(self.aggregate.ssim),
            f(self.aggregate.entropy),
            f(self.aggregate.angular_deg)
        )
    }
}

/// What gets scored against each row's ground truth.
pub enum Candidate<'a> {
    /// The HQ image itself.
    GroundTruth,
    /// The unenhanced LL image.
    Input,
    Model { model: &'a MsrNet, tiling: Tiling },
    /// Pre-enhanced images named like the LL files.
    EnhancedDir(PathBuf),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ssim_mode: SsimMode,
    pub angular_mode: AngularMode,
}

fn score(row: &ImagePair, base: &Path, candidate: &Candidate, opts: &EvalOptions) -> Result<ImageMetrics> {
    let hq_path = row.hq_path(base);
    let gt = if hq_path.is_file() {
        Some(load_rgb(&hq_path)?)
    } else {
        log::warn!("{}: ground truth {} missing", row.id(), hq_path.display());
        None
    };
    let image = match candidate {
        Candidate::GroundTruth => gt
            .clone()
            .ok_or_else(|| Error::Manifest(format!("{}: ground truth missing", row.id())))?,
        Candidate::Input => load_rgb(row.ll_path(base))?,
        Candidate::Model { model, tiling } => enhance_image(&load_rgb(row.ll_path(base))?, model, *tiling)?,
        Candidate::EnhancedDir(dir) => {
            let name = Path::new(&row.ll)
                .file_name()
                .ok_or_else(|| Error::Manifest(format!("bad LL path {}", row.ll)))?;
            load_rgb(dir.join(name))?
        }
    };
    let (ssim, angular_deg) = match &gt {
        Some(gt) => (
            Some(ssim_with(&image, gt, opts.ssim_mode)?),
            Some(angular_error(gt, &image, opts.angular_mode)?),
        ),
        None => (None, None),
    };
    Ok(ImageMetrics {
        id: row.id(),
        ssim,
        entropy: discrete_entropy(&image)?,
        angular_deg,
    })
}

/// Scores every row; output order follows `rows`.
pub fn evaluate(rows: &[ImagePair], base: &Path, candidate: &Candidate, opts: &EvalOptions) -> Result<MetricReport> {
    let per_image = rows
        .par_iter()
        .map(|row| score(row, base, candidate, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(per_image))
}
