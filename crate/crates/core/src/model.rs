//! The trainable MSR-net, `f = f3 ∘ f2 ∘ f1`.
//!
//! * `f1`, multi-scale log transform: `M_j = ln(1 + v_j·x) / ln(1 + v_j)`,
//!   concatenated to `3n` channels, then 1×1 conv to `width`, ReLU, and a
//!   3×3 conv back to 3 channels.
//! * `f2`, difference of convolutions: `K` ReLU conv layers of `width`
//!   channels in series starting from `X1`; all `K` outputs concatenated,
//!   mixed by a 1×1 conv to 3 channels, and subtracted from `X1`.
//! * `f3`, color restoration: a 1×1 conv, 3 → 3.
//!
//! Every spatial conv uses `same` zero padding. Outputs are not clamped;
//! only [`enhance_image`] clamps to [0, 1].
//!
//! Parameters are named `layer{i}.weight` / `layer{i}.bias` with `i` running
//! from −1 (first 1×1 of `f1`) to `K+2` (the color layer).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamKind, Parameter};
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_parts, relu, relu_backward, slice_channels, sub, Padding, Shape,
    Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsrNetConfig {
    /// Number of log-transform scales.
    pub n: usize,
    /// Log-transform strengths, one per scale.
    pub v: Vec<f32>,
    /// Depth of the difference-of-convolution stack.
    pub k: usize,
    /// Hidden channel count.
    pub width: usize,
    /// Side of the hidden spatial kernels.
    pub kernel_hidden: usize,
    /// Training patch side.
    pub patch: usize,
}

impl Default for MsrNetConfig {
    fn default() -> Self {
        MsrNetConfig {
            n: 4,
            v: vec![1.0, 10.0, 100.0, 300.0],
            k: 10,
            width: 32,
            kernel_hidden: 3,
            patch: 64,
        }
    }
}

impl MsrNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.v.len() != self.n {
            return Err(Error::Config(format!(
                "need n >= 1 log scales with one v each, got n={} and {} values",
                self.n,
                self.v.len()
            )));
        }
        if self.v.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("log-transform strengths must be positive: {:?}", self.v)));
        }
        if self.k == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "depth and width must be positive, got k={} width={}",
                self.k, self.width
            )));
        }
        if self.kernel_hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden kernel side must be odd, got {}",
                self.kernel_hidden
            )));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(())
    }

    /// `(name, kind, shape)` of every parameter, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, ParamKind, Shape)> {
        let kh = self.kernel_hidden;
        let w = self.width;
        let mut layers: Vec<(i32, Shape)> = vec![
            (-1, Shape::new(w, 3 * self.n, 1, 1)),
            (0, Shape::new(3, w, kh, kh)),
            (1, Shape::new(w, 3, kh, kh)),
        ];
        for m in 2..=self.k {
            layers.push((m as i32, Shape::new(w, w, kh, kh)));
        }
        layers.push((self.k as i32 + 1, Shape::new(3, w * self.k, 1, 1)));
        layers.push((self.k as i32 + 2, Shape::new(3, 3, 1, 1)));
        layers
            .into_iter()
            .flat_map(|(i, s)| {
                [
                    (format!("layer{i}.weight"), ParamKind::Weight, s),
                    (format!("layer{i}.bias"), ParamKind::Bias, Shape::new(1, s.n, 1, 1)),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, _, s)| s.numel()).sum()
    }

    /// Pixels of context each output depends on in every direction.
    pub fn receptive_radius(&self) -> usize {
        (self.k + 1) * (self.kernel_hidden - 1) / 2
    }
}

/// Configuration plus the instantiated parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MsrNet {
    config: MsrNetConfig,
    params: Vec<Parameter>,
    /// Optimizer iterations already applied.
    pub iterations_done: usize,
}

/// Intermediate values kept for the backward pass.
struct ForwardCache {
    logs: Tensor,
    pre_mix: Tensor,
    mixed: Tensor,
    x1: Tensor,
    pre_hidden: Vec<Tensor>,
    hidden: Vec<Tensor>,
    stacked: Tensor,
    x2: Tensor,
}

impl MsrNet {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn new(config: MsrNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, kind, shape)| {
                let value = match kind {
                    ParamKind::Bias => Tensor::zeros(shape),
                    ParamKind::Weight => {
                        let std = (2.0 / (shape.c * shape.h * shape.w) as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("finite std");
                        Tensor::from_fn(shape, |_, _, _, _| normal.sample(&mut rng) as f32)
                    }
                };
                Parameter::new(name, kind, value)
            })
            .collect();
        Ok(MsrNet {
            config,
            params,
            iterations_done: 0,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(config: MsrNetConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, kind, shape)| Parameter::new(name, kind, Tensor::zeros(shape)))
            .collect();
        Ok(MsrNet {
            config,
            params,
            iterations_done: 0,
        })
    }

    /// Reassembles a model from named parameters, checking shapes.
    pub fn from_params(config: MsrNetConfig, mut params: Vec<Parameter>, iterations_done: usize) -> Result<Self> {
        config.validate()?;
        let mut ordered = Vec::with_capacity(params.len());
        for (name, kind, shape) in config.param_shapes() {
            let pos = params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            let mut p = params.swap_remove(pos);
            if p.shape() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {} but the architecture needs {shape}",
                    p.shape()
                )));
            }
            p.kind = kind;
            ordered.push(p);
        }
        if let Some(extra) = params.first() {
            return Err(Error::Config(format!("unexpected parameter {}", extra.name)));
        }
        Ok(MsrNet {
            config,
            params: ordered,
            iterations_done,
        })
    }

    pub fn config(&self) -> &MsrNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    fn layer_index(&self, layer: i32) -> usize {
        2 * (layer + 1) as usize
    }

    fn weight(&self, layer: i32) -> &Tensor {
        &self.params[self.layer_index(layer)].value
    }

    fn bias(&self, layer: i32) -> &[f32] {
        self.params[self.layer_index(layer) + 1].value.data()
    }

    fn conv(&self, input: &Tensor, layer: i32) -> Result<Tensor> {
        conv2d_parts(input, self.weight(layer), self.bias(layer), Padding::Same)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().c != 3 {
            return Err(Error::shape("msrnet", format!("expected 3 input channels, got {}", x.shape())));
        }
        Ok(())
    }

    /// Multi-scale log transform, `3n` channels ordered scale-major.
    pub fn multilog(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let parts: Vec<Tensor> = self
            .config
            .v
            .iter()
            .map(|&v| {
                let norm = (v as f64).ln_1p();
                x.map(|p| ((v as f64 * p as f64).ln_1p() / norm) as f32)
            })
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        concat_channels(&refs)
    }

    /// `X1` from the low-light input.
    pub fn f1_multilog(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.multilog(x)?;
        let a = relu(&self.conv(&m, -1)?);
        self.conv(&a, 0)
    }

    /// `X2 = X1 − mix(concat(H_1..H_K))`.
    pub fn f2_diff_of_conv(&self, x1: &Tensor) -> Result<Tensor> {
        self.check_input(x1)?;
        let k = self.config.k;
        let width = self.config.width;
        // Streams the 1×1 mix over each hidden map so only one is alive.
        let mix = self.weight(k as i32 + 1);
        let mut h = x1.clone();
        let mut smooth: Vec<f64> = vec![0.0; x1.numel()];
        for m in 1..=k {
            h = relu(&self.conv(&h, m as i32)?);
            let block = column_block(mix, (m - 1) * width, width)?;
            let part = conv2d_parts(&h, &block, &[0.0; 3], Padding::Same)?;
            smooth.iter_mut().zip(part.data()).for_each(|(a, &p)| *a += p as f64);
        }
        let s = x1.shape();
        let bias = self.bias(k as i32 + 1);
        let plane = s.plane();
        let smooth = Tensor::from_vec(
            s,
            smooth
                .iter()
                .enumerate()
                .map(|(i, &v)| (v + bias[(i / plane) % 3] as f64) as f32)
                .collect(),
        )?;
        sub(x1, &smooth)
    }

    /// Per-pixel 3×3 color transform.
    pub fn f3_color_restore(&self, x2: &Tensor) -> Result<Tensor> {
        self.check_input(x2)?;
        self.conv(x2, self.config.k as i32 + 2)
    }

    /// Full forward pass without keeping intermediates.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x1 = self.f1_multilog(x)?;
        let x2 = self.f2_diff_of_conv(&x1)?;
        self.f3_color_restore(&x2)
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let k = self.config.k as i32;
        let logs = self.multilog(x)?;
        let pre_mix = self.conv(&logs, -1)?;
        let mixed = relu(&pre_mix);
        let x1 = self.conv(&mixed, 0)?;
        let mut pre_hidden = Vec::with_capacity(self.config.k);
        let mut hidden: Vec<Tensor> = Vec::with_capacity(self.config.k);
        for m in 1..=k {
            let z = self.conv(hidden.last().unwrap_or(&x1), m)?;
            hidden.push(relu(&z));
            pre_hidden.push(z);
        }
        let refs: Vec<&Tensor> = hidden.iter().collect();
        let stacked = concat_channels(&refs)?;
        let smooth = self.conv(&stacked, k + 1)?;
        let x2 = sub(&x1, &smooth)?;
        let y = self.conv(&x2, k + 2)?;
        Ok((
            y,
            ForwardCache {
                logs,
                pre_mix,
                mixed,
                x1,
                pre_hidden,
                hidden,
                stacked,
                x2,
            },
        ))
    }

    /// Objective only, for finite-difference checks.
    pub fn loss(&self, x: &Tensor, y: &Tensor, lambda: f32) -> Result<f64> {
        let pred = self.forward(x)?;
        Ok(crate::nn::loss_mse_l2(&pred, y, &self.params, lambda)?.loss)
    }

    /// Computes the regularized loss at `(x, y)` and overwrites every
    /// parameter gradient with its derivative.
    pub fn forward_backward(&mut self, x: &Tensor, y: &Tensor, lambda: f32) -> Result<f64> {
        let (pred, cache) = self.forward_cached(x)?;
        let out = crate::nn::loss_mse_l2(&pred, y, &self.params, lambda)?;
        let k = self.config.k as i32;
        let width = self.config.width;

        let mut grads: Vec<(i32, Tensor, Vec<f32>)> = Vec::with_capacity(self.config.k + 3);

        let g = conv2d_backward(&cache.x2, self.weight(k + 2), &out.grad_pred, Padding::Same)?;
        grads.push((k + 2, g.weight, g.bias));
        let grad_x2 = g.input;

        let grad_smooth = grad_x2.map(|v| -v);
        let g = conv2d_backward(&cache.stacked, self.weight(k + 1), &grad_smooth, Padding::Same)?;
        grads.push((k + 1, g.weight, g.bias));
        let grad_stacked = g.input;

        let mut grad_h: Option<Tensor> = None;
        for m in (1..=k).rev() {
            let idx = (m - 1) as usize;
            let mut gh = slice_channels(&grad_stacked, idx * width, width)?;
            if let Some(from_above) = grad_h.take() {
                gh = crate::tensor::add(&gh, &from_above)?;
            }
            let gz = relu_backward(&cache.pre_hidden[idx], &gh)?;
            let input = if m == 1 { &cache.x1 } else { &cache.hidden[idx - 1] };
            let g = conv2d_backward(input, self.weight(m), &gz, Padding::Same)?;
            grads.push((m, g.weight, g.bias));
            grad_h = Some(g.input);
        }
        let grad_x1 = crate::tensor::add(&grad_x2, &grad_h.expect("k >= 1"))?;

        let g = conv2d_backward(&cache.mixed, self.weight(0), &grad_x1, Padding::Same)?;
        grads.push((0, g.weight, g.bias));
        let grad_pre = relu_backward(&cache.pre_mix, &g.input)?;
        let g = conv2d_backward(&cache.logs, self.weight(-1), &grad_pre, Padding::Same)?;
        grads.push((-1, g.weight, g.bias));

        for (layer, gw, gb) in grads {
            let i = self.layer_index(layer);
            self.params[i].grad = gw;
            let bshape = self.params[i + 1].shape();
            self.params[i + 1].grad = Tensor::from_vec(bshape, gb)?;
        }
        for p in &mut self.params {
            p.add_decay_grad(lambda);
        }
        Ok(out.loss)
    }
}

/// Input-channel columns `[start, start+len)` of a weight `(O, I, kh, kw)`.
fn column_block(weight: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = weight.shape();
    if start + len > s.c {
        return Err(Error::shape("column_block", format!("[{start}, {}) of {s}", start + len)));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, len, s.h, s.w), |o, i, y, x| {
        weight.at(o, start + i, y, x)
    }))
}

/// Inference layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tiling {
    Whole,
    /// Square tiles of side `tile` sharing `overlap` pixels with their
    /// neighbours. Each tile sees `overlap` extra pixels of context on every
    /// side; overlaps are blended with linear ramps.
    Tiled { tile: usize, overlap: usize },
}

/// Runs the model on a `(1, 3, H, W)` image in [0, 1] and clamps to [0, 1].
pub fn enhance_image(image: &Tensor, model: &MsrNet, tiling: Tiling) -> Result<Tensor> {
    let raw = match tiling {
        Tiling::Whole => model.forward(image)?,
        Tiling::Tiled { tile, overlap } => forward_tiled(image, model, tile, overlap)?,
    };
    Ok(raw.map(|v| v.clamp(0.0, 1.0)))
}

/// Tile starts along an axis of length `len`.
fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts.dedup();
    starts
}

/// Blend weight of position `i` inside a tile span `[start, end)` whose
/// neighbours overlap it by `lead` pixels before and `trail` after.
fn ramp(i: usize, start: usize, end: usize, lead: usize, trail: usize) -> f64 {
    let mut w = 1.0f64;
    if lead > 0 && i < start + lead {
        w = w.min((i - start + 1) as f64 / (lead + 1) as f64);
    }
    if trail > 0 && i >= end - trail {
        w = w.min((end - i) as f64 / (trail + 1) as f64);
    }
    w
}

fn forward_tiled(image: &Tensor, model: &MsrNet, tile: usize, overlap: usize) -> Result<Tensor> {
    if tile == 0 || overlap >= tile {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} must be positive and larger than overlap {overlap}"
        )));
    }
    if overlap < model.config().receptive_radius() {
        log::warn!(
            "tile overlap {overlap} is below the receptive radius {}; tiles will show seams",
            model.config().receptive_radius()
        );
    }
    let s = image.shape();
    let ys = tile_starts(s.h, tile, overlap);
    let xs = tile_starts(s.w, tile, overlap);
    let mut acc = vec![0.0f64; s.numel()];
    let mut norm = vec![0.0f64; s.n * s.plane()];
    for (yi, &y0) in ys.iter().enumerate() {
        let th = tile.min(s.h);
        for (xi, &x0) in xs.iter().enumerate() {
            let tw = tile.min(s.w);
            // context halo
            let cy0 = y0.saturating_sub(overlap);
            let cx0 = x0.saturating_sub(overlap);
            let cy1 = (y0 + th + overlap).min(s.h);
            let cx1 = (x0 + tw + overlap).min(s.w);
            let patch = image.crop(cy0, cx0, cy1 - cy0, cx1 - cx0)?;
            let out = model.forward(&patch)?;
            let lead_y = if yi > 0 { (ys[yi - 1] + th).saturating_sub(y0) } else { 0 };
            let trail_y = if yi + 1 < ys.len() { (y0 + th).saturating_sub(ys[yi + 1]) } else { 0 };
            let lead_x = if xi > 0 { (xs[xi - 1] + tw).saturating_sub(x0) } else { 0 };
            let trail_x = if xi + 1 < xs.len() { (x0 + tw).saturating_sub(xs[xi + 1]) } else { 0 };
            for n in 0..s.n {
                for y in y0..y0 + th {
                    let wy = ramp(y, y0, y0 + th, lead_y, trail_y);
                    for x in x0..x0 + tw {
                        let w = wy * ramp(x, x0, x0 + tw, lead_x, trail_x);
                        norm[n * s.plane() + y * s.w + x] += w;
                        for c in 0..s.c {
                            let v = out.at(n, c, y - cy0, x - cx0) as f64;
                            acc[image.index(n, c, y, x)] += w * v;
                        }
                    }
                }
            }
        }
    }
    let plane = s.plane();
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let n = i / (s.c * plane);
            (v / norm[n * plane + i % plane]) as f32
        })
        .collect();
    Tensor::from_vec(s, data)
}
