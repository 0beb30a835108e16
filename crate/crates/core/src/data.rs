//! Image I/O, synthetic low-light degradation, manifests, splitting and
//! patch sampling.
//!
//! Degradation per channel, in this order:
//!
//! ```text
//! ll = clamp((hq − 0.5)·contrast + 0.5 + brightness, 0, 1) ^ gamma
//! ```
//!
//! The manifest is JSON lines, one record per LL image. LL paths are stored
//! relative to the manifest's directory; HQ paths are absolute.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::train::BatchSource;
use crate::tensor::{Shape, Tensor};

/// Recorded in every manifest row; names the degradation order.
pub const PIPELINE_VERSION: &str = "1:contrast>brightness>clamp>gamma";

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Decodes an image file into a `(1, 3, H, W)` tensor in [0, 1].
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb8_to_tensor(img.width() as usize, img.height() as usize, img.as_raw()))
}

pub fn rgb8_to_tensor(width: usize, height: usize, raw: &[u8]) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, y, x| {
        raw[(y * width + x) * 3 + c] as f32 / 255.0
    })
}

/// Quantizes a `(1, 3, H, W)` tensor to 8-bit RGB, clamping to [0, 1].
pub fn tensor_to_rgb8(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("tensor_to_rgb8", format!("expected 1x3xHxW, got {s}")));
    }
    let mut raw = Vec::with_capacity(s.numel());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                raw.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(raw)
}

/// Writes an 8-bit RGB PNG.
pub fn save_rgb(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let raw = tensor_to_rgb8(t)?;
    let s = t.shape();
    image::save_buffer_with_format(
        path,
        &raw,
        s.w as u32,
        s.h as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Parameters of one synthetic degradation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub contrast: f32,
    pub brightness: f32,
    pub gamma: f32,
    /// Seed the three values were drawn from.
    pub seed: u64,
}

impl DegradeParams {
    pub fn identity() -> Self {
        DegradeParams {
            contrast: 1.0,
            brightness: 0.0,
            gamma: 1.0,
            seed: 0,
        }
    }

    /// Draws contrast, brightness and gamma uniformly from `ranges`.
    pub fn sample(seed: u64, ranges: &DegradeRanges) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DegradeParams {
            contrast: rng.random_range(ranges.contrast.0..=ranges.contrast.1),
            brightness: rng.random_range(ranges.brightness.0..=ranges.brightness.1),
            gamma: rng.random_range(ranges.gamma.0..=ranges.gamma.1),
            seed,
        }
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        ((v - 0.5) * self.contrast + 0.5 + self.brightness)
            .clamp(0.0, 1.0)
            .powf(self.gamma)
    }
}

/// Closed sampling intervals for [`DegradeParams::sample`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeRanges {
    pub contrast: (f32, f32),
    pub brightness: (f32, f32),
    pub gamma: (f32, f32),
}

impl Default for DegradeRanges {
    fn default() -> Self {
        DegradeRanges {
            contrast: (0.5, 0.9),
            brightness: (-0.2, 0.0),
            gamma: (1.5, 3.5),
        }
    }
}

/// Applies the pointwise degradation to every pixel and channel.
pub fn degrade(hq: &Tensor, p: &DegradeParams) -> Tensor {
    hq.map(|v| p.apply(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest row: an HQ source, one of its LL renderings, and how the
/// latter was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub hq: String,
    pub ll: String,
    #[serde(flatten)]
    pub degrade: DegradeParams,
    pub split: Split,
    pub pipeline_version: String,
}

impl ImagePair {
    /// Identifier used in reports: the LL file stem.
    pub fn id(&self) -> String {
        Path::new(&self.ll)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.ll.clone())
    }

    pub fn hq_path(&self, base: &Path) -> PathBuf {
        base.join(&self.hq)
    }

    pub fn ll_path(&self, base: &Path) -> PathBuf {
        base.join(&self.ll)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ImagePair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(rows)
}

/// Directory against which a manifest's relative paths resolve.
pub fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Clone, Debug)]
pub struct SynthesisOptions {
    pub per_image: usize,
    pub seed: u64,
    pub ranges: DegradeRanges,
    /// Split by HQ parent with this test fraction; `None` marks every row train.
    pub test_fraction: Option<f64>,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            per_image: 10,
            seed: 0,
            ranges: DegradeRanges::default(),
            test_fraction: Some(0.2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisSummary {
    pub rows: Vec<ImagePair>,
    pub manifest: PathBuf,
    pub used_images: usize,
    pub skipped: Vec<PathBuf>,
}

/// Per-pair degradation seed for HQ image `image` (in sorted order) and copy `copy`.
pub fn pair_seed(seed: u64, image: usize, copy: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((image as u64) << 20) | copy as u64))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Regular files of `dir`, sorted by path.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Renders `per_image` degraded copies of every decodable image in `hq_dir`
/// into `out_dir/ll/` and writes `out_dir/manifest.jsonl`.
pub fn synthesize_dataset(hq_dir: &Path, out_dir: &Path, opts: &SynthesisOptions) -> Result<SynthesisSummary> {
    let hq_dir = hq_dir.canonicalize()?;
    let files = list_files(&hq_dir)?;
    std::fs::create_dir_all(out_dir.join("ll"))?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut used = 0;
    for (index, path) in files.iter().enumerate() {
        let hq = match load_rgb(path) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(path.clone());
                continue;
            }
        };
        used += 1;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("image{index}"));
        for copy in 0..opts.per_image {
            let params = DegradeParams::sample(pair_seed(opts.seed, index, copy), &opts.ranges);
            let ll_rel = format!("ll/{stem}_{copy:02}.png");
            save_rgb(out_dir.join(&ll_rel), &degrade(&hq, &params))?;
            rows.push(ImagePair {
                hq: path.to_string_lossy().into_owned(),
                ll: ll_rel,
                degrade: params,
                split: Split::Train,
                pipeline_version: PIPELINE_VERSION.to_string(),
            });
        }
    }
    if used == 0 {
        return Err(Error::NoImages(hq_dir));
    }
    if let (Some(fraction), false) = (opts.test_fraction, rows.is_empty()) {
        let (train, test) = split_dataset(&rows, fraction, opts.seed)?;
        rows = train.into_iter().chain(test).collect();
        rows.sort_by(|a, b| a.ll.cmp(&b.ll));
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &rows)?;
    Ok(SynthesisSummary {
        rows,
        manifest,
        used_images: used,
        skipped,
    })
}

/// Splits rows by HQ parent: `round(fraction · parents)` parents, chosen by
/// a seeded shuffle, go to test with all their LL children.
pub fn split_dataset(rows: &[ImagePair], test_fraction: f64, seed: u64) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let parents: Vec<&str> = rows
        .iter()
        .map(|r| r.hq.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_test = (test_fraction * parents.len() as f64).round() as usize;
    if n_test == 0 || n_test == parents.len() {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} of {} source images leaves one side empty",
            parents.len()
        )));
    }
    let mut order = parents.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5eed_5eed)));
    let test: BTreeSet<&str> = order[..n_test].iter().copied().collect();
    let (mut train, mut tst) = (Vec::new(), Vec::new());
    for r in rows {
        let mut r = r.clone();
        if test.contains(r.hq.as_str()) {
            r.split = Split::Test;
            tst.push(r);
        } else {
            r.split = Split::Train;
            train.push(r);
        }
    }
    Ok((train, tst))
}

/// A seeded synthetic "photo": a smooth two-color gradient with textured
/// rectangles and ellipses. Stands in for real HQ images in demos and tests.
pub fn procedural_scene(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.random_range(0.1..0.95f32), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)];
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let t = 0.5 + 0.5 * ((y as f32 / h as f32 - 0.5) * dy + (x as f32 / w as f32 - 0.5) * dx);
        c0[c] * (1.0 - t) + c1[c] * t
    });
    let shapes = rng.random_range(6..14);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let ry = rng.random_range(0.05..0.35) * h as f32;
        let rx = rng.random_range(0.05..0.35) * w as f32;
        let ellipse = rng.random_bool(0.5);
        let freq = if rng.random_bool(0.4) { rng.random_range(0.15..0.8f32) } else { 0.0 };
        let amp = rng.random_range(0.05..0.2f32);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if !inside {
                    continue;
                }
                let stripe = amp * (freq * (x as f32 + 0.7 * y as f32)).sin();
                for (c, &base) in col.iter().enumerate() {
                    img.set(0, c, y, x, (base + stripe).clamp(0.0, 1.0));
                }
            }
        }
    }
    let noise = 0.01f32;
    img.data_mut().iter_mut().for_each(|v| *v = (*v + rng.random_range(-noise..noise)).clamp(0.0, 1.0));
    img
}

/// HQ and LL images of one manifest row, decoded.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub id: String,
    pub hq: Tensor,
    pub ll: Tensor,
}

impl LoadedPair {
    pub fn load(row: &ImagePair, base: &Path) -> Result<Self> {
        let hq = load_rgb(row.hq_path(base))?;
        let ll = load_rgb(row.ll_path(base))?;
        if hq.shape() != ll.shape() {
            return Err(Error::Manifest(format!(
                "{}: HQ {} and LL {} differ in size",
                row.id(),
                hq.shape(),
                ll.shape()
            )));
        }
        Ok(LoadedPair { id: row.id(), hq, ll })
    }
}

/// Aligned crops taken at the same coordinates of LL and HQ.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub row: usize,
    pub col: usize,
    pub ll: Tensor,
    pub hq: Tensor,
}

fn random_crop(pair: &LoadedPair, patch: usize, rng: &mut ChaCha8Rng) -> Result<PatchPair> {
    let s = pair.hq.shape();
    let row = rng.random_range(0..=s.h - patch);
    let col = rng.random_range(0..=s.w - patch);
    Ok(PatchPair {
        row,
        col,
        ll: pair.ll.crop(row, col, patch, patch)?,
        hq: pair.hq.crop(row, col, patch, patch)?,
    })
}

/// `per_pair` uniformly placed `patch × patch` crops. Images smaller than
/// the patch yield nothing (with a warning).
pub fn extract_patches(pair: &LoadedPair, patch: usize, per_pair: usize, seed: u64) -> Result<Vec<PatchPair>> {
    let s = pair.hq.shape();
    if s.h < patch || s.w < patch {
        log::warn!("{}: {}x{} is smaller than patch {patch}; skipped", pair.id, s.h, s.w);
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..per_pair).map(|_| random_crop(pair, patch, &mut rng)).collect()
}

fn stack_patches<'a>(items: impl Iterator<Item = &'a PatchPair>) -> Result<(Tensor, Tensor)> {
    let (ll, hq): (Vec<Tensor>, Vec<Tensor>) = items.map(|p| (p.ll.clone(), p.hq.clone())).unzip();
    Ok((Tensor::stack(&ll)?, Tensor::stack(&hq)?))
}

/// Training source drawing random crops from whole image pairs: pair and
/// position uniform, with replacement.
pub struct PairSampler {
    pairs: Vec<LoadedPair>,
    patch: usize,
}

impl PairSampler {
    pub fn new(pairs: Vec<LoadedPair>, patch: usize) -> Result<Self> {
        let pairs: Vec<LoadedPair> = pairs
            .into_iter()
            .filter(|p| {
                let ok = p.hq.shape().h >= patch && p.hq.shape().w >= patch;
                if !ok {
                    log::warn!("{}: smaller than patch {patch}; not used for training", p.id);
                }
                ok
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(format!("no training image is at least {patch}x{patch}")));
        }
        Ok(PairSampler { pairs, patch })
    }

    /// Loads every train-split row of a manifest.
    pub fn from_manifest(rows: &[ImagePair], base: &Path, patch: usize) -> Result<Self> {
        let pairs = rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| LoadedPair::load(r, base))
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs, patch)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl BatchSource for PairSampler {
    fn sample_batch(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<(Tensor, Tensor)> {
        let crops = (0..batch)
            .map(|_| {
                let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
                random_crop(pair, self.patch, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        stack_patches(crops.iter())
    }
}

/// Training source over a fixed set of patch pairs.
pub struct PatchSet {
    patches: Vec<PatchPair>,
    /// Every batch is the whole set, in order, regardless of batch size.
    full_batch: bool,
}

impl PatchSet {
    /// Samples `batch` patches uniformly with replacement.
    pub fn sampled(patches: Vec<PatchPair>) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::InvalidArgument("empty patch set".into()));
        }
        Ok(PatchSet {
            patches,
            full_batch: false,
        })
    }

    /// Always returns every patch.
    pub fn full_batch(patches: Vec<PatchPair>) -> Result<Self> {
        Ok(PatchSet {
            full_batch: true,
            ..Self::sampled(patches)?
        })
    }
}

impl BatchSource for PatchSet {
    fn sample_batch(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<(Tensor, Tensor)> {
        if self.full_batch {
            return stack_patches(self.patches.iter());
        }
        let picks: Vec<&PatchPair> = (0..batch)
            .map(|_| &self.patches[rng.random_range(0..self.patches.len())])
            .collect();
        stack_patches(picks.into_iter())
    }
}
