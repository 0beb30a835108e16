//! Wall-clock inference timing over square inputs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{enhance_image, MsrNet, Tiling};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SIZES: [usize; 3] = [500, 750, 1000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub repeats: usize,
    pub mean_s: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub std_s: f64,
}

/// Times `repeat` enhancements of a random `size × size` image per size.
pub fn benchmark(model: &MsrNet, sizes: &[usize], repeat: usize, tiling: Tiling, seed: u64) -> Result<Vec<BenchRow>> {
    if repeat == 0 || sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument("benchmark needs positive sizes and repeat count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let image = Tensor::from_fn(Shape::new(1, 3, size, size), |_, _, _, _| rng.random_range(0.0..1.0));
        let times = (0..repeat)
            .map(|_| {
                let start = Instant::now();
                enhance_image(&image, model, tiling)?;
                Ok(start.elapsed().as_secs_f64())
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean_s = times.iter().sum::<f64>() / repeat as f64;
        let std_s = if repeat > 1 {
            (times.iter().map(|t| (t - mean_s).powi(2)).sum::<f64>() / (repeat - 1) as f64).sqrt()
        } else {
            0.0
        };
        log::info!("{size}x{size}: {mean_s:.3}s ± {std_s:.3}s over {repeat}");
        rows.push(BenchRow { size, repeats: repeat, mean_s, std_s });
    }
    Ok(rows)
}

/// Adjacent pairs (by increasing size) where the larger input ran faster.
pub fn monotone_violations(rows: &[BenchRow]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.size);
    sorted
        .windows(2)
        .filter(|w| w[1].mean_s < w[0].mean_s)
        .map(|w| (w[0].size, w[1].size))
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("size,repeats,mean_s,std_s\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", r.size, r.repeats, r.mean_s, r.std_s);
    }
    out
}
