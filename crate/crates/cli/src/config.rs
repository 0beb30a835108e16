//! Flat TOML run configuration for `train`.
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! ```toml
//! # architecture
//! n = 4                        # log-transform scales
//! v = [1.0, 10.0, 100.0, 300.0]
//! k = 10                       # hidden 3x3 conv layers
//! width = 32                   # hidden channels
//! kernel_hidden = 3
//! patch = 64                   # training crop side
//!
//! # optimization
//! lr = 1e-4
//! lr_drop_iters = [100000, 200000]
//! lr_drop_factor = 10.0
//! max_iters = 300000
//! batch = 64
//! lambda = 1e-6
//! seed = 0                     # weight init and batch sampling
//! log_every = 100
//! checkpoint_every = 10000
//! ```

use std::path::Path;

use anyhow::Context;
use msrnet::nn::TrainConfig;
use msrnet::MsrNetConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub v: Vec<f32>,
    pub k: usize,
    pub width: usize,
    pub kernel_hidden: usize,
    pub patch: usize,

    pub lr: f64,
    pub lr_drop_iters: Vec<usize>,
    pub lr_drop_factor: f64,
    pub max_iters: usize,
    pub batch: usize,
    pub lambda: f32,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&MsrNetConfig::default(), &TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(m: &MsrNetConfig, t: &TrainConfig) -> Self {
        RunConfig {
            n: m.n,
            v: m.v.clone(),
            k: m.k,
            width: m.width,
            kernel_hidden: m.kernel_hidden,
            patch: m.patch,
            lr: t.lr0,
            lr_drop_iters: t.lr_drop_iters.clone(),
            lr_drop_factor: t.lr_drop_factor,
            max_iters: t.max_iters,
            batch: t.batch,
            lambda: t.lambda,
            seed: t.seed,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    pub fn model(&self) -> MsrNetConfig {
        MsrNetConfig {
            n: self.n,
            v: self.v.clone(),
            k: self.k,
            width: self.width,
            kernel_hidden: self.kernel_hidden,
            patch: self.patch,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr,
            lr_drop_iters: self.lr_drop_iters.clone(),
            lr_drop_factor: self.lr_drop_factor,
            max_iters: self.max_iters,
            batch: self.batch,
            lambda: self.lambda,
            seed: self.seed,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn validate(&self) -> msrnet::Result<()> {
        self.model().validate()?;
        self.train().validate()
    }
}
