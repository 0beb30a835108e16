//! The optimization loop.
//!
//! Each iteration draws its batch from a ChaCha stream keyed by
//! `(seed, iteration)`, so a run resumed from a checkpoint sees exactly the
//! batches an uninterrupted run would have.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::MsrNet;
use crate::nn::{adam_step, lr_at, AdamConfig, TrainConfig};
use crate::tensor::Tensor;

/// Supplies aligned `(low-light, ground-truth)` batches.
pub trait BatchSource {
    fn sample_batch(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<(Tensor, Tensor)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Hooks invoked by [`train_loop`]. All methods default to no-ops.
pub trait TrainObserver {
    /// Called every `log_every` iterations and on the final one.
    fn on_log(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` iterations and once at the end.
    fn on_checkpoint(&mut self, _model: &MsrNet) -> Result<()> {
        Ok(())
    }

    /// Called with the offending batch before training aborts on a
    /// non-finite loss.
    fn on_divergence(&mut self, iter: usize, x: &Tensor, y: &Tensor) {
        log::error!(
            "non-finite loss at iteration {iter}: batch {} input finite={} target finite={}",
            x.shape(),
            x.is_finite(),
            y.is_finite()
        );
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {}

/// RNG for the batch of iteration `iter`.
pub fn batch_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rng
}

/// Trains from `model.iterations_done` up to `cfg.max_iters` and returns the
/// loss of every iteration run.
pub fn train_loop(
    model: &mut MsrNet,
    data: &dyn BatchSource,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let adam = AdamConfig::default();
    let start = model.iterations_done;
    let mut trace = Vec::with_capacity(cfg.max_iters.saturating_sub(start));
    for iter in start..cfg.max_iters {
        let lr = lr_at(iter, cfg)?;
        let mut rng = batch_rng(cfg.seed, iter);
        let (x, y) = data.sample_batch(&mut rng, cfg.batch)?;
        let loss = model.forward_backward(&x, &y, cfg.lambda)?;
        if !loss.is_finite() {
            observer.on_divergence(iter, &x, &y);
            return Err(Error::NonFiniteLoss { iter, loss });
        }
        for p in model.params_mut() {
            adam_step(p, lr, adam);
        }
        model.iterations_done = iter + 1;
        let record = LossRecord { iter, lr, loss };
        trace.push(record);
        if iter % cfg.log_every == 0 || iter + 1 == cfg.max_iters {
            observer.on_log(&record)?;
        }
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && iter + 1 != cfg.max_iters {
            observer.on_checkpoint(model)?;
        }
    }
    observer.on_checkpoint(model)?;
    Ok(trace)
}

/// Writes `iter,lr,loss` rows.
pub struct CsvLossLog<W: Write> {
    out: W,
}

impl<W: Write> CsvLossLog<W> {
    pub fn new(mut out: W, write_header: bool) -> Result<Self> {
        if write_header {
            writeln!(out, "iter,lr,loss")?;
        }
        Ok(CsvLossLog { out })
    }

    pub fn write(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.out, "{},{:e},{}", r.iter, r.lr, r.loss)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MsrNetConfig;
    use crate::tensor::Shape;
    use rand::Rng;

    struct Fixed {
        x: Tensor,
        y: Tensor,
    }

    impl BatchSource for Fixed {
        fn sample_batch(&self, _rng: &mut ChaCha8Rng, _batch: usize) -> Result<(Tensor, Tensor)> {
            Ok((self.x.clone(), self.y.clone()))
        }
    }

    struct Noisy;

    impl BatchSource for Noisy {
        fn sample_batch(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<(Tensor, Tensor)> {
            let x = Tensor::from_fn(Shape::new(batch, 3, 6, 6), |_, _, _, _| rng.random_range(0.0..1.0));
            let y = x.map(|v| v.sqrt());
            Ok((x, y))
        }
    }

    fn tiny() -> MsrNetConfig {
        MsrNetConfig {
            n: 2,
            v: vec![10.0, 100.0],
            k: 2,
            width: 4,
            kernel_hidden: 3,
            patch: 6,
        }
    }

    fn cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            max_iters: iters,
            lr_drop_iters: vec![],
            batch: 2,
            log_every: 1,
            checkpoint_every: 0,
            lambda: 1e-6,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let run = || {
            let mut m = MsrNet::new(tiny(), 1).unwrap();
            let t = train_loop(&mut m, &Noisy, &cfg(10), &mut Silent).unwrap();
            (t.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut m = MsrNet::new(tiny(), 2).unwrap();
        let before: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
        let c = TrainConfig { lr0: 0.0, ..cfg(5) };
        train_loop(&mut m, &Noisy, &c, &mut Silent).unwrap();
        for (p, b) in m.params().iter().zip(&before) {
            assert_eq!(p.value.data(), b.data());
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let mut full = MsrNet::new(tiny(), 3).unwrap();
        let trace = train_loop(&mut full, &Noisy, &cfg(10), &mut Silent).unwrap();

        let mut part = MsrNet::new(tiny(), 3).unwrap();
        let first = train_loop(&mut part, &Noisy, &cfg(5), &mut Silent).unwrap();
        let mut buf = Vec::new();
        crate::nn::checkpoint::write_checkpoint(&mut buf, &part, true).unwrap();
        let mut resumed = crate::nn::checkpoint::read_checkpoint(&buf[..]).unwrap();
        let second = train_loop(&mut resumed, &Noisy, &cfg(10), &mut Silent).unwrap();
        let joined: Vec<u64> = first.iter().chain(&second).map(|r| r.loss.to_bits()).collect();
        assert_eq!(joined, trace.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn divergence_aborts() {
        let x = Tensor::full(Shape::new(1, 3, 4, 4), 0.5);
        let mut y = Tensor::zeros(x.shape());
        y.data_mut()[0] = f32::NAN;
        let mut m = MsrNet::new(tiny(), 0).unwrap();
        let err = train_loop(&mut m, &Fixed { x, y }, &cfg(3), &mut Silent).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iter: 0, .. }));
    }

    #[test]
    fn strong_regularization_shrinks_weights() {
        let x = Tensor::full(Shape::new(1, 3, 5, 5), 0.4);
        let y = Tensor::zeros(x.shape());
        let mut m = MsrNet::new(tiny(), 4).unwrap();
        let c = TrainConfig { lambda: 1.0, lr0: 1e-3, ..cfg(1) };
        let norm = |m: &MsrNet| -> f64 {
            m.params()
                .iter()
                .filter(|p| p.kind == crate::nn::ParamKind::Weight)
                .map(|p| p.value.sum_sq())
                .sum()
        };
        let mut prev = norm(&m);
        for it in 1..=40 {
            let c = TrainConfig { max_iters: it, ..c.clone() };
            train_loop(&mut m, &Fixed { x: x.clone(), y: y.clone() }, &c, &mut Silent).unwrap();
            let now = norm(&m);
            assert!(now < prev, "iteration {it}: {now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn csv_log_format() {
        let mut buf = Vec::new();
        {
            let mut log = CsvLossLog::new(&mut buf, true).unwrap();
            log.write(&LossRecord { iter: 3, lr: 1e-4, loss: 0.5 }).unwrap();
        }
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,lr,loss\n3,1e-4,0.5\n");
    }
}
