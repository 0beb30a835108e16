use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msrnet::bench;
use msrnet::data::{
    list_files, load_rgb, manifest_base, read_manifest, save_rgb, synthesize_dataset, PairSampler, Split,
    SynthesisOptions, PIPELINE_VERSION,
};
use msrnet::metrics::{self, AngularMode, Candidate, EvalOptions, SsimMode};
use msrnet::model::{enhance_image, Tiling};
use msrnet::nn::checkpoint;
use msrnet::nn::train::{train_loop, CsvLossLog, LossRecord, TrainObserver};
use msrnet::retinex::{self, MsrScales, RadiusRule};
use msrnet::tensor::{Shape, Tensor};
use msrnet::{MsrNet, MsrNetConfig};
use serde_json::json;

use crate::config::RunConfig;
use crate::{AngularArg, BenchmarkArgs, EnhanceArgs, EvaluateArgs, MsrArgs, SplitArg, SsimArg, SynthesizeArgs, TrainArgs, UsageError};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.msrn";
pub const LOSS_FILE: &str = "loss.csv";

fn write_run_config(dir: &Path, value: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(RUN_CONFIG_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn synthesize(a: &SynthesizeArgs) -> Result<()> {
    if !a.no_split && !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(UsageError(format!("--test-fraction must lie in (0, 1), got {}", a.test_fraction)).into());
    }
    let opts = SynthesisOptions {
        per_image: a.per_image,
        seed: a.seed,
        test_fraction: (!a.no_split).then_some(a.test_fraction),
        ..SynthesisOptions::default()
    };
    let summary = synthesize_dataset(&a.hq_dir, &a.out, &opts)?;
    write_run_config(
        &a.out,
        json!({
            "command": "synthesize",
            "hq_dir": a.hq_dir,
            "per_image": a.per_image,
            "seed": a.seed,
            "test_fraction": opts.test_fraction,
            "ranges": opts.ranges,
            "pipeline_version": PIPELINE_VERSION,
        }),
    )?;
    let test = summary.rows.iter().filter(|r| r.split == Split::Test).count();
    println!(
        "wrote {} low-light images ({} train, {} test) from {} sources, {} skipped; manifest {}",
        summary.rows.len(),
        summary.rows.len() - test,
        test,
        summary.used_images,
        summary.skipped.len(),
        summary.manifest.display()
    );
    Ok(())
}

struct CliObserver {
    log: CsvLossLog<File>,
    checkpoint: PathBuf,
}

impl TrainObserver for CliObserver {
    fn on_log(&mut self, r: &LossRecord) -> msrnet::Result<()> {
        log::info!("iter {} lr {:e} loss {:.6}", r.iter, r.lr, r.loss);
        self.log.write(r)
    }

    fn on_checkpoint(&mut self, model: &MsrNet) -> msrnet::Result<()> {
        log::debug!("checkpoint at iteration {}", model.iterations_done);
        checkpoint::save(&self.checkpoint, model, true)
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.max_iters {
        rc.max_iters = v;
    }
    if let Some(v) = a.seed {
        rc.seed = v;
    }
    if let Some(v) = a.batch {
        rc.batch = v;
    }
    if let Some(v) = a.lambda {
        rc.lambda = v;
    }
    if let Some(v) = a.lr {
        rc.lr = v;
    }
    if let Some(v) = a.log_every {
        rc.log_every = v;
    }
    rc.validate()?;

    let rows = read_manifest(&a.manifest)?;
    if !rows.iter().any(|r| r.split == Split::Train) {
        bail!("{} has no train rows", a.manifest.display());
    }
    let data = PairSampler::from_manifest(&rows, &manifest_base(&a.manifest), rc.patch)?;
    let mut model = match &a.resume {
        Some(p) => checkpoint::load_expecting(p, &rc.model())?,
        None => MsrNet::new(rc.model(), rc.seed)?,
    };
    log::info!(
        "{} training pairs, {} parameters, starting at iteration {}",
        data.len(),
        rc.model().param_count(),
        model.iterations_done
    );

    std::fs::create_dir_all(&a.out)?;
    write_run_config(
        &a.out,
        json!({
            "command": "train",
            "manifest": a.manifest,
            "resume": a.resume,
            "config": rc,
        }),
    )?;
    let loss_path = a.out.join(LOSS_FILE);
    let append = a.resume.is_some() && loss_path.is_file();
    let file = if append {
        OpenOptions::new().append(true).open(&loss_path)?
    } else {
        File::create(&loss_path)?
    };
    let mut observer = CliObserver {
        log: CsvLossLog::new(file, !append)?,
        checkpoint: a.out.join(CHECKPOINT_FILE),
    };
    let trace = train_loop(&mut model, &data, &rc.train(), &mut observer)?;
    println!(
        "trained {} iterations (now at {}); final loss {}; checkpoint {}",
        trace.len(),
        model.iterations_done,
        trace.last().map(|r| r.loss.to_string()).unwrap_or_else(|| "n/a".into()),
        observer.checkpoint.display()
    );
    Ok(())
}

fn load_model(path: &Path, expected: Option<&Path>) -> Result<MsrNet> {
    let model = match expected {
        Some(cfg) => checkpoint::load_expecting(path, &RunConfig::load(cfg)?.model())?,
        None => checkpoint::load(path)?,
    };
    Ok(model)
}

fn tiling_for(model: &MsrNet, tile: Option<usize>, overlap: Option<usize>) -> Tiling {
    match tile {
        Some(tile) => Tiling::Tiled {
            tile,
            overlap: overlap.unwrap_or_else(|| model.config().receptive_radius()),
        },
        None => Tiling::Whole,
    }
}

/// Input and output side by side with a white gutter.
fn comparison_sheet(input: &Tensor, output: &Tensor) -> Tensor {
    const GAP: usize = 8;
    let s = input.shape();
    Tensor::from_fn(Shape::new(1, 3, s.h, 2 * s.w + GAP), |_, c, y, x| {
        if x < s.w {
            input.at(0, c, y, x)
        } else if x < s.w + GAP {
            1.0
        } else {
            output.at(0, c, y, x - s.w - GAP)
        }
    })
}

pub fn enhance(a: &EnhanceArgs) -> Result<()> {
    let model = load_model(&a.model, a.config.as_deref())?;
    let tiling = tiling_for(&model, a.tile, a.overlap);
    let dir_mode = a.input.is_dir();
    let jobs: Vec<(PathBuf, PathBuf)> = if dir_mode {
        list_files(&a.input)?
            .into_iter()
            .map(|p| {
                let out = a.output.join(p.file_name().expect("listed files have names"));
                (p, out)
            })
            .collect()
    } else if a.output.is_dir() {
        let name = a.input.file_name().context("input has no file name")?;
        vec![(a.input.clone(), a.output.join(name))]
    } else {
        vec![(a.input.clone(), a.output.clone())]
    };
    let out_dir = if dir_mode || a.output.is_dir() {
        a.output.clone()
    } else {
        parent_dir(&a.output)
    };
    std::fs::create_dir_all(&out_dir)?;
    if let Some(sheet) = &a.sheet {
        std::fs::create_dir_all(sheet)?;
    }
    let mut done = 0;
    for (src, dst) in &jobs {
        let image = match load_rgb(src) {
            Ok(t) => t,
            Err(e) if dir_mode => {
                log::warn!("skipping {}: {e}", src.display());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let out = enhance_image(&image, &model, tiling)?;
        save_rgb(dst, &out)?;
        if let Some(sheet) = &a.sheet {
            save_rgb(sheet.join(dst.file_name().expect("output has a name")), &comparison_sheet(&image, &out))?;
        }
        log::info!("{} -> {}", src.display(), dst.display());
        done += 1;
    }
    write_run_config(
        &out_dir,
        json!({
            "command": "enhance",
            "model": a.model,
            "model_config": model.config(),
            "iterations_done": model.iterations_done,
            "input": a.input,
            "tiling": tiling,
            "sheet": a.sheet,
        }),
    )?;
    println!("enhanced {done} image(s) into {}", out_dir.display());
    Ok(())
}

pub fn msr(a: &MsrArgs) -> Result<()> {
    let scales = MsrScales::uniform(&a.scales)?;
    let image = load_rgb(&a.input)?;
    let raw = if a.cascade {
        retinex::build_msr_cascade(&scales, RadiusRule::default())?.forward(&image, retinex::LOG_FLOOR)?
    } else {
        retinex::msr(&image, &scales, retinex::LOG_FLOOR)?
    };
    // only the zero-padding halo would survive on a flat image; show it as flat
    let flat = image.data().windows(2).all(|w| w[0] == w[1]);
    let raw = if flat { Tensor::zeros(raw.shape()) } else { raw };
    let raw = if a.crf {
        retinex::crf_baseline(&raw, &image, retinex::CRF_ALPHA, retinex::CRF_BETA)?
    } else {
        raw
    };
    std::fs::create_dir_all(parent_dir(&a.output))?;
    save_rgb(&a.output, &retinex::postprocess_display(&raw, a.clip)?)?;
    write_run_config(
        &parent_dir(&a.output),
        json!({
            "command": "msr",
            "input": a.input,
            "output": a.output,
            "scales": scales.scales(),
            "clip_percent": a.clip,
            "cascade": a.cascade,
            "crf": a.crf,
            "log_floor": retinex::LOG_FLOOR,
            "radius_sigmas": RadiusRule::default().sigmas,
        }),
    )?;
    println!("wrote {}", a.output.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let rows = read_manifest(&a.manifest)?;
    let rows: Vec<_> = rows
        .into_iter()
        .filter(|r| match a.split {
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Test => r.split == Split::Test,
            SplitArg::All => true,
        })
        .collect();
    if rows.is_empty() {
        bail!("{} has no {:?} rows", a.manifest.display(), a.split);
    }
    let model = a.model.as_deref().map(|p| load_model(p, None)).transpose()?;
    let (candidate, source) = match (&model, &a.enhanced_dir) {
        (Some(m), _) => (
            Candidate::Model {
                model: m,
                tiling: tiling_for(m, a.tile, None),
            },
            json!({"model": a.model, "model_config": m.config(), "iterations_done": m.iterations_done}),
        ),
        (None, Some(dir)) => (Candidate::EnhancedDir(dir.clone()), json!({"enhanced_dir": dir})),
        (None, None) if a.input_baseline => (Candidate::Input, json!("input")),
        _ => (Candidate::GroundTruth, json!("ground-truth")),
    };
    let opts = EvalOptions {
        ssim_mode: match a.ssim {
            SsimArg::Luma => SsimMode::Luma,
            SsimArg::ChannelMean => SsimMode::ChannelMean,
        },
        angular_mode: match a.angular {
            AngularArg::Global => AngularMode::Global,
            AngularArg::PerPixel => AngularMode::PerPixel,
        },
    };
    let report = metrics::evaluate(&rows, &manifest_base(&a.manifest), &candidate, &opts)?;
    let config = json!({
        "command": "evaluate",
        "manifest": a.manifest,
        "split": format!("{:?}", a.split).to_lowercase(),
        "source": source,
        "options": opts,
    });
    std::fs::create_dir_all(&a.report)?;
    std::fs::write(a.report.join("report.csv"), report.to_csv())?;
    std::fs::write(
        a.report.join("report.json"),
        serde_json::to_string_pretty(&report.summary_json(config.clone()))? + "\n",
    )?;
    write_run_config(&a.report, config)?;
    println!("{}", report.summary_line());
    Ok(())
}

pub fn benchmark(a: &BenchmarkArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => checkpoint::load(p)?,
        None => {
            log::warn!("no --model given; timing a randomly initialized default network");
            MsrNet::new(MsrNetConfig::default(), a.seed)?
        }
    };
    let tiling = tiling_for(&model, a.tile, None);
    let rows = bench::benchmark(&model, &a.sizes, a.repeat, tiling, a.seed)?;
    let csv = bench::bench_csv(&rows);
    print!("{csv}");
    let violations = bench::monotone_violations(&rows);
    if violations.is_empty() {
        println!("monotone: yes");
    } else {
        println!("monotone: no {violations:?}");
        log::warn!("time did not grow with size between {violations:?}");
    }
    if let Some(out) = &a.out {
        let dir = parent_dir(out);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(out, &csv)?;
        write_run_config(
            &dir,
            json!({
                "command": "benchmark",
                "model": a.model,
                "model_config": model.config(),
                "sizes": a.sizes,
                "repeat": a.repeat,
                "tiling": tiling,
                "seed": a.seed,
                "threads": rayon::current_num_threads(),
            }),
        )?;
    }
    Ok(())
}
