//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Positional arguments select
//! criteria by number, e.g. `cargo test --release --test acceptance -- 1 6`.
//! Set `MSRNET_HQ_DIR` to a directory of at least 50 HQ photos to run the
//! desk-scale checks on real images instead of procedural scenes.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use msrnet::bench::{self, DEFAULT_SIZES};
use msrnet::data::{
    degrade, extract_patches, procedural_scene, read_manifest, save_rgb, synthesize_dataset, DegradeParams,
    DegradeRanges, LoadedPair, PairSampler, PatchSet, Split, SynthesisOptions,
};
use msrnet::metrics::{
    angular_error, discrete_entropy, evaluate, histogram_entropy, ssim, AngularMode, Candidate, EvalOptions,
    MetricReport,
};
use msrnet::model::Tiling;
use msrnet::nn::checkpoint::write_checkpoint;
use msrnet::nn::train::{train_loop, CsvLossLog, LossRecord, Silent, TrainObserver};
use msrnet::nn::TrainConfig;
use msrnet::retinex::{build_msr_cascade, msr_with, MsrScales, RadiusRule, LOG_FLOOR};
use msrnet::tensor::{Shape, Tensor};
use msrnet::{MsrNet, MsrNetConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria known to be out of reach; see README.
const KNOWN_UNMET: &[usize] = &[3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.random_range(0.0..1.0))
}

fn c1_cascade() -> Outcome {
    let scales = MsrScales::uniform(&[15.0, 80.0, 250.0]).unwrap();
    let rule = RadiusRule { sigmas: 4.0 };
    let cascade = build_msr_cascade(&scales, rule).unwrap();
    let max_radius = rule.radius(250.0);
    let mut worst = 0.0f32;
    let mut interior = 0usize;
    for seed in 0..10 {
        let img = random_image(128, 128, seed);
        let a = cascade.forward(&img, LOG_FLOOR).unwrap();
        let b = msr_with(&img, &scales, rule, LOG_FLOOR).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
        interior += 128usize.saturating_sub(2 * max_radius).pow(2);
    }
    outcome(
        worst < 1e-4,
        format!(
            "max abs diff {worst:.2e} over the full 128x128 frame of 10 images (tol 1e-4); \
             radius {max_radius} leaves {interior} interior pixels, so the full frame is compared"
        ),
    )
}

fn c2_gradients() -> Outcome {
    let x = procedural_scene(8, 8, 11).map(|v| 0.2 + 0.6 * v);
    let y = procedural_scene(8, 8, 12);
    let mut worst = 0.0f64;
    let mut at = String::new();
    let (mut checked, mut kinks, mut fwd) = (0, 0, 0.0f64);
    for seed in 0..3 {
        let mut net = MsrNet::new(common::fd::small_config(), seed).unwrap();
        let r = common::fd::reference_fd_check(&mut net, &x, &y, 1e-3, 1e-3, 1e-6);
        if r.worst > worst {
            worst = r.worst;
            at = r.at.clone();
        }
        checked += r.checked;
        kinks += r.kink_crossings;
        fwd = fwd.max(r.forward_diff);
    }
    outcome(
        worst < 1e-3 && fwd < 1e-4,
        format!(
            "{checked} gradient entries over 3 inits, worst relative error {worst:.2e} (tol 1e-3) at {at}; \
             {kinks} ReLU-kink entries; reference forward agrees to {fwd:.1e}"
        ),
    )
}

fn overfit_run(iters: usize) -> f64 {
    let hq = procedural_scene(32, 32, 5);
    let ll = degrade(&hq, &DegradeParams::sample(5, &DegradeRanges::default()));
    let pair = LoadedPair { id: "scene".into(), hq, ll };
    let patches = extract_patches(&pair, 4, 8, 7).unwrap();
    let data = PatchSet::full_batch(patches).unwrap();
    let config = MsrNetConfig { k: 1, width: 8, patch: 4, ..MsrNetConfig::default() };
    let mut net = MsrNet::new(config, 0).unwrap();
    let cfg = TrainConfig { max_iters: iters, batch: 8, log_every: iters, checkpoint_every: 0, ..TrainConfig::default() };
    let trace = train_loop(&mut net, &data, &cfg, &mut Silent).unwrap();
    trace.last().unwrap().loss
}

fn c3_overfit() -> Outcome {
    let loss = overfit_run(2000);
    let extended = overfit_run(20_000);
    outcome(
        loss < 1e-3,
        format!(
            "8 fixed 4x4 pairs, n=4 K=1 width=8, lr 1e-4: loss {loss:.3e} after 2000 iterations (tol 1e-3); \
             info: {extended:.3e} after 20000"
        ),
    )
}

/// HQ directory for the desk-scale checks: `MSRNET_HQ_DIR`, or 50
/// procedural 128x128 scenes.
fn desk_hq(tmp: &Path) -> PathBuf {
    if let Some(dir) = std::env::var_os("MSRNET_HQ_DIR") {
        return PathBuf::from(dir);
    }
    let dir = tmp.join("hq");
    std::fs::create_dir_all(&dir).unwrap();
    for i in 0..50u64 {
        save_rgb(dir.join(format!("scene{i:03}.png")), &procedural_scene(128, 128, 1000 + i)).unwrap();
    }
    dir
}

struct Desk {
    _tmp: tempfile::TempDir,
    manifest: PathBuf,
    sources: usize,
}

fn desk_dataset() -> Desk {
    let tmp = tempfile::tempdir().unwrap();
    let hq = desk_hq(tmp.path());
    let out = tmp.path().join("ds");
    let summary = synthesize_dataset(&hq, &out, &SynthesisOptions { seed: 1, ..SynthesisOptions::default() }).unwrap();
    Desk { manifest: summary.manifest, sources: summary.used_images, _tmp: tmp }
}

fn desk_train(desk: &Desk, config: MsrNetConfig, iters: usize) -> (MsrNet, f64) {
    let rows = read_manifest(&desk.manifest).unwrap();
    let base = desk.manifest.parent().unwrap();
    let data = PairSampler::from_manifest(&rows, base, config.patch).unwrap();
    let mut net = MsrNet::new(config, 0).unwrap();
    let cfg = TrainConfig { max_iters: iters, batch: 2, log_every: 1000, checkpoint_every: 0, ..TrainConfig::default() };
    let trace = train_loop(&mut net, &data, &cfg, &mut Silent).unwrap();
    let tail = &trace[trace.len().saturating_sub(500)..];
    let recent = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
    (net, recent)
}

fn desk_eval(desk: &Desk, candidate: &Candidate) -> MetricReport {
    let rows: Vec<_> = read_manifest(&desk.manifest).unwrap().into_iter().filter(|r| r.split == Split::Test).collect();
    evaluate(&rows, desk.manifest.parent().unwrap(), candidate, &EvalOptions::default()).unwrap()
}

fn c4_desk(desk: &Desk) -> Outcome {
    let iters = 10_000;
    let config = MsrNetConfig { patch: 32, ..MsrNetConfig::default() };
    let (net, recent) = desk_train(desk, config, iters);
    let input = desk_eval(desk, &Candidate::Input).aggregate;
    let model = desk_eval(desk, &Candidate::Model { model: &net, tiling: Tiling::Whole }).aggregate;
    let (si, sm) = (input.ssim.unwrap(), model.ssim.unwrap());
    let (ai, am) = (input.angular_deg.unwrap(), model.angular_deg.unwrap());
    outcome(
        sm - si >= 0.10 && am < ai,
        format!(
            "{} sources, {} test images, default net, {iters} iterations (recent loss {recent:.2}): \
             SSIM {sm:.4} vs input {si:.4} (gain {:.4}, need >= 0.10); angular {am:.3} vs input {ai:.3} deg",
            desk.sources,
            model.count,
            sm - si
        ),
    )
}

fn c5_scales(desk: &Desk) -> Outcome {
    let iters = 4000;
    let base = MsrNetConfig { k: 6, patch: 32, ..MsrNetConfig::default() };
    let one = MsrNetConfig { n: 1, v: vec![300.0], ..base.clone() };
    let (net4, _) = desk_train(desk, base, iters);
    let (net1, _) = desk_train(desk, one, iters);
    let s4 = desk_eval(desk, &Candidate::Model { model: &net4, tiling: Tiling::Whole }).aggregate.ssim.unwrap();
    let s1 = desk_eval(desk, &Candidate::Model { model: &net1, tiling: Tiling::Whole }).aggregate.ssim.unwrap();
    outcome(
        s4 >= s1 - 0.005,
        format!("K=6, {iters} iterations, seed 0: SSIM n=4 {s4:.4} vs n=1 {s1:.4} (need n=4 >= n=1 - 0.005)"),
    )
}

fn gray_levels(levels: &[u8], h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, y, x| levels[(y * w + x) % levels.len()] as f32 / 255.0)
}

fn pixel(r: f32, g: f32, b: f32) -> Tensor {
    Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![r, g, b]).unwrap()
}

fn c6_metrics() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let x = random_image(32, 32, 3);
    check(ssim(&x, &x).unwrap() == 1.0, "SSIM(x, x) = 1");
    let all: Vec<u8> = (0..=255).collect();
    check(discrete_entropy(&gray_levels(&all, 16, 32)).unwrap() == 8.0, "uniform-256 entropy = 8");
    check(histogram_entropy(&[4u64; 256]) == 8.0, "uniform histogram entropy = 8");
    for mode in [AngularMode::Global, AngularMode::PerPixel] {
        let e = angular_error(&pixel(1.0, 0.0, 0.0), &pixel(0.0, 0.0, 1.0), mode).unwrap();
        check((e - 90.0).abs() < 1e-12, "orthogonal colors are 90 degrees apart");
        check(angular_error(&x, &x, mode).unwrap() == 0.0, "angular(x, x) = 0");
    }
    let y = random_image(32, 32, 4);
    let (ly, lx) = (common::ssim::luma(&y), common::ssim::luma(&x));
    let oracle = common::ssim::ssim_direct(&lx, &ly, 32, 32);
    check((ssim(&x, &y).unwrap() - oracle).abs() < 1e-9, "SSIM matches the direct-window oracle");

    let mut runner = TestRunner::new(PropConfig { cases: 64, failure_persistence: None, ..PropConfig::default() });
    let props = runner.run(&(any::<u64>(), any::<u64>(), 0.05f32..20.0, 11usize..20, 11usize..20), |(sa, sb, k, h, w)| {
        let a = random_image(h, w, sa).map(|v| v + 0.01);
        let b = random_image(h, w, sb).map(|v| v + 0.01);
        let s = ssim(&a, &b).unwrap();
        let direct = common::ssim::ssim_direct(&common::ssim::luma(&a), &common::ssim::luma(&b), h, w);
        prop_assert!((s - direct).abs() < 1e-9, "ssim {} vs oracle {}", s, direct);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
        for mode in [AngularMode::Global, AngularMode::PerPixel] {
            let e = angular_error(&a, &b, mode).unwrap();
            let scaled = angular_error(&a, &b.map(|v| v * k), mode).unwrap();
            prop_assert!((e - scaled).abs() < 1e-6, "{:?}: {} vs scaled {}", mode, e, scaled);
            prop_assert!((0.0..=180.0).contains(&e));
        }
        let hist = discrete_entropy(&a).unwrap();
        prop_assert!((0.0..=8.0).contains(&hist));
        Ok(())
    });
    if let Err(e) = props {
        failures.push(format!("property suite: {e}"));
    }
    let detail = if failures.is_empty() {
        format!("identities exact; direct-window SSIM oracle agrees to 1e-9; 64 property cases green (oracle {oracle:.6})")
    } else {
        format!("failed: {}", failures.join("; "))
    };
    outcome(failures.is_empty(), detail)
}

struct Capture(CsvLossLog<Vec<u8>>, Vec<u8>);

impl TrainObserver for Capture {
    fn on_log(&mut self, r: &LossRecord) -> msrnet::Result<()> {
        self.0.write(r)
    }

    fn on_checkpoint(&mut self, model: &MsrNet) -> msrnet::Result<()> {
        self.1.clear();
        write_checkpoint(&mut self.1, model, true)
    }
}

/// Manifest, LL image, checkpoint, loss-trace and report bytes of one run.
fn pipeline_run(hq: &Path, out: &Path) -> Vec<(String, Vec<u8>)> {
    let summary = synthesize_dataset(hq, out, &SynthesisOptions { per_image: 2, seed: 9, ..SynthesisOptions::default() }).unwrap();
    let rows = read_manifest(&summary.manifest).unwrap();
    let config = MsrNetConfig { patch: 32, ..MsrNetConfig::default() };
    let data = PairSampler::from_manifest(&rows, out, config.patch).unwrap();
    let mut net = MsrNet::new(config, 3).unwrap();
    let cfg = TrainConfig { max_iters: 10, batch: 4, log_every: 1, checkpoint_every: 0, ..TrainConfig::default() };
    let mut cap = Capture(CsvLossLog::new(Vec::new(), true).unwrap(), Vec::new());
    train_loop(&mut net, &data, &cfg, &mut cap).unwrap();
    let test: Vec<_> = rows.iter().filter(|r| r.split == Split::Test).cloned().collect();
    let report = evaluate(&test, out, &Candidate::Model { model: &net, tiling: Tiling::Whole }, &EvalOptions::default()).unwrap();
    let mut files = vec![("manifest".to_string(), std::fs::read(&summary.manifest).unwrap())];
    for r in &rows {
        files.push((r.ll.clone(), std::fs::read(r.ll_path(out)).unwrap()));
    }
    let Capture(log, ckpt) = cap;
    files.push(("loss".into(), log.into_inner()));
    files.push(("checkpoint".into(), ckpt));
    files.push(("report".into(), report.to_csv().into_bytes()));
    files
}

fn c7_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let hq = tmp.path().join("hq");
    std::fs::create_dir_all(&hq).unwrap();
    for i in 0..5u64 {
        save_rgb(hq.join(format!("img{i}.png")), &procedural_scene(48, 64, 40 + i)).unwrap();
    }
    let a = pipeline_run(&hq, &tmp.path().join("run_a"));
    let b = pipeline_run(&hq, &tmp.path().join("run_b"));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let bytes: usize = a.iter().map(|f| f.1.len()).sum();
    outcome(
        a.len() == b.len() && differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts ({bytes} bytes) byte-identical across two runs", a.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn c8_benchmark() -> Outcome {
    let net = MsrNet::new(MsrNetConfig::default(), 0).unwrap();
    let rows = bench::benchmark(&net, &DEFAULT_SIZES, 1, Tiling::Whole, 0).unwrap();
    let monotone = bench::monotone_violations(&rows).is_empty();
    let timings: Vec<String> = rows.iter().map(|r| format!("{0}x{0} {1:.3}s", r.size, r.mean_s)).collect();
    outcome(
        rows.len() == DEFAULT_SIZES.len() && rows.iter().all(|r| r.mean_s > 0.0),
        format!("{}; monotone: {}", timings.join(", "), if monotone { "yes" } else { "no" }),
    )
}

fn main() -> ExitCode {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| picked.is_empty() || picked.contains(&n);
    let desk = (wanted(4) || wanted(5)).then(desk_dataset);
    let mut unexpected = 0;
    for n in 1..=8 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let (name, out) = match n {
            1 => ("cascade equivalence", c1_cascade()),
            2 => ("gradient check", c2_gradients()),
            3 => ("overfit sanity", c3_overfit()),
            4 => ("desk-scale enhancement", c4_desk(desk.as_ref().unwrap())),
            5 => ("scale-count ordering", c5_scales(desk.as_ref().unwrap())),
            6 => ("metric identities", c6_metrics()),
            7 => ("determinism", c7_determinism()),
            _ => ("benchmark harness", c8_benchmark()),
        };
        let status = match (out.pass, KNOWN_UNMET.contains(&n)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known unmet, see README)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("criterion {n} {name}: {status}: {} [{:.1}s]", out.detail, start.elapsed().as_secs_f64());
    }
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
