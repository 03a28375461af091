//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;

use mmtfd::augment::{flip, freq_mask, freq_mask_band, freq_noise, sample_views, time_noise, window_warp, AugPolicy};
use mmtfd::datapipe::{overlap_sample, split, synth_generate, window_count, SignalRecord, SynthSpec, WindowDataset};
use mmtfd::harness::gradcheck_suite::{run_suite, TOLERANCE};
use mmtfd::harness::pipeline::{evaluate, finetune, prepare_data, run_all, PreparedData, RunOutcome};
use mmtfd::harness::{Checkpoint, RunConfig};
use mmtfd::meta::{outer_update, EpisodeTask, MetaConfig, Order, TaskEval, TaskLoss};
use mmtfd::rng;
use mmtfd::spectral::{dft_naive, fft, Signal};
use mmtfd::{ModelParams, Result, Tensor};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn gradient_oracle() -> Result<Verdict> {
    let start = Instant::now();
    let results = run_suite(5)?;
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("nonempty suite");
    let failed = results.iter().filter(|c| !c.passed()).count();
    Ok(verdict(
        failed == 0 && elapsed < Duration::from_secs(30),
        format!(
            "{} checks, {failed} above {TOLERANCE:e}; worst {} (seed {}) {:.2e}; {:.1} s",
            results.len(),
            worst.name,
            worst.seed,
            worst.max_rel_error,
            elapsed.as_secs_f64()
        ),
    ))
}

fn spectral_oracle() -> Result<Verdict> {
    let mut worst_bin = 0.0f64;
    let mut worst_parseval = 0.0f64;
    for &n in &[8usize, 100, 1024, 2048] {
        for s in 0..20u64 {
            let mut r = rng::stream(s, &[n as u64]);
            let x = Signal::new((0..n).map(|_| r.gen_range(-1.0..1.0)).collect(), 1.0)?;
            let fast = fft(&x);
            let slow = dft_naive(&x);
            let err = fast.bins().iter().zip(slow.bins()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            worst_bin = worst_bin.max(err);
            let time_energy = x.energy();
            let freq_energy = fast.bins().iter().map(Complex64::norm_sqr).sum::<f64>() / n as f64;
            worst_parseval = worst_parseval.max((time_energy - freq_energy).abs() / time_energy);
        }
    }
    Ok(verdict(
        worst_bin <= 1e-9 && worst_parseval <= 1e-8,
        format!("max bin error {worst_bin:.2e} (tol 1e-9), Parseval rel. error {worst_parseval:.2e} (tol 1e-8)"),
    ))
}

struct HalfSquare;

impl TaskLoss for HalfSquare {
    fn evaluate(&self, params: &ModelParams, _: &[usize], _: &[usize]) -> Result<TaskEval> {
        Ok(TaskEval { loss: params.get("theta")?.square().sum().scale(0.5), accuracy: None })
    }
}

fn maml_oracle() -> Result<Verdict> {
    let (theta, alpha, beta) = (1.0, 0.1, 0.5);
    // θ' = (1−α)θ; first order uses ∇ at θ', second order adds the (1−α) Jacobian
    let expect_first = theta - beta * (1.0 - alpha) * theta;
    let expect_second = theta - beta * (1.0 - alpha) * (1.0 - alpha) * theta;
    let tasks = vec![EpisodeTask { support: vec![0], support_labels: vec![0], query: vec![1], query_labels: vec![0], classes: vec![0] }];
    let mut got = Vec::new();
    for order in [Order::First, Order::Second] {
        let mut p = ModelParams::new();
        p.insert("theta", Tensor::param(vec![theta], &[1])?);
        let cfg = MetaConfig { inner_lr: alpha, outer_lr: beta, inner_steps: 1, order, ..MetaConfig::default() };
        got.push(outer_update(&HalfSquare, &p, &tasks, &cfg)?.get("theta")?.item());
    }
    let ok = (got[0] - expect_first).abs() <= 1e-9 && (got[1] - expect_second).abs() <= 1e-9;
    Ok(verdict(ok, format!("first order {:.12} (want {expect_first}), second order {:.12} (want {expect_second})", got[0], got[1])))
}

fn sampler_arithmetic() -> Result<Verdict> {
    let (w, s) = (2048usize, 850usize);
    let mut r = rng::stream(4, &[]);
    let mut mismatches = 0;
    for _ in 0..100 {
        let t = r.gen_range(w..w + 50_000);
        let enumerated = (0..).map(|i| i * s).take_while(|o| o + w <= t).count();
        let rec = SignalRecord { samples: vec![0.0; t], sample_rate: 6000.0, label: Some(0), source: String::new() };
        let got = overlap_sample(&rec, 0, w, s)?.len();
        if got != enumerated || window_count(t, w, s) != (t - w) / s + 1 {
            mismatches += 1;
        }
    }
    let spec = SynthSpec::default();
    let records = synth_generate(&spec, 3, 0)?;
    let parts = records.iter().enumerate().map(|(i, rec)| overlap_sample(rec, i, w, s)).collect::<Result<Vec<_>>>()?;
    let per_record: Vec<usize> = parts.iter().map(WindowDataset::len).collect();
    let (train, test) = split(&WindowDataset::concat(parts)?, 0.7, 0)?;
    let count = |ds: &WindowDataset, c: usize| ds.windows.iter().filter(|x| x.label == Some(c)).count();
    let splits: Vec<(usize, usize)> = (0..3).map(|c| (count(&train, c), count(&test, c))).collect();
    let ok = mismatches == 0 && per_record.iter().all(|&n| n == 214) && splits.iter().all(|&p| p == (150, 64));
    Ok(verdict(ok, format!("{mismatches}/100 count mismatches; windows per record {per_record:?}; train/test per class {splits:?}")))
}

fn augmentation_suite() -> Result<Verdict> {
    let mut r = rng::stream(9, &[]);
    let x = Signal::new((0..2048).map(|_| r.gen_range(-2.0..2.0)).collect(), 6000.0)?;
    let close = |a: &Signal, b: &Signal, tol: f64| a.len() == b.len() && a.samples().iter().zip(b.samples()).all(|(p, q)| (p - q).abs() <= tol);
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("flip involution", flip(&flip(&x)) == x);
    check("warp s=1 identity", close(&window_warp(&x, 300, 900, 1.0)?, &x, 1e-12));
    check("time noise sigma=0 identity", time_noise(&x, 0.0, 1)? == x);
    check("freq noise sigma=0 identity", freq_noise(&x, 0.0, 1)? == x);
    check("freq mask fraction=0 identity", close(&freq_mask(&x, 0.0, 1)?, &x, 1e-12));
    let policy = AugPolicy { seed: 5, ..AugPolicy::default() };
    let views = sample_views(&x, &policy, 3, 5)?;
    check("length preservation", views.iter().all(|v| v.signal.len() == x.len()));
    check("seeded determinism", views == sample_views(&x, &policy, 3, 5)?);
    let n = 256;
    let k = 10;
    let tone = Signal::new((0..n).map(|t| (2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64).cos()).collect(), 1.0)?;
    let masked = freq_mask_band(&tone, k - 2, 5)?;
    check("pure tone annihilation", masked.samples().iter().all(|v| v.abs() <= 1e-9));
    Ok(verdict(failures.is_empty(), if failures.is_empty() { "all invariants hold".into() } else { format!("failed: {}", failures.join(", ")) }))
}

/// One full default run, kept for the end-to-end criteria.
struct EndToEnd {
    cfg: RunConfig,
    data: PreparedData,
    run: RunOutcome,
    elapsed: Duration,
}

fn end_to_end() -> Result<EndToEnd> {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let data = prepare_data(&cfg)?;
    let run = run_all(&cfg, &data, true)?;
    Ok(EndToEnd { cfg, data, run, elapsed: start.elapsed() })
}

fn desk_scale(e: &EndToEnd) -> Verdict {
    let acc = e.run.evaluation.report.clean.accuracy;
    verdict(
        acc >= 0.95 && e.elapsed < Duration::from_secs(15 * 60),
        format!(
            "1% budget ({} labels): test accuracy {:.2}% (need >= 95%), runtime {:.0} s (limit 900 s)",
            e.run.finetuned.labeled.len(),
            100.0 * acc,
            e.elapsed.as_secs_f64()
        ),
    )
}

fn noise_robustness(e: &EndToEnd) -> Verdict {
    let clean = e.run.evaluation.report.clean.accuracy;
    let Some(noisy) = &e.run.evaluation.report.corrupted else {
        return verdict(false, "no corrupted evaluation");
    };
    let drop = 100.0 * (clean - noisy.accuracy);
    verdict(drop <= 5.0, format!("clean {:.2}%, corrupted {:.2}%, drop {drop:.2} points (limit 5)", 100.0 * clean, 100.0 * noisy.accuracy))
}

fn ablations(e: &EndToEnd) -> Result<Verdict> {
    let full = e.run.evaluation.report.clean.accuracy;
    let mut no_bilevel = e.cfg.clone();
    no_bilevel.ablation.bilevel = false;
    let tuned = finetune(&no_bilevel, &e.data, &e.run.pretrained.checkpoint)?;
    let acc_bilevel = evaluate(&no_bilevel, &e.data, &tuned.checkpoint, false)?.report.clean.accuracy;
    let mut no_freq = e.cfg.clone();
    no_freq.ablation.freq_task = false;
    let acc_freq = run_all(&no_freq, &e.data, false)?.evaluation.report.clean.accuracy;
    Ok(verdict(
        acc_bilevel < full && acc_freq < full,
        format!(
            "full {:.2}%, without bi-level {:.2}%, without frequency task {:.2}% (both must be strictly lower)",
            100.0 * full,
            100.0 * acc_bilevel,
            100.0 * acc_freq
        ),
    ))
}

fn determinism(e: &EndToEnd) -> Result<Verdict> {
    let data = prepare_data(&e.cfg)?;
    let again = run_all(&e.cfg, &data, true)?;
    let same_pre = again.pretrained.checkpoint.bit_eq(&e.run.pretrained.checkpoint);
    let same_fine = again.finetuned.checkpoint.bit_eq(&e.run.finetuned.checkpoint);
    let same_report = again.evaluation.report == e.run.evaluation.report;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("finetuned.ckpt");
    e.run.finetuned.checkpoint.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let round_trip = loaded.bit_eq(&e.run.finetuned.checkpoint);
    let same_after_load = evaluate(&e.cfg, &e.data, &loaded, true)?.report == e.run.evaluation.report;
    Ok(verdict(
        same_pre && same_fine && same_report && round_trip && same_after_load,
        format!(
            "repeat run: pretrained {same_pre}, fine-tuned {same_fine}, report {same_report}; save/load bit-exact {round_trip}, report after load {same_after_load}"
        ),
    ))
}

fn main() -> ExitCode {
    let mut lines: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, v: Result<Verdict>| {
        let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        println!("criterion {id} [{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        lines.push((id, name, v));
    };
    record(1, "gradient oracle", gradient_oracle());
    record(2, "spectral oracle", spectral_oracle());
    record(3, "MAML closed form", maml_oracle());
    record(4, "sampler arithmetic", sampler_arithmetic());
    match end_to_end() {
        Ok(e) => {
            record(5, "desk-scale end-to-end", Ok(desk_scale(&e)));
            record(6, "noise robustness", Ok(noise_robustness(&e)));
            record(7, "ablation directionality", ablations(&e));
            record(8, "determinism and persistence", determinism(&e));
        }
        Err(err) => {
            for (id, name) in [(5, "desk-scale end-to-end"), (6, "noise robustness"), (7, "ablation directionality"), (8, "determinism and persistence")] {
                record(id, name, Err(mmtfd::Error::Contract(format!("full run failed: {err}"))));
            }
        }
    }
    record(9, "augmentation invariants", augmentation_suite());
    let failed = lines.iter().filter(|(_, _, v)| !v.passed).count();
    println!("acceptance: {} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
