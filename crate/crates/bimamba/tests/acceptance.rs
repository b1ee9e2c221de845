//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per
//! criterion and exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p bimamba --test acceptance -- 1 2 5`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bimamba::edf::{parse_edf, write_edf, EdfRecording, EdfSignal};
use bimamba::exec::RayonExecutor;
use bimamba_core::data::Sample;
use bimamba_core::eca::{apply_attention, channel_descriptor, channel_weights};
use bimamba_core::gradcheck::{primitive_suite, stage_model_check, tiny_stage_config};
use bimamba_core::metrics::{bundle, confusion, ConfusionMatrix};
use bimamba_core::model::{ConvLayerSpec, HealthModelConfig, StageModelConfig};
use bimamba_core::ssm::{ssm_conv_apply, ssm_conv_kernel, ssm_scan, zoh_discretize, SsmParams};
use bimamba_core::synth::{synth_epochs, synth_health, HealthSynthConfig, SynthConfig};
use bimamba_core::training::{run_health_split, run_stage_fold, subject_kfold, subjects_of, TrainingConfig};
use bimamba_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn scan_vs_convolution() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let len = rng.gen_range(1..=128);
        let p = SsmParams {
            a: (0..n).map(|_| -log_uniform(&mut rng, 1e-3, 10.0)).collect(),
            b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            d: rng.gen_range(-1.0..1.0),
            delta: log_uniform(&mut rng, 1e-3, 1.0),
            selective: false,
        };
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = zoh_discretize(&p).map_err(|e| e.to_string())?;
        let scan = ssm_scan(&d, &x).map_err(|e| e.to_string())?;
        let k = ssm_conv_kernel(&d, len).map_err(|e| e.to_string())?;
        let conv = ssm_conv_apply(&k, &d, &x).map_err(|e| e.to_string())?;
        for (a, b) in scan.iter().zip(&conv) {
            worst = worst.max((a - b).abs());
        }
    }
    let took = t.elapsed();
    check(
        worst <= 1e-10 && took < Duration::from_secs(10),
        format!("200 draws, max |scan - conv| = {worst:.2e}, {:.2} s", took.as_secs_f64()),
    )
}

/// Σ_{k<50} z^k/(k+1)!
fn phi_series(z: f64) -> f64 {
    let (mut term, mut sum) = (1.0, 0.0);
    for k in 0..50 {
        sum += term;
        term *= z / (k + 2) as f64;
    }
    sum
}

fn zoh_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let one = |a: f64, delta: f64, b: f64| -> Result<f64, String> {
        let p = SsmParams {
            a: vec![a],
            b: vec![b],
            c: vec![1.0],
            d: 0.0,
            delta,
            selective: false,
        };
        Ok(zoh_discretize(&p).map_err(|e| e.to_string())?.b_bar[0])
    };
    for _ in 0..5000 {
        let a = -log_uniform(&mut rng, 1e-12, 10.0);
        let delta = log_uniform(&mut rng, 1e-4, 1.0);
        let b = rng.gen_range(-2.0..2.0);
        worst = worst.max((one(a, delta, b)? - b * delta * phi_series(delta * a)).abs());
    }
    let mut limit: f64 = 0.0;
    for delta in [1e-4, 0.01, 0.5, 1.0] {
        for a in [0.0, -0.0, -1e-300] {
            limit = limit.max((one(a, delta, 3.0)? - 3.0 * delta).abs());
        }
    }
    check(
        worst <= 1e-12 && limit <= 1e-12,
        format!("series oracle max error {worst:.2e} over 5000 draws, A->0 limit error {limit:.2e}"),
    )
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let suite = primitive_suite(10, 3).map_err(|e| e.to_string())?;
    let worst = suite.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("non-empty suite");
    let model = stage_model_check(&tiny_stage_config(), 3).map_err(|e| e.to_string())?;
    let took = t.elapsed();
    check(
        worst.max_rel_error < 1e-5 && model.max_rel_error < 1e-4 && took < Duration::from_secs(60),
        format!(
            "{} primitives, worst {} {:.2e}; stage model {:.2e} over {} coordinates; {:.1} s",
            suite.len(),
            worst.name,
            worst.max_rel_error,
            model.max_rel_error,
            model.coordinates,
            took.as_secs_f64()
        ),
    )
}

fn eca_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, l) = (10, 37);
    let data: Vec<f64> = (0..c * l).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let x = Tensor::new(&[c, l], data.clone()).map_err(|e| e.to_string())?;
    let s = channel_descriptor(&x).map_err(|e| e.to_string())?;
    let mut mean_err: f64 = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..l {
            acc += data[ch * l + i];
        }
        mean_err = mean_err.max((s.0[ch] - acc / l as f64).abs());
    }
    let zero = channel_weights(&s, &[0.0; 3]).map_err(|e| e.to_string())?;
    let half = zero.0.iter().all(|&w| w == 0.5);
    let kernel = [0.3, -0.7, 1.1];
    let w = channel_weights(&s, &kernel).map_err(|e| e.to_string())?;
    let mut conv_err: f64 = 0.0;
    for ch in 0..c {
        let mut z = 0.0;
        for (j, kj) in kernel.iter().enumerate() {
            let src = ch as i64 + j as i64 - 1;
            if (0..c as i64).contains(&src) {
                z += kj * s.0[src as usize];
            }
        }
        conv_err = conv_err.max((w.0[ch] - 1.0 / (1.0 + (-z).exp())).abs());
    }
    let alphas: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
    let y = apply_attention(&x, &w).map_err(|e| e.to_string())?;
    let scaled = Tensor::new(&[c, l], data.iter().enumerate().map(|(i, v)| v * alphas[i / l]).collect()).map_err(|e| e.to_string())?;
    let ys = apply_attention(&scaled, &w).map_err(|e| e.to_string())?;
    let mut scale_err: f64 = 0.0;
    for i in 0..c * l {
        scale_err = scale_err.max((ys.data()[i] - alphas[i / l] * y.data()[i]).abs());
        scale_err = scale_err.max((y.data()[i] - w.0[i / l] * data[i]).abs());
    }
    let composite = primitive_suite(10, 4)
        .map_err(|e| e.to_string())?
        .into_iter()
        .find(|p| p.name == "eca")
        .ok_or("no eca entry in the gradient suite")?;
    check(
        mean_err <= 1e-12 && half && conv_err <= 1e-12 && scale_err <= 1e-12 && composite.max_rel_error < 1e-5,
        format!(
            "mean {mean_err:.1e}, zero kernel 0.5 {half}, conv {conv_err:.1e}, scaling {scale_err:.1e}, composite grad {:.2e}",
            composite.max_rel_error
        ),
    )
}

fn metric_oracles() -> Outcome {
    let cm = ConfusionMatrix::from_rows(&[vec![45, 5], vec![10, 40]]).map_err(|e| e.to_string())?;
    let m = bundle(&cm).map_err(|e| e.to_string())?;
    let hand = (m.accuracy - 0.85).abs() < 1e-15 && (m.p_e - 0.5).abs() < 1e-15 && (m.kappa - 0.70).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
    let pred: Vec<usize> = truth.iter().map(|&t| if rng.gen::<f64>() < 0.6 { t } else { rng.gen_range(0..5) }).collect();
    let b = bundle(&confusion(&truth, &pred, 5).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let agree = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as u64;
    let mut chance = 0u64;
    let mut f1 = Vec::new();
    for c in 0..5 {
        let t = truth.iter().filter(|&&x| x == c).count() as u64;
        let p = pred.iter().filter(|&&x| x == c).count() as u64;
        let tp = truth.iter().zip(&pred).filter(|&(&a, &b)| a == c && b == c).count() as u64;
        chance += t * p;
        let prec = if p == 0 { 0.0 } else { tp as f64 / p as f64 };
        let rec = if t == 0 { 0.0 } else { tp as f64 / t as f64 };
        f1.push(if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) });
    }
    let nf = n as f64;
    let p_o = agree as f64 / nf;
    let p_e = chance as f64 / (nf * nf);
    let kappa = (p_o - p_e) / (1.0 - p_e);
    let exact = b.accuracy == p_o && b.kappa == kappa && b.f1 == f1;
    check(
        hand && exact,
        format!(
            "2x2: acc {:.2} p_e {:.2} kappa {:.2}; 1e4 pairs exact match {exact} (acc {p_o:.4}, kappa {kappa:.4})",
            m.accuracy, m.p_e, m.kappa
        ),
    )
}

fn learnability_model(eca: bool) -> StageModelConfig {
    StageModelConfig {
        epoch_samples: 500,
        state_dim: 8,
        n_bimamba: 1,
        eca,
        cnn: vec![
            ConvLayerSpec {
                pool: 2,
                ..ConvLayerSpec::new(16, 7, 2)
            },
            ConvLayerSpec::new(24, 5, 2),
            ConvLayerSpec::new(32, 3, 2),
        ],
        ..StageModelConfig::default()
    }
}

fn learnability_training(seed: u64) -> TrainingConfig {
    TrainingConfig {
        epochs: 10,
        batch_size: 32,
        lr: 2e-3,
        seed,
        ..TrainingConfig::default()
    }
}

/// Mean validation accuracy and kappa of subject-wise 4-fold CV.
fn cross_validate(samples: &[Sample], model: &StageModelConfig, train: &TrainingConfig, exec: &RayonExecutor) -> Result<(f64, f64), String> {
    let plan = subject_kfold(&subjects_of(samples), 4, train.seed).map_err(|e| e.to_string())?;
    let (mut acc, mut kappa) = (0.0, 0.0);
    for fold in &plan.folds {
        let r = run_stage_fold(model, train, samples, fold, exec, |_| {}).map_err(|e| e.to_string())?;
        acc += r.evaluation.metrics.accuracy;
        kappa += r.evaluation.metrics.kappa;
    }
    let k = plan.folds.len() as f64;
    Ok((acc / k, kappa / k))
}

fn stage_learnability(exec: &RayonExecutor) -> Outcome {
    let t = Instant::now();
    let samples = synth_epochs(&SynthConfig::new(8, 200, 1), 500).map_err(|e| e.to_string())?;
    let train = learnability_training(1);
    let (acc, kappa) = cross_validate(&samples, &learnability_model(true), &train, exec)?;
    let took = t.elapsed();
    check(
        acc >= 0.90 && kappa >= 0.85 && took < Duration::from_secs(15 * 60),
        format!(
            "8 subjects x 200 epochs, 4-fold CV, {} training epochs: accuracy {acc:.4}, kappa {kappa:.4}, {:.0} s",
            train.epochs,
            took.as_secs_f64()
        ),
    )
}

fn eca_ablation(exec: &RayonExecutor) -> Outcome {
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in [1, 2, 3] {
        let mut cfg = SynthConfig::new(8, 200, seed);
        cfg.informative = 2;
        let samples = synth_epochs(&cfg, 500).map_err(|e| e.to_string())?;
        let train = learnability_training(seed);
        with.push(cross_validate(&samples, &learnability_model(true), &train, exec)?.0);
        without.push(cross_validate(&samples, &learnability_model(false), &train, exec)?.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let diff = mean(&with) - mean(&without);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join("/");
    check(
        diff >= 0.0,
        format!("2 informative + 8 decoy channels, seeds 1-3: ECA {} vs no ECA {}, mean difference {diff:+.4}", fmt(&with), fmt(&without)),
    )
}

fn health_pipeline(exec: &RayonExecutor) -> Outcome {
    let model = HealthModelConfig {
        d_model: 4,
        state_dim: 4,
        ..HealthModelConfig::default()
    };
    let ratios = [0.5, 0.6, 0.7, 0.8, 0.9];
    let mut acc = vec![0.0; ratios.len()];
    let mut at_nine = Vec::new();
    for seed in [1, 2, 3] {
        let nights = synth_health(&HealthSynthConfig::balanced(seed));
        let train = TrainingConfig {
            epochs: 6,
            batch_size: 16,
            lr: 1e-2,
            seed,
            ..TrainingConfig::default()
        };
        for (i, &r) in ratios.iter().enumerate() {
            let run = run_health_split(&model, &train, &nights, r, exec, |_| {}).map_err(|e| e.to_string())?;
            acc[i] += run.evaluation.metrics.accuracy / 3.0;
            if r == 0.9 {
                at_nine.push((run.evaluation.metrics.accuracy, run.roc.auc));
            }
        }
    }
    let nine_ok = at_nine.iter().all(|&(a, auc)| a >= 0.90 && auc >= 0.95);
    let monotone = acc.windows(2).all(|w| w[1] >= w[0]);
    let curve = acc.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    let nine = at_nine.iter().map(|(a, u)| format!("{a:.3}/{u:.3}")).collect::<Vec<_>>().join(" ");
    check(
        nine_ok && monotone,
        format!("9:1 accuracy/AUC per seed {nine}; mean accuracy over ratios 0.5..0.9: {curve}"),
    )
}

fn ascii(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| rng.gen_range(b'!'..=b'~') as char).collect()
}

fn random_edf(rng: &mut ChaCha8Rng) -> EdfRecording {
    let ns = rng.gen_range(1..=6);
    let n_records = rng.gen_range(1..=8);
    let signals = (0..ns)
        .map(|i| {
            let spr = rng.gen_range(1..=64);
            let (dmin, dmax) = (rng.gen_range(-32768..0), rng.gen_range(1..=32767));
            EdfSignal {
                label: format!("S{i}{}", ascii(rng, 10)),
                transducer: ascii(rng, 40),
                physical_dimension: ascii(rng, 4),
                physical_min: -(rng.gen_range(1..100000) as f64) / 100.0,
                physical_max: rng.gen_range(1..100000) as f64 / 10.0,
                digital_min: dmin,
                digital_max: dmax,
                prefiltering: ascii(rng, 40),
                samples_per_record: spr,
                reserved: ascii(rng, 8),
                digital: (0..spr * n_records).map(|_| rng.gen_range(dmin..=dmax) as i16).collect(),
            }
        })
        .collect();
    let mut rec = EdfRecording::new(&ascii(rng, 60), [1.0, 10.0, 30.0][rng.gen_range(0..3)], signals);
    rec.recording = ascii(rng, 60);
    rec
}

fn edf_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut identical = 0;
    let mut errors = 0;
    let mut precise = true;
    for _ in 0..50 {
        let rec = random_edf(&mut rng);
        let first = write_edf(&rec).map_err(|e| e.to_string())?;
        let parsed = parse_edf(&first).map_err(|e| e.to_string())?;
        if write_edf(&parsed).map_err(|e| e.to_string())? == first {
            identical += 1;
        }
        for cut in (0..first.len()).step_by(13) {
            match parse_edf(&first[..cut]) {
                Err(e) => {
                    errors += 1;
                    precise &= e.offset <= cut && !e.message.is_empty();
                }
                Ok(_) => precise = false,
            }
        }
        for _ in 0..40 {
            let mut b = first.clone();
            let at = rng.gen_range(0..rec.header_bytes());
            b[at] = rng.gen();
            if let Err(e) = parse_edf(&b) {
                errors += 1;
                precise &= e.offset <= b.len();
            }
        }
        let mut b = first.clone();
        b[236..244].copy_from_slice(b"records ");
        precise &= parse_edf(&b).map_err(|e| e.offset) == Err(236);
    }
    check(
        identical == 50 && precise,
        format!("{identical}/50 byte-identical; {errors} corrupt inputs rejected with offsets, no panics"),
    )
}

fn fold_invariants() -> Outcome {
    let mut plans = 0;
    for n in 2..=200usize {
        let subjects: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        for k in 2..=n {
            let plan = subject_kfold(&subjects, k, (n * 1000 + k) as u64).map_err(|e| e.to_string())?;
            let mut seen = vec![0usize; n];
            let sizes: Vec<usize> = plan.folds.iter().map(|f| f.val.len()).collect();
            for f in &plan.folds {
                for s in &f.val {
                    seen[s[1..].parse::<usize>().map_err(|e| e.to_string())?] += 1;
                }
                if f.train.len() + f.val.len() != n || f.train.iter().any(|t| f.val.contains(t)) {
                    return Err(format!("n={n} k={k}: fold {} is not a partition", f.index));
                }
            }
            let (lo, hi) = (sizes.iter().min().copied().unwrap_or(0), sizes.iter().max().copied().unwrap_or(0));
            if plan.folds.len() != k || seen.iter().any(|&c| c != 1) || hi - lo > 1 {
                return Err(format!("n={n} k={k}: sizes {sizes:?}"));
            }
            plans += 1;
        }
    }
    let sizes = |n: usize, k: usize| -> Result<Vec<usize>, String> {
        let subjects: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        Ok(subject_kfold(&subjects, k, 0).map_err(|e| e.to_string())?.folds.iter().map(|f| f.val.len()).collect())
    };
    let fixed = sizes(10, 10)?.iter().all(|&s| s == 1) && sizes(50, 25)?.iter().all(|&s| s == 2);
    check(fixed, format!("{plans} plans with 2 <= k <= n <= 200 disjoint, covering, sizes within 1; (10,10) and (50,25) exact"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bimamba"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn metric_jsons(run: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for rel in ["aggregate.json", "folds.json", "fold_00/report.json", "fold_01/report.json", "fold_02/report.json"] {
        out.push((rel.to_string(), std::fs::read(run.join(rel)).map_err(|e| format!("{rel}: {e}"))?));
    }
    Ok(out)
}

fn cv_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |rel: &str| dir.path().join(rel).to_string_lossy().into_owned();
    run_cli(&["synth", "--subjects", "6", "--epochs-per-subject", "20", "--seed", "11", "--out", &p("data")])?;
    let cfg = serde_json::json!({
        "model": {"epoch_samples": 128, "state_dim": 4,
                  "cnn": [{"out_channels": 8, "kernel": 5, "stride": 2}, {"out_channels": 8, "kernel": 3, "stride": 2}, {"out_channels": 8, "kernel": 3, "stride": 2}]},
        "training": {"epochs": 3, "batch_size": 16, "lr": 0.005}
    });
    std::fs::write(p("cfg.json"), cfg.to_string()).map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        run_cli(&["cv", "--manifest", &p("data/manifest.json"), "--config", &p("cfg.json"), "--k", "3", "--seed", "4", "--out", &p(run)])?;
    }
    let (a, b) = (metric_jsons(&dir.path().join("a"))?, metric_jsons(&dir.path().join("b"))?);
    let same = a == b;
    let bytes: usize = a.iter().map(|(_, v)| v.len()).sum();
    check(same, format!("two 3-fold cv runs with seed 4: {} metric JSONs ({bytes} bytes) identical {same}", a.len()))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let exec = RayonExecutor::from_env();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "scan/convolution equivalence", Box::new(scan_vs_convolution)),
        (2, "ZOH correctness", Box::new(zoh_oracle)),
        (3, "gradient fidelity", Box::new(gradient_fidelity)),
        (4, "ECA contracts", Box::new(eca_contracts)),
        (5, "metric oracles", Box::new(metric_oracles)),
        (6, "synthetic stage learnability", Box::new(|| stage_learnability(&exec))),
        (7, "ECA ablation direction", Box::new(|| eca_ablation(&exec))),
        (8, "health task pipeline", Box::new(|| health_pipeline(&exec))),
        (9, "EDF round-trip", Box::new(edf_round_trip)),
        (10, "fold-plan invariants", Box::new(fold_invariants)),
        (11, "determinism", Box::new(cv_determinism)),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in &criteria {
        if !only.is_empty() && !only.contains(id) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {id:>2} {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                println!("FAIL {id:>2} {name}: {d} [{secs:.1} s]");
                failed.push(*id);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
