//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.
//!
//! The training criteria run the default configuration for 30 epochs ten
//! times, so expect this target to take around twenty minutes on one core.

#[allow(dead_code)]
#[path = "../../core/tests/support/gradient_suite.rs"]
mod suite;

#[allow(dead_code)]
#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mtl_fer::data::{generate_synthetic_dataset, split_train_val, DatasetManifest};
use mtl_fer::train::{train_single, FinalMetrics, TrainConfig};
use mtl_fer::Exec;

type Outcome = Result<String, String>;

struct Ledger {
    failed: usize,
}

impl Ledger {
    fn record(&mut self, name: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (label, case) in suite::CASES {
        let err = case();
        if !(err < suite::TOL) {
            failures.push(format!("{label} {err:.2e}"));
        }
        if err > worst.0 {
            worst = (err, label);
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{} cases x {} seeds, worst {:.2e} ({}), {:.1}s",
        suite::CASES.len(),
        suite::SEEDS,
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    );
    if !failures.is_empty() {
        return Err(format!("{detail}; over 1e-4: {}", failures.join(", ")));
    }
    verdict(suite::SEEDS >= 10 && elapsed < Duration::from_secs(60), detail)
}

fn metric_oracle() -> Outcome {
    let err = oracles::metric_oracle_error();
    verdict(err < 1e-9, format!("1000 vectors, max |diff| {err:.2e}"))
}

fn bagging() -> Outcome {
    oracles::bagging_contract().map(|()| "N=300000 -> 60000, 200 fuzzed (N, seed) unique".into())
}

fn augmentation() -> Outcome {
    oracles::flip_involution()?;
    oracles::appearance_preserves_positions()?;
    let err = oracles::mix_ce_error();
    verdict(err < 1e-6, format!("flip exact, positions exact, mix CE max |diff| {err:.2e}"))
}

fn round_trip(scratch: &Path) -> Outcome {
    let dir = scratch.join("roundtrip");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    oracles::checkpoint_round_trip(&dir).map(|()| "100 inputs bit-identical".into())
}

// --- command-line runs ---

fn mtl_fer(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mtl-fer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`mtl-fer {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn small_config(dir: &Path, data: &Path, ensemble: &str) -> Result<PathBuf, String> {
    let text = format!(
        "seed = 21\nout_dir = {:?}\n\n[data]\nroot = {:?}\n\n[train]\nepochs = 2\n\n\
         [train.backbone]\nvariant = \"slim\"\nfeature_dim = 16\ntrunk_width = 16\n\n{ensemble}",
        dir.join("out").to_str().unwrap(),
        data.to_str().unwrap(),
    );
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let path = dir.join("run.toml");
    fs::write(&path, text).map_err(|e| e.to_string())?;
    Ok(path)
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn soft_vote(scratch: &Path, data: &Path) -> Outcome {
    let err = oracles::soft_vote_oracle_error();
    if !(err < 1e-9) {
        return Err(format!("coordinate means off by {err:.2e}"));
    }
    oracles::soft_vote_ties()?;
    let dir = scratch.join("single");
    let cfg = small_config(&dir, data, "[ensemble]\nmember_count = 1\nsubsample_fraction = 1.0\n")?;
    let cfg = cfg.to_str().unwrap();
    mtl_fer(&["train", "--config", cfg], "1")?;
    mtl_fer(&["ensemble", "train", "--config", cfg], "1")?;
    mtl_fer(&["ensemble", "eval", "--config", cfg], "1")?;
    let single = read(&dir.join("out/report.txt"))?;
    let ensemble = read(&dir.join("out/ensemble/report.txt"))?;
    verdict(
        single == ensemble,
        format!("oracle max |diff| {err:.2e}, ties resolved, K=1 report equal: {}", single == ensemble),
    )
}

fn ensemble_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        out.push((path.file_name().unwrap().to_string_lossy().into_owned(), read(&path)?));
    }
    out.sort();
    Ok(out)
}

fn determinism(scratch: &Path, data: &Path) -> Outcome {
    let members = "[ensemble]\nmember_count = 3\nsubsample_fraction = 0.5\n\
                   [[ensemble.members]]\nvariant = \"standard\"\n[[ensemble.members]]\nvariant = \"wide\"\n";
    let mut runs = Vec::new();
    for (name, threads, flags) in [
        ("parallel-a", "4", &[][..]),
        ("parallel-b", "4", &[][..]),
        ("sequential", "1", &["--sequential"][..]),
    ] {
        let dir = scratch.join(name);
        let cfg = small_config(&dir, data, members)?;
        for action in ["train", "eval"] {
            let mut args = flags.to_vec();
            args.extend(["ensemble", action, "--config", cfg.to_str().unwrap()]);
            mtl_fer(&args, threads)?;
        }
        runs.push(ensemble_files(&dir.join("out/ensemble"))?);
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let expected = ["ensemble.toml", "member_0.ckpt", "member_1.ckpt", "member_2.ckpt", "predictions.csv", "report.txt"];
    if names != expected {
        return Err(format!("unexpected artifacts {names:?}"));
    }
    let mut differing = Vec::new();
    for other in &runs[1..] {
        for ((name, a), (_, b)) in runs[0].iter().zip(other) {
            if a != b {
                differing.push(name.clone());
            }
        }
    }
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across 2 parallel runs and 1 sequential run", names.len())
        } else {
            format!("differing: {differing:?}")
        },
    )
}

// --- training criteria ---

struct Run {
    metrics: FinalMetrics,
    seconds: f64,
    epoch_f1: Vec<f64>,
}

fn train(train: &DatasetManifest, val: &DatasetManifest, cfg: &TrainConfig, exec: Exec) -> Result<Run, String> {
    let start = Instant::now();
    let (member, log) = train_single(train, val, cfg, exec).map_err(|e| e.to_string())?;
    Ok(Run {
        metrics: member.metrics,
        seconds: start.elapsed().as_secs_f64(),
        epoch_f1: log.records.iter().map(|r| r.val_macro_f1).collect(),
    })
}

const MTL_SEEDS: u64 = 5;

fn training_criteria(scratch: &Path, ledger: &mut Ledger) {
    let all = match generate_synthetic_dataset(900, 7, &scratch.join("nine-hundred"), Exec::Parallel) {
        Ok(m) => m,
        Err(e) => return ledger.record("end-to-end convergence", Err(e.to_string())),
    };
    let (train_set, val_set) = split_train_val(&all, 1.0 / 3.0, 7).expect("split");

    // standard variant, default configuration, seed 0, one thread
    let base = TrainConfig::default();
    let converged = train(&train_set, &val_set, &base, Exec::Sequential);
    let outcome = converged.as_ref().map_err(Clone::clone).and_then(|run| {
        let f1 = run.metrics.report.macro_f1;
        let best = run.epoch_f1.iter().cloned().fold(0.0, f64::max);
        verdict(
            (train_set.len(), val_set.len()) == (600, 300) && f1 >= 0.90 && run.seconds <= 300.0,
            format!(
                "{}/{} split, {} epochs, final macro-F1 {f1:.4} (best epoch {best:.4}), {:.0}s",
                train_set.len(),
                val_set.len(),
                base.epochs,
                run.seconds
            ),
        )
    });
    ledger.record("end-to-end convergence", outcome);

    let mut joint = Vec::new();
    let mut classification = Vec::new();
    for seed in 0..MTL_SEEDS {
        let with = TrainConfig { seed, lambda: 1.0, ..TrainConfig::default() };
        let without = TrainConfig { seed, lambda: 0.0, ..TrainConfig::default() };
        let a = match (seed, &converged) {
            (0, Ok(run)) => Ok(run.metrics.clone()),
            _ => train(&train_set, &val_set, &with, Exec::Parallel).map(|r| r.metrics),
        };
        let b = train(&train_set, &val_set, &without, Exec::Parallel).map(|r| r.metrics);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                println!(
                    "      seed {seed}: lambda=1 F1 {:.4} MSE {:.5} | lambda=0 F1 {:.4} MSE {:.5}",
                    a.report.macro_f1, a.landmark_mse, b.report.macro_f1, b.landmark_mse
                );
                joint.push(a);
                classification.push(b);
            }
            (Err(e), _) | (_, Err(e)) => return ledger.record("multi-task behavior", Err(e)),
        }
    }
    let mean = |v: &[FinalMetrics], f: fn(&FinalMetrics) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let f1_gap = mean(&joint, |m| m.report.macro_f1) - mean(&classification, |m| m.report.macro_f1);
    let mse_ratio = mean(&classification, |m| m.landmark_mse) / mean(&joint, |m| m.landmark_mse);
    ledger.record(
        "multi-task behavior",
        verdict(
            f1_gap.abs() <= 0.05 && mse_ratio >= 10.0,
            format!("{MTL_SEEDS} seeds, mean F1 gap {f1_gap:+.4}, landmark MSE ratio {mse_ratio:.1}x"),
        ),
    );
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let scratch = scratch.path();
    let mut ledger = Ledger { failed: 0 };

    ledger.record("gradient suite", gradient_suite());
    ledger.record("metric oracle", metric_oracle());

    let data = scratch.join("data");
    let cli_data = mtl_fer(&["gen-data", "--n", "120", "--seed", "11", "--out", data.to_str().unwrap()], "1");
    ledger.record("soft-vote oracle", cli_data.clone().and_then(|()| soft_vote(scratch, &data)));
    ledger.record("bagging contract", bagging());
    training_criteria(scratch, &mut ledger);
    ledger.record("augmentation properties", augmentation());
    ledger.record("determinism", cli_data.and_then(|()| determinism(scratch, &data)));
    ledger.record("checkpoint round-trip", round_trip(scratch));

    if ledger.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", ledger.failed);
        ExitCode::FAILURE
    }
}
