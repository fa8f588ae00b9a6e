//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
#![allow(clippy::needless_range_loop)]

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fedpmt::convex::{
    build_quadratic_task, compare_full_vs_partial, compute_lambda, compute_psi, theorem1_bound, BoundConstants,
    ComparisonConfig, QuadraticTaskConfig,
};
use fedpmt::masking::{build_width_menu, BpMask};
use fedpmt::nn::{backward, forward, ModelSpec};
use fedpmt::sim::{cost_report, metrics_csv, run_experiment, time_to_accuracy, ExperimentConfig, StrategyConfig};
use fedpmt::strategies::{feddrop_match_rate, StrategyKind};

const FCNN_PARTIAL: [u64; 3] = [6_473_760, 7_496_160, 9_779_760];
const FCNN_FULL_QUOTED: u64 = 15_305_968;
const FCNN_FULL_REL_TOL: f64 = 5e-4;
const COST_BUDGET: Duration = Duration::from_secs(1);

const CIFAR_RATIOS: [f64; 5] = [0.4583, 0.5727, 0.8759, 0.9329, 1.0];
const CIFAR_RATIO_TOL: f64 = 0.005;

const FCNN_KEEP_RATES: [f64; 3] = [0.54, 0.61, 0.73];
const KEEP_RATE_TOL: f64 = 0.02;

const GRAD_MODELS: u64 = 20;
const FD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_REL_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(30);

const SLOPE_TARGET: f64 = -1.0;
const SLOPE_TOL: f64 = 0.15;
const MIN_PARTIAL_NOT_BETTER: usize = 8;
const CONVEX_BUDGET: Duration = Duration::from_secs(120);

const PMT_ROUND_SECONDS: f64 = 26.4;
const AVG_ROUND_SECONDS: f64 = 50.0;
const ROUND_TIME_TOL: f64 = 1e-9;
const DEADLINE: f64 = 26.5;
const TIME_TARGET: f64 = 0.8;
const MAX_TIME_RATIO: f64 = 0.75;

const QUALITY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_MEDIAN_MARGIN: f64 = 0.10;
const QUALITY_BUDGET: Duration = Duration::from_secs(600);

const DIAG_REL_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_file(configs_dir().join(name)).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= DIAG_REL_TOL * a.abs().max(b.abs())
}

fn fcnn_exactness() -> Outcome {
    let start = Instant::now();
    let spec = ModelSpec::fcnn_mnist();
    let menu = build_width_menu(5, 4, None).unwrap();
    let report = cost_report("fcnn-mnist", &spec, 12, &menu, Some(FCNN_FULL_QUOTED)).unwrap();
    let elapsed = start.elapsed();
    let partial: Vec<u64> = report.rows[..3].iter().map(|r| r.flops).collect();
    let full = report.rows[3].flops;
    let full_err = (full as f64 - FCNN_FULL_QUOTED as f64).abs() / FCNN_FULL_QUOTED as f64;
    check(
        partial == FCNN_PARTIAL && full_err <= FCNN_FULL_REL_TOL && elapsed < COST_BUDGET,
        format!("partial {partial:?}, full {full} (rel err {full_err:.2e}), {elapsed:.2?}"),
    )
}

fn cifar_ratios() -> Outcome {
    let spec = ModelSpec::cnn_cifar10();
    let menu = build_width_menu(5, 5, None).unwrap();
    let report = cost_report("cnn-cifar10", &spec, 12, &menu, None).unwrap();
    let ratios: Vec<f64> = report.rows.iter().map(|r| r.ratio).collect();
    let worst = ratios
        .iter()
        .zip(CIFAR_RATIOS)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let shown: Vec<String> = ratios.iter().map(|r| format!("{:.2}%", 100.0 * r)).collect();
    check(
        worst <= CIFAR_RATIO_TOL,
        format!("ratios [{}], worst deviation {:.2} pp", shown.join(", "), 100.0 * worst),
    )
}

fn match_rates() -> Outcome {
    let spec = ModelSpec::fcnn_mnist();
    let rates: Vec<f64> = FCNN_PARTIAL
        .iter()
        .map(|&f| feddrop_match_rate(f, &spec, 12).unwrap())
        .collect();
    let ok = rates.iter().zip(FCNN_KEEP_RATES).all(|(r, q)| (r - q).abs() <= KEEP_RATE_TOL);
    check(ok, format!("keep rates {rates:?}"))
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut off_nonzero = 0;
    for seed in 0..GRAD_MODELS {
        let spec = common::random_model(seed);
        let params = common::random_params(&spec, seed + 100);
        let (x, y) = common::random_batch(&spec, 3, seed + 200);
        let (_, cache) = forward(&spec, &params, &x, &y).unwrap();
        let layers = spec.trainable_count();
        let fd: Vec<Vec<f64>> = (0..layers)
            .map(|l| {
                let (gw, gb) = common::finite_diff_block(&spec, &params, &x, &y, l, FD_STEP);
                gw.into_iter().chain(gb).collect()
            })
            .collect();
        for count in 0..=layers {
            let mask = BpMask::suffix(layers, count);
            let g = backward(&spec, &params, &cache, &mask).unwrap();
            for l in 0..layers {
                let block = &g.blocks[l];
                if !mask.is_on(l) {
                    off_nonzero += usize::from(!block.is_all_zero());
                    continue;
                }
                for (a, b) in block.weight.data().iter().chain(block.bias.data()).zip(&fd[l]) {
                    worst = worst.max(common::rel_err(*a, *b, GRAD_REL_FLOOR));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < GRAD_REL_TOL && off_nonzero == 0 && elapsed < GRAD_BUDGET,
        format!("{GRAD_MODELS} models, worst rel err {worst:.2e}, {off_nonzero} nonzero off-blocks, {elapsed:.2?}"),
    )
}

const EQUIVALENCE_TOML: &str = r#"
seed = 21

[dataset]
kind = "synthetic"
classes = 4
dim = 10
train_per_class = 60
test_per_class = 25
separation = 1.0

[partition]
kind = "iid"
devices = 8
per_device = 25

[model]
kind = "fcnn"
hidden = [16, 12, 8]

[strategy]
kind = "fedpmt"
widths = 1

[training]
selected = 8
rounds = 10
batch_size = 5
lr = { kind = "constant", value = 0.1 }

[timing]
tiers = [0.25, 0.5, 1.0]
balanced = false
base_full_time = 10.0
"#;

fn fedavg_equivalence() -> Outcome {
    let pmt_cfg = ExperimentConfig::from_toml_str(EQUIVALENCE_TOML).unwrap();
    let mut avg_cfg = pmt_cfg.clone();
    avg_cfg.strategy = StrategyConfig {
        kind: StrategyKind::Fedavg,
        ..pmt_cfg.strategy.clone()
    };
    let pmt = run_experiment(&pmt_cfg).unwrap();
    let avg = run_experiment(&avg_cfg).unwrap();
    let same_csv = metrics_csv(&pmt.records) == metrics_csv(&avg.records);
    let same_records = pmt.records == avg.records;
    let same_model = pmt.params == avg.params;
    check(
        same_csv && same_records && same_model,
        format!(
            "{} rounds, 8 devices: metrics identical {}, records identical {}, models identical {}",
            pmt.records.len(),
            same_csv,
            same_records,
            same_model
        ),
    )
}

fn convergence_rate() -> Outcome {
    let start = Instant::now();
    let cfg = ComparisonConfig::default();
    let cmp = compare_full_vs_partial(&cfg).unwrap();
    let elapsed = start.elapsed();
    let in_band = |s: f64| (s - SLOPE_TARGET).abs() <= SLOPE_TOL;
    check(
        in_band(cmp.full_slope)
            && in_band(cmp.partial_slope)
            && cmp.partial_not_better >= MIN_PARTIAL_NOT_BETTER
            && elapsed < CONVEX_BUDGET,
        format!(
            "slopes full {:.3} partial {:.3}, partial gap >= full on {}/{} seeds, {elapsed:.2?}",
            cmp.full_slope,
            cmp.partial_slope,
            cmp.partial_not_better,
            cmp.pairs.len()
        ),
    )
}

fn round_time_model() -> Outcome {
    let pmt_cfg = load("tiers-synthetic.toml");
    let mut avg_cfg = pmt_cfg.clone();
    avg_cfg.strategy = StrategyConfig {
        kind: StrategyKind::Fedavg,
        widths: 1,
        complexity_ratios: None,
        ..pmt_cfg.strategy.clone()
    };
    let tiers = pmt_cfg.timing.tiers.len();

    let pmt = run_experiment(&pmt_cfg).unwrap();
    let avg = run_experiment(&avg_cfg).unwrap();
    let durations_ok = pmt
        .records
        .iter()
        .all(|r| (r.round_seconds - PMT_ROUND_SECONDS).abs() < ROUND_TIME_TOL)
        && avg
            .records
            .iter()
            .all(|r| (r.round_seconds - AVG_ROUND_SECONDS).abs() < ROUND_TIME_TOL);

    let tiers_included = |cfg: &ExperimentConfig| -> BTreeSet<usize> {
        let mut short = cfg.clone();
        short.timing.deadline = Some(DEADLINE);
        short.training.rounds = 5;
        let out = run_experiment(&short).unwrap();
        out.records
            .iter()
            .map(|r| r.included.iter().map(|k| k % tiers).collect::<BTreeSet<_>>().len())
            .collect()
    };
    let pmt_tiers = tiers_included(&pmt_cfg);
    let avg_tiers = tiers_included(&avg_cfg);
    let deadline_ok = pmt_tiers == BTreeSet::from([5]) && avg_tiers == BTreeSet::from([2]);

    let t_pmt = time_to_accuracy(&pmt.records, TIME_TARGET);
    let t_avg = time_to_accuracy(&avg.records, TIME_TARGET);
    let ratio = match (t_pmt, t_avg) {
        (Some(a), Some(b)) => Some(a / b),
        _ => None,
    };
    check(
        durations_ok && deadline_ok && ratio.is_some_and(|r| r < MAX_TIME_RATIO),
        format!(
            "round seconds {:.1}/{:.1}, tiers within deadline {pmt_tiers:?}/{avg_tiers:?}, \
             time to {TIME_TARGET}: {t_pmt:?}/{t_avg:?} (ratio {ratio:.3?})",
            pmt.records[0].round_seconds, avg.records[0].round_seconds
        ),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn quality_vs_dropout() -> Outcome {
    let start = Instant::now();
    let base = load("noniid-synthetic.toml");
    let mut margins = Vec::new();
    let mut pairs = Vec::new();
    for seed in QUALITY_SEEDS {
        let mut pmt_cfg = base.clone();
        pmt_cfg.seed = seed;
        let mut drop_cfg = pmt_cfg.clone();
        drop_cfg.strategy.kind = StrategyKind::Feddrop;
        let pmt = run_experiment(&pmt_cfg).unwrap().final_accuracy().unwrap();
        let drop = run_experiment(&drop_cfg).unwrap().final_accuracy().unwrap();
        margins.push(pmt - drop);
        pairs.push(format!("{pmt:.3}/{drop:.3}"));
    }
    let elapsed = start.elapsed();
    let m = median(&mut margins);
    check(
        m >= MIN_MEDIAN_MARGIN && elapsed < QUALITY_BUDGET,
        format!(
            "final accuracy partial/dropout [{}], median margin {:+.1} pp, {elapsed:.2?}",
            pairs.join(", "),
            100.0 * m
        ),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = configs_dir().join("tiers-synthetic.toml");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_fedpmt"))
            .args(["run", "--seed", "3", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out_dir)
            .output()
            .unwrap();
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        outputs.push(out_dir);
    }
    let files = ["metrics.csv", "rounds.jsonl", "summary.json"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(outputs[0].join(f)).unwrap() != std::fs::read(outputs[1].join(f)).unwrap())
        .collect();
    let rows = std::fs::read_to_string(outputs[0].join("metrics.csv")).unwrap().lines().count();
    check(
        differing.is_empty(),
        format!("two runs, {rows} csv lines, differing files {differing:?}"),
    )
}

/// Λ by direct evaluation: solve the pooled normal equations by Gaussian
/// elimination and average each device's loss at that point.
fn lambda_by_elimination(task: &fedpmt::convex::QuadraticTask) -> f64 {
    let d = task.dim();
    let mut a = vec![vec![0.0; d + 1]; d];
    for k in 0..task.devices() {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += task.q[k][(i, j)];
            }
            a[i][d] += task.b[k][i];
        }
    }
    for c in 0..d {
        let p = (c..d).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=d {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    let w: Vec<f64> = (0..d).map(|i| a[i][d] / a[i][i]).collect();
    let mut total = 0.0;
    for k in 0..task.devices() {
        let e: Vec<f64> = (0..d).map(|i| w[i] - task.planted[k][i]).collect();
        for i in 0..d {
            for j in 0..d {
                total += 0.5 * e[i] * task.q[k][(i, j)] * e[j];
            }
        }
    }
    total / task.devices() as f64
}

fn diagnostics() -> Outcome {
    let mut failures = Vec::new();

    // tails 1, 0.8, 0.4 / 1 / 1, 0.5, 0.25
    let psi_fixtures: [(&[f64], usize, f64, f64); 3] = [
        (&[0.2, 0.4, 0.4], 5, 4.75, 71.25),
        (&[1.0], 10, 1.0, 10.0),
        (&[0.5, 0.25, 0.25], 4, 7.0, 84.0),
    ];
    for (p, s, statement, proof) in psi_fixtures {
        let got = compute_psi(p, s).unwrap();
        if !rel_close(got.statement_form, statement) || !rel_close(got.proof_form, proof) {
            failures.push(format!("psi {p:?}: {got:?}"));
        }
    }

    // scalar task: w* = Σq_k p_k / Σq_k, Λ = mean ½ q_k (w* − p_k)²
    let scalar = build_quadratic_task(&QuadraticTaskConfig {
        devices: 3,
        dim: 1,
        blocks: 1,
        heterogeneity: 2.0,
        mu: 0.5,
        seed: 8,
    })
    .unwrap();
    let q: Vec<f64> = scalar.q.iter().map(|m| m[(0, 0)]).collect();
    let p: Vec<f64> = scalar.planted.iter().map(|v| v[0]).collect();
    let w = q.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() / q.iter().sum::<f64>();
    let closed = q.iter().zip(&p).map(|(a, b)| 0.5 * a * (w - b).powi(2)).sum::<f64>() / 3.0;
    let mut lambda_cases = vec![(compute_lambda(&scalar), closed, "scalar".to_string())];
    for (dim, het, seed) in [(6, 1.0, 4), (12, 0.5, 5)] {
        let task = build_quadratic_task(&QuadraticTaskConfig {
            dim,
            heterogeneity: het,
            seed,
            ..QuadraticTaskConfig::default()
        })
        .unwrap();
        lambda_cases.push((compute_lambda(&task), lambda_by_elimination(&task), format!("dim {dim}")));
    }
    for (got, want, name) in &lambda_cases {
        if !rel_close(*got, *want) {
            failures.push(format!("lambda {name}: {got} vs {want}"));
        }
    }

    let bound_fixtures = [
        // Δ̃ = 2·4·9·0.5 = 36; (4·2/2 + 72)/10
        (
            BoundConstants {
                gamma1: 2.0,
                lambda: 3.0,
                local_steps: 1,
                g: 0.0,
                smoothness: 4.0,
                mu: 1.0,
                delta_sq: 0.0,
                epsilon: 1.0,
                psi: 4.0,
                widths: 1,
                selected: 4,
                heterogeneity: 0.5,
            },
            7,
            7.6,
        ),
        // Δ̃ = (8·4·0.25 + 2·1·12)/0.25 = 128; (1 + 256/4)/10
        (
            BoundConstants {
                gamma1: 1.0,
                lambda: 1.0,
                local_steps: 3,
                g: 0.5,
                smoothness: 2.0,
                mu: 2.0,
                delta_sq: 1.0,
                epsilon: 0.5,
                psi: 12.0,
                widths: 2,
                selected: 2,
                heterogeneity: 0.0,
            },
            9,
            6.5,
        ),
        // Δ̃ = (8 + 2·12·0.1 + 2·0.25·3)/4 = 2.975; (50 + 5.95/0.25)/100
        (
            BoundConstants {
                gamma1: 10.0,
                lambda: 9.0,
                local_steps: 2,
                g: 1.0,
                smoothness: 1.0,
                mu: 0.5,
                delta_sq: 0.25,
                epsilon: 2.0,
                psi: 3.0,
                widths: 3,
                selected: 1,
                heterogeneity: 0.1,
            },
            91,
            0.738,
        ),
    ];
    for (c, rounds, want) in bound_fixtures {
        let got = theorem1_bound(&c, rounds).unwrap();
        if !rel_close(got, want) {
            failures.push(format!("bound T={rounds}: {got} vs {want}"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "3 psi, 3 lambda and 3 bound fixtures agree".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("dense cost totals", fcnn_exactness),
        ("conv width ratios", cifar_ratios),
        ("dropout rate matching", match_rates),
        ("gradient oracle", gradient_oracle),
        ("single-width equals averaging", fedavg_equivalence),
        ("convex convergence rate", convergence_rate),
        ("round-time model", round_time_model),
        ("partial training vs dropout", quality_vs_dropout),
        ("run determinism", cli_determinism),
        ("psi, lambda and bound", diagnostics),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
