//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset, e.g.
//! `cargo test -p untied-validation --test acceptance -- 1 2 8`.
//!
//! MNIST is read from `$MNIST_DIR`, falling back to `data/mnist` at the
//! workspace root.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use untied::harness::{run_experiment, DatasetSpec, ExperimentConfig, Pairing, ResultArchive};
use untied::numerics::RandomStream;
use untied::verification::{
    conv_block_case, direction_invariance_trials, finite_difference_check, logistic_mlp_case, relu_stack_case,
    suc_direction_trials, DEFAULT_EPS,
};

/// Allowance on MNIST floors and ceilings when training on a subset.
const SUBSET_SLACK: f64 = 0.02;
/// Absolute tolerance around the reference accuracies of criterion 3.
const EXP1_TOLERANCE: f64 = 0.01;
const GRAD_TOL: f64 = 1e-5;
const DIRECTION_TRIALS: usize = 1000;
const DESK_SUBSET: usize = 10_000;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| workspace_root().join("data/mnist"))
}

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

/// Loads a shipped experiment config and narrows it to the given cells.
fn narrowed(
    file: &str,
    dims: &[usize],
    batch_sizes: &[usize],
    learning_rates: &[f64],
    pairings: &[&str],
    runs: usize,
) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(workspace_root().join("experiments").join(file)).map_err(|e| e.to_string())?;
    cfg.dims = dims.to_vec();
    cfg.batch_sizes = batch_sizes.to_vec();
    cfg.learning_rates = learning_rates.to_vec();
    cfg.pairings = pairings.iter().map(|p| p.parse::<Pairing>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    cfg.runs = runs;
    if let DatasetSpec::Mnist { dir, train_subset } = &mut cfg.dataset {
        *dir = mnist_dir();
        *train_subset = DESK_SUBSET;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(cfg: &ExperimentConfig) -> Result<ResultArchive, String> {
    run_experiment(cfg, 0).map_err(|e| e.to_string())
}

/// Rewrites the pairing part of a cell id into its canonical form.
fn canonical(id: &str) -> Result<String, String> {
    let (head, pair) = id.split_once("pair=").ok_or_else(|| format!("bad cell id {id}"))?;
    let pair: Pairing = pair.parse().map_err(|e: untied::Error| e.to_string())?;
    Ok(format!("{head}pair={pair}"))
}

fn mean_of(archive: &ResultArchive, id: &str) -> Result<f64, String> {
    archive.cell(&canonical(id)?).map(|c| c.mean).map_err(|e| e.to_string())
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed < limit, format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

/// Threshold checks on cell means, rendered as `label mean (op bound)`.
enum Bound {
    AtLeast(f64),
    Below(f64),
    Above(f64),
}

fn check(archive: &ResultArchive, id: &str, label: &str, bound: Bound) -> Result<(bool, String), String> {
    let mean = mean_of(archive, id)?;
    let (ok, text) = match bound {
        Bound::AtLeast(b) => (mean >= b, format!(">= {b:.2}")),
        Bound::Below(b) => (mean < b, format!("< {b:.2}")),
        Bound::Above(b) => (mean > b, format!("> {b:.2}")),
    };
    Ok((ok, format!("{label} {mean:.4} ({text})")))
}

fn summarize(checks: Vec<(bool, String)>, elapsed: Duration, limit: Duration) -> Outcome {
    let (time_ok, time) = within(elapsed, limit);
    let passed = time_ok && checks.iter().all(|(ok, _)| *ok);
    let mut parts: Vec<String> = checks.into_iter().map(|(_, s)| s).collect();
    parts.push(time);
    Outcome::new(passed, parts.join("; "))
}

fn gradient_correctness() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    for seed in 0..5 {
        for (slot, case) in [logistic_mlp_case(seed), relu_stack_case(seed), conv_block_case(seed)].into_iter().enumerate() {
            let r = finite_difference_check(&case.net, &case.x, &case.y, DEFAULT_EPS).map_err(|e| e.to_string())?;
            worst[slot] = worst[slot].max(r.max_rel_error);
        }
    }
    let checks = ["mlp", "relu", "conv"]
        .iter()
        .zip(worst)
        .map(|(name, err)| (err < GRAD_TOL, format!("{name} max rel err {err:.1e}")))
        .collect();
    Ok(summarize(checks, start.elapsed(), Duration::from_secs(60)))
}

fn direction_invariance() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rs = RandomStream::new(2024);
    let (dir_fail, dir_first) = direction_invariance_trials(DIRECTION_TRIALS, &mut rs).map_err(|e| e.to_string())?;
    let (suc_fail, suc_first) = suc_direction_trials(DIRECTION_TRIALS, &mut rs).map_err(|e| e.to_string())?;
    let mut checks = vec![
        (dir_fail == 0, format!("delta direction {dir_fail}/{DIRECTION_TRIALS} failures")),
        (suc_fail == 0, format!("suc update {suc_fail}/{DIRECTION_TRIALS} failures")),
    ];
    if let Some(first) = dir_first.or(suc_first) {
        checks.push((false, format!("first: {first}")));
    }
    Ok(summarize(checks, start.elapsed(), Duration::from_secs(10)))
}

fn exp1_suc() -> Result<Outcome, String> {
    let start = Instant::now();
    let cfg = narrowed("exp1.toml", &[2], &[32], &[0.1], &["log/d", "log/1"], 5)?;
    let archive = run(&cfg)?;
    let mut checks = Vec::new();
    for (pair, reference) in [("log/d", 0.9982), ("log/1", 0.9986)] {
        let id = format!("dim=2,bs=32,lr=0.1,pair={pair}");
        let mean = mean_of(&archive, &id)?;
        let ok = mean >= 0.99 && (mean - reference).abs() <= EXP1_TOLERANCE;
        checks.push((ok, format!("{pair} {mean:.4} (>= 0.99, ref {reference} ± {EXP1_TOLERANCE})")));
    }
    Ok(summarize(checks, start.elapsed(), Duration::from_secs(60)))
}

fn exp2_mlp() -> Result<Outcome, String> {
    let start = Instant::now();
    let stable = run(&narrowed("exp2_h64.toml", &[], &[64], &[0.01], &["log/d", "log/1"], 5)?)?;
    let unstable = run(&narrowed("exp2_h64.toml", &[], &[128], &[0.1], &["log/d", "log/1"], 5)?)?;
    let checks = vec![
        check(&stable, "bs=64,lr=0.01,pair=log/d", "tied", Bound::AtLeast(0.95))?,
        check(&stable, "bs=64,lr=0.01,pair=log/1", "untied", Bound::AtLeast(0.92))?,
        check(&unstable, "bs=128,lr=0.1,pair=log/d", "tied@bs128/lr0.1", Bound::Below(0.5))?,
        check(&unstable, "bs=128,lr=0.1,pair=log/1", "untied@bs128/lr0.1", Bound::Above(0.8))?,
    ];
    Ok(summarize(checks, start.elapsed(), Duration::from_secs(600)))
}

fn exp3_lenet() -> Result<Outcome, String> {
    let start = Instant::now();
    let cfg = narrowed("exp3.toml", &[], &[256], &[0.005, 0.1], &["log/d", "log/rect"], 3)?;
    let archive = run(&cfg)?;
    let checks = vec![
        check(&archive, "bs=256,lr=0.1,pair=log/rect", "log/rect@0.1", Bound::AtLeast(0.95 - SUBSET_SLACK))?,
        check(&archive, "bs=256,lr=0.005,pair=log/d", "log/d@0.005", Bound::Below(0.2 + SUBSET_SLACK))?,
    ];
    Ok(summarize(checks, start.elapsed(), Duration::from_secs(1800)))
}

fn exp5_jamming() -> Result<Outcome, String> {
    let start = Instant::now();
    let fj = run(&narrowed("exp5_fj.toml", &[], &[32], &[0.02], &["id/fj"], 3)?)?;
    let pj = run(&narrowed("exp5_pj.toml", &[], &[32], &[0.02], &["relu/pj"], 3)?)?;
    let saturated = run(&narrowed("exp5_pj.toml", &[], &[64], &[0.001], &["log/pj"], 3)?)?;
    let checks = vec![
        check(&fj, "bs=32,lr=0.02,pair=id/fj", "id/fj", Bound::AtLeast(0.85 - SUBSET_SLACK))?,
        check(&pj, "bs=32,lr=0.02,pair=relu/pj", "relu/pj", Bound::AtLeast(0.93 - SUBSET_SLACK))?,
        check(&saturated, "bs=64,lr=0.001,pair=log/pj", "log/pj", Bound::Below(0.35 + SUBSET_SLACK))?,
    ];
    Ok(summarize(checks, start.elapsed(), Duration::from_secs(1800)))
}

fn bnn() -> Result<Outcome, String> {
    let start = Instant::now();
    let suc = run(&narrowed("bnn1.toml", &[2], &[32], &[0.01], &["step/1"], 5)?)?;
    let lenet = run(&narrowed("bnn2.toml", &[], &[256], &[0.1], &["step/rect"], 3)?)?;
    let checks = vec![
        check(&suc, "dim=2,bs=32,lr=0.01,pair=step/1", "suc step/1", Bound::AtLeast(0.99))?,
        check(&lenet, "bs=256,lr=0.1,pair=step/rect", "lenet step/rect", Bound::AtLeast(0.93 - SUBSET_SLACK))?,
    ];
    Ok(summarize(checks, start.elapsed(), Duration::from_secs(1800)))
}

fn determinism() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut configs = vec![("exp1", narrowed("exp1.toml", &[2, 10], &[32], &[0.1], &["log/d", "log/1"], 3)?)];
    let mut jam = narrowed("exp5_rj.toml", &[], &[64], &[0.01], &["relu/rj"], 2)?;
    jam.epochs = Some(1);
    if let DatasetSpec::Mnist { train_subset, .. } = &mut jam.dataset {
        *train_subset = 500;
    }
    configs.push(("exp5_rj", jam));
    for (name, cfg) in configs {
        let a = run(&cfg)?.to_json().map_err(|e| e.to_string())?;
        let b = run(&cfg)?.to_json().map_err(|e| e.to_string())?;
        checks.push((a == b, format!("{name} archive {} bytes {}", a.len(), if a == b { "identical" } else { "DIFFERS" })));
    }
    Ok(summarize(checks, start.elapsed(), Duration::from_secs(600)))
}

type Criterion = (u32, &'static str, fn() -> Result<Outcome, String>);

const CRITERIA: [Criterion; 8] = [
    (1, "tied gradients match finite differences", gradient_correctness),
    (2, "update direction is independent of the backward factor", direction_invariance),
    (3, "single-unit classifier on ones, dim 2", exp1_suc),
    (4, "MLP-64 on digits, tied vs untied and instability contrast", exp2_mlp),
    (5, "LeNet-5 on MNIST, rectangular factor vs tied", exp3_lenet),
    (6, "LeNet-5 on MNIST with jammed factors", exp5_jamming),
    (7, "Heaviside networks train", bnn),
    (8, "reruns give byte-identical archives", determinism),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let outcome = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        println!("{} criterion {n}: {name}: {}", if outcome.passed { "PASS" } else { "FAIL" }, outcome.detail);
        failed += usize::from(!outcome.passed);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
