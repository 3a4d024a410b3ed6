//! Experiment driver library: config loading, artifact writing, and the
//! run / landscape / compare / verify operations behind the `roed` binary.
//!
//! Artifacts are deterministic: identical config and seeds reproduce
//! byte-identical files. There are no timestamps, parallel reductions
//! preserve order, and floats are printed with a fixed format. Every file
//! embeds the config digest so a result can always be traced back to the
//! exact configuration that produced it.

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use roed::design::Design;
use roed::experiment::ExperimentConfig;
use roed::fem::Field;
use roed::optimizer::{self, OuterRecord, Termination};
use roed::utility::EvalConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const RESULTS_FILE: &str = "results.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const LANDSCAPE_FILE: &str = "landscape.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const CACHE_DIR: &str = "cache";
/// Output directory used when `--out` is not given.
pub const OUT_DIR_ENV: &str = "ROED_OUT_DIR";

/// Scalars from a rerun must match the recorded run to this relative
/// precision; deterministic execution makes them exactly equal in practice.
const VERIFY_TOL: f64 = 1e-12;

/// Landscape evaluation is meant for exhaustive inspection of small
/// problems; refuse anything bigger.
const MAX_LANDSCAPE_SENSORS: usize = 8;
const MAX_LANDSCAPE_POINTS: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub config_digest: String,
    pub optimizer_seed: u64,
    pub data_seed: u64,
    pub eig_seed: u64,
    pub version: String,
}

/// Contents of `results.json`. Solve counters are deliberately absent: they
/// depend on the state of the on-disk MAP cache, and the results file must
/// be byte-stable across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsFile {
    pub provenance: Provenance,
    /// Selected design as a bitstring, sensor 0 first.
    pub design: String,
    pub active_sensors: Vec<usize>,
    /// Worst-case utility of the selected design over `theta_samples`.
    pub design_value: f64,
    /// Utility of the selected design at each member of `theta_samples`.
    pub design_utilities: Vec<f64>,
    pub theta_opt: Vec<f64>,
    pub policy: Vec<f64>,
    pub theta_samples: Vec<Vec<f64>>,
    pub termination: Termination,
    pub outer_iterations: usize,
    pub samples_total: u64,
    pub samples_feasible: u64,
}

pub struct RunOutput {
    pub results: ResultsFile,
    pub trajectory: Vec<OuterRecord>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.validate()
        .with_context(|| format!("validating config {}", path.display()))?;
    Ok(cfg)
}

/// `--out` flag, else the environment override, else `roed_out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("roed_out"))
}

fn fmt_float(v: f64) -> String {
    format!("{v:.12e}")
}

/// Run the optimization loop without touching the output directory (the MAP
/// cache location is the only filesystem interaction).
pub fn execute(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<RunOutput> {
    let digest = cfg.digest();
    let bundle = cfg.build(cache_dir).context("building experiment")?;
    let mut evaluator = bundle.evaluator;
    let opt_cfg = bundle.optimizer;
    let result = optimizer::run(&mut evaluator, &opt_cfg).context("optimization loop")?;

    // All memo hits: the final design/theta pairs were just evaluated.
    let design_utilities = result
        .theta_samples
        .iter()
        .map(|t| evaluator.utility(&result.design_opt, t))
        .collect::<Result<Vec<_>, _>>()?;

    let eig_seed = cfg
        .evaluator
        .eig_seed
        .unwrap_or_else(|| EvalConfig::default().eig_seed);
    let results = ResultsFile {
        provenance: Provenance {
            config_digest: digest,
            optimizer_seed: opt_cfg.seed,
            data_seed: cfg.sampling.data_seed,
            eig_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        design: result.design_opt.to_string(),
        active_sensors: result.design_opt.active_indices(),
        design_value: result.design_value,
        design_utilities,
        theta_opt: result.theta_opt.iter().copied().collect(),
        policy: result.policy,
        theta_samples: result
            .theta_samples
            .iter()
            .map(|t| t.iter().copied().collect())
            .collect(),
        termination: result.termination,
        outer_iterations: result.trajectory.len(),
        samples_total: result.counters.total,
        samples_feasible: result.counters.feasible,
    };
    Ok(RunOutput {
        results,
        trajectory: result.trajectory,
    })
}

/// Run and persist `results.json` + `trajectory.csv` under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ResultsFile> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let output = execute(cfg, Some(&out.join(CACHE_DIR)))?;
    write_trajectory(&out.join(TRAJECTORY_FILE), &output)?;
    let path = out.join(RESULTS_FILE);
    let json = serde_json::to_string_pretty(&output.results)?;
    fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(output.results)
}

fn write_trajectory(path: &Path, output: &RunOutput) -> Result<()> {
    let digest = &output.results.provenance.config_digest;
    let theta_dim = output
        .trajectory
        .first()
        .map_or(0, |r| r.theta_new.len());
    let n_sensors = output.trajectory.first().map_or(0, |r| r.policy.len());
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;

    let mut header: Vec<String> = [
        "iteration",
        "mean_objective",
        "baseline",
        "policy_grad_norm",
        "policy_iterations",
        "policy_step_norm",
        "incumbent",
        "incumbent_value",
        "inner_value",
        "inner_iterations",
        "stagnated",
        "reference_refreshed",
    ]
    .map(String::from)
    .to_vec();
    header.extend((0..theta_dim).map(|j| format!("theta_{j}")));
    header.extend((0..n_sensors).map(|i| format!("p_{i}")));
    header.push("config_digest".into());
    w.write_record(&header)?;

    for r in &output.trajectory {
        let mut row = vec![
            r.iteration.to_string(),
            fmt_float(r.mean_objective),
            fmt_float(r.baseline),
            fmt_float(r.policy_grad_norm),
            r.policy_iterations.to_string(),
            fmt_float(r.policy_step_norm),
            r.incumbent.clone(),
            fmt_float(r.incumbent_value),
            fmt_float(r.inner_value),
            r.inner_iterations.to_string(),
            r.stagnated.to_string(),
            r.reference_refreshed.to_string(),
        ];
        row.extend(r.theta_new.iter().map(|&t| fmt_float(t)));
        row.extend(r.policy.iter().map(|&p| fmt_float(p)));
        row.push(digest.clone());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_design(s: &str, n_sensors: usize) -> Result<Design> {
    ensure!(
        s.len() == n_sensors,
        "design `{s}` has {} entries, problem has {n_sensors} sensors",
        s.len()
    );
    let bits = s
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => bail!("design `{s}` contains `{other}`; expected only 0/1"),
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(Design::new(bits))
}

/// Uniform per-axis grid over the hyperparameter box, all combinations in
/// row-major order (last axis fastest). A single point per axis lands on the
/// box midpoint.
fn theta_grid(lo: &Field, hi: &Field, points_per_axis: usize) -> Vec<Field> {
    let dim = lo.len();
    let axis = |j: usize, k: usize| -> f64 {
        if points_per_axis == 1 {
            0.5 * (lo[j] + hi[j])
        } else {
            lo[j] + (hi[j] - lo[j]) * k as f64 / (points_per_axis - 1) as f64
        }
    };
    let total = points_per_axis.pow(dim as u32);
    let mut grid = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        grid.push(Field::from_fn(dim, |j, _| axis(j, idx[j])));
        for j in (0..dim).rev() {
            idx[j] += 1;
            if idx[j] < points_per_axis {
                break;
            }
            idx[j] = 0;
        }
    }
    grid
}

/// Evaluate the utility of each design on a dense hyperparameter grid and
/// write `landscape.csv`. Designs with no active sensors produce NaN rows
/// (the budget distribution never proposes them; there is no meaningful
/// utility value to invent). Returns the number of data rows written.
pub fn evaluate_landscape(
    cfg: &ExperimentConfig,
    out: &Path,
    designs: &[String],
    points_per_axis: usize,
) -> Result<usize> {
    ensure!(!designs.is_empty(), "no designs given");
    ensure!(points_per_axis >= 1, "grid needs at least one point per axis");

    let digest = cfg.digest();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let bundle = cfg.build(Some(&out.join(CACHE_DIR)))?;
    let evaluator = bundle.evaluator;
    let n_sensors = evaluator.noise_model().n_sensors();
    let dim = evaluator.noise_model().theta_dim();

    ensure!(
        n_sensors <= MAX_LANDSCAPE_SENSORS,
        "landscape guard: {n_sensors} sensors exceeds the limit of {MAX_LANDSCAPE_SENSORS}"
    );
    let total = points_per_axis
        .checked_pow(dim as u32)
        .filter(|&t| t <= MAX_LANDSCAPE_POINTS)
        .with_context(|| {
            format!(
                "landscape guard: {points_per_axis}^{dim} grid points exceeds the limit of {MAX_LANDSCAPE_POINTS}"
            )
        })?;

    let parsed = designs
        .iter()
        .map(|s| parse_design(s, n_sensors))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = evaluator.noise_model().theta_box();
    let grid = theta_grid(&lo, &hi, points_per_axis);
    debug_assert_eq!(grid.len(), total);

    let path = out.join(LANDSCAPE_FILE);
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    let mut header: Vec<String> = vec!["design".into()];
    header.extend((0..dim).map(|j| format!("theta_{j}")));
    header.push("utility".into());
    header.push("config_digest".into());
    w.write_record(&header)?;

    let mut rows = 0usize;
    for design in &parsed {
        if design.count_active() == 0 {
            log::warn!("design {design} has no active sensors; emitting NaN utilities");
        }
        for theta in &grid {
            let value = if design.count_active() == 0 {
                f64::NAN
            } else {
                evaluator.utility(design, theta)?
            };
            let mut row = vec![design.to_string()];
            row.extend(theta.iter().map(|&t| fmt_float(t)));
            row.push(fmt_float(value));
            row.push(digest.clone());
            w.write_record(&row)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn load_results(out: &Path) -> Result<ResultsFile> {
    let path = out.join(RESULTS_FILE);
    ensure!(
        path.exists(),
        "no {} in {}; run the experiment first",
        RESULTS_FILE,
        out.display()
    );
    let file = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&file).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Copy)]
pub struct CompareOutcome {
    pub optimal_value: f64,
    pub n_random: usize,
    /// Random designs whose utility does not exceed the optimal design's.
    pub n_not_exceeding: usize,
}

/// Sample uniformly random feasible designs, evaluate them at the recorded
/// worst-case hyperparameter, and write `compare.csv` with the optimal
/// design's row flagged.
pub fn compare_random_designs(
    cfg: &ExperimentConfig,
    out: &Path,
    count: usize,
    sample_seed: u64,
) -> Result<CompareOutcome> {
    let results = load_results(out)?;
    let mut cfg = cfg.clone();
    cfg.optimizer.seed = results.provenance.optimizer_seed;
    ensure!(
        cfg.digest() == results.provenance.config_digest,
        "config does not match the recorded run (digest mismatch)"
    );

    let bundle = cfg.build(Some(&out.join(CACHE_DIR)))?;
    let mut evaluator = bundle.evaluator;
    let n_sensors = evaluator.noise_model().n_sensors();
    let budget = cfg.optimizer.budget;

    // Replay the reference updates the optimizer performed: after each new
    // hyperparameter sample it re-centers on the running mean, and the
    // refresh threshold makes the final state depend on that exact sequence.
    let thetas: Vec<Field> = results
        .theta_samples
        .iter()
        .map(|t| Field::from_vec(t.clone()))
        .collect();
    ensure!(!thetas.is_empty(), "recorded run has no hyperparameter samples");
    for j in 2..=thetas.len() {
        let mut mean = Field::zeros(thetas[0].len());
        for t in &thetas[..j] {
            mean += t;
        }
        mean /= j as f64;
        evaluator.update_reference(&mean)?;
    }

    let theta_opt = Field::from_vec(results.theta_opt.clone());
    let design_opt = parse_design(&results.design, n_sensors)?;
    let optimal_value = evaluator.utility(&design_opt, &theta_opt)?;

    let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);
    let mut records: Vec<(Design, f64, bool)> = vec![(design_opt, optimal_value, true)];
    for _ in 0..count {
        let picked = rand::seq::index::sample(&mut rng, n_sensors, budget).into_vec();
        let design = Design::from_indices(n_sensors, &picked);
        let value = evaluator.utility(&design, &theta_opt)?;
        records.push((design, value, false));
    }

    let path = out.join(COMPARE_FILE);
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "design",
        "utility",
        "is_optimal",
        "sample_seed",
        "config_digest",
    ])?;
    for (design, value, is_opt) in &records {
        w.write_record(&[
            design.to_string(),
            fmt_float(*value),
            is_opt.to_string(),
            sample_seed.to_string(),
            results.provenance.config_digest.clone(),
        ])?;
    }
    w.flush()?;

    let n_not_exceeding = records
        .iter()
        .filter(|(_, v, is_opt)| !is_opt && *v <= optimal_value)
        .count();
    Ok(CompareOutcome {
        optimal_value,
        n_random: count,
        n_not_exceeding,
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= VERIFY_TOL * a.abs().max(b.abs()).max(1.0)
}

fn check_scalar(what: &str, recorded: f64, fresh: f64) -> Result<()> {
    ensure!(
        close(recorded, fresh),
        "{what} differs: recorded {recorded:e}, recomputed {fresh:e}"
    );
    Ok(())
}

fn check_vec(what: &str, recorded: &[f64], fresh: &[f64]) -> Result<()> {
    ensure!(
        recorded.len() == fresh.len(),
        "{what} length differs: recorded {}, recomputed {}",
        recorded.len(),
        fresh.len()
    );
    for (i, (r, f)) in recorded.iter().zip(fresh).enumerate() {
        check_scalar(&format!("{what}[{i}]"), *r, *f)?;
    }
    Ok(())
}

/// Recompute the experiment from the config and confirm the recorded
/// artifacts: the config digest must match, and every scalar output must
/// agree to 1e-12 relative.
pub fn verify(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let recorded = load_results(out)?;
    let mut cfg = cfg.clone();
    cfg.optimizer.seed = recorded.provenance.optimizer_seed;
    ensure!(
        cfg.digest() == recorded.provenance.config_digest,
        "config digest mismatch: the config file no longer matches the recorded run"
    );

    let fresh = execute(&cfg, Some(&out.join(CACHE_DIR)))?.results;
    ensure!(
        recorded.design == fresh.design,
        "design differs: recorded {}, recomputed {}",
        recorded.design,
        fresh.design
    );
    ensure!(
        recorded.termination == fresh.termination,
        "termination differs: recorded {:?}, recomputed {:?}",
        recorded.termination,
        fresh.termination
    );
    ensure!(
        recorded.outer_iterations == fresh.outer_iterations
            && recorded.samples_total == fresh.samples_total
            && recorded.samples_feasible == fresh.samples_feasible,
        "iteration/sample counters differ"
    );
    check_scalar("design_value", recorded.design_value, fresh.design_value)?;
    check_vec("design_utilities", &recorded.design_utilities, &fresh.design_utilities)?;
    check_vec("theta_opt", &recorded.theta_opt, &fresh.theta_opt)?;
    check_vec("policy", &recorded.policy, &fresh.policy)?;
    ensure!(
        recorded.theta_samples.len() == fresh.theta_samples.len(),
        "hyperparameter sample counts differ"
    );
    for (i, (r, f)) in recorded
        .theta_samples
        .iter()
        .zip(&fresh.theta_samples)
        .enumerate()
    {
        check_vec(&format!("theta_samples[{i}]"), r, f)?;
    }
    Ok(())
}
