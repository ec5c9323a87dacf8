//! Command-line orchestration: whole experiments from JSON configs, with
//! per-run trace CSVs, a summary CSV, an averaged fitness curve, seeding
//! runs, and multi-config comparisons.
//!
//! CSV contracts -- trace: `run_id,generation,episode,best_J,best_nodes`;
//! summary: `run_id,episodes_to_target,best_J,best_tree,wall_time_s`;
//! compare: `method,run_id,episode,best_J`; averaged curve:
//! `episode,mean_best_J`. Floats carry 6 significant digits, LF line
//! endings. Every command is reproducible from config + master seed
//! (llm mode excepted), so re-runs emit byte-identical files; the
//! summary's `wall_time_s` is the run's total simulated execution time
//! (real elapsed time goes to stdout only, where it cannot break
//! reproducibility).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::bt::BTNode;
use crate::config::{ExperimentConfig, SeedMode, ThetaMode};
use crate::fitness::{evaluate, rollout_rng, run_episode_traced, score, EvalConfig};
use crate::gp::{evolve, gate_seeds, EvolutionTrace, Individual, SeedingPlan};
use crate::seeder::{
    build_prompt, generate_candidates, replay_provider, ChatProvider, HttpProvider, ProviderError,
    SeedRequestLog,
};
use crate::sim::{FailureProfile, Scenario};
use crate::text::{parse, serialize, validate};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Provider(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Validation(_) => 2,
            CliError::Provider(_) => 3,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<crate::config::ConfigFileError> for CliError {
    fn from(err: crate::config::ConfigFileError) -> CliError {
        CliError::Config(err.to_string())
    }
}

impl From<ProviderError> for CliError {
    fn from(err: ProviderError) -> CliError {
        CliError::Provider(err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> CliError {
        CliError::Failure(err.to_string())
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub master_seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(seed) = self.master_seed {
            config.master_seed = seed;
        }
    }
}

/// Floats in emitted CSVs: 6 significant digits, `.` separator, no
/// exponent in the ranges the harness produces.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&magnitude) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub struct RunOutcome {
    pub run_id: u32,
    pub best: Individual,
    pub trace: EvolutionTrace,
}

pub struct ExperimentResult {
    pub label: String,
    pub target_j: f64,
    pub runs: Vec<RunOutcome>,
}

impl ExperimentResult {
    pub fn episodes_to_target(&self) -> Vec<Option<u64>> {
        self.runs.iter().map(|r| r.trace.episodes_to(self.target_j)).collect()
    }
}

/// Median over per-run episode counts; runs that never reached the
/// target count as unbounded, and a median falling on them is `None`.
pub fn median_episodes(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<Option<u64>> = values.to_vec();
    sorted.sort_by_key(|v| v.unwrap_or(u64::MAX));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid].map(|v| v as f64)
    } else {
        match (sorted[mid - 1], sorted[mid]) {
            (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
            _ => None,
        }
    }
}

fn resolve_theta(config: &ExperimentConfig, eval_cfg: &EvalConfig) -> Result<f64, CliError> {
    match config.seeding.theta {
        ThetaMode::Explicit(value) => Ok(value),
        ThetaMode::EmptyTree => {
            // deterministic-profile fitness of the empty tree: the gate
            // floor is "must beat doing nothing"
            let mut det_cfg = eval_cfg.clone();
            det_cfg.profile = FailureProfile::det();
            evaluate(&BTNode::Sequence(vec![]), &det_cfg, config.master_seed)
                .map(|report| report.mean_j)
                .map_err(|e| CliError::Failure(e.to_string()))
        }
    }
}

fn make_provider(config: &ExperimentConfig) -> Result<Box<dyn ChatProvider>, CliError> {
    match config.seeding.mode {
        SeedMode::Replay => {
            let dir = config
                .seeding
                .script_dir
                .as_ref()
                .ok_or_else(|| CliError::Config("replay seeding needs seeding.script_dir".to_string()))?;
            Ok(Box::new(replay_provider(dir)?))
        }
        SeedMode::Llm => {
            let provider_cfg = config.seeding.provider.clone().unwrap_or_default();
            Ok(Box::new(HttpProvider::new(provider_cfg)?))
        }
        SeedMode::None => Err(CliError::Config("seeding.mode is none".to_string())),
    }
}

fn seed_candidates(config: &ExperimentConfig, eval_cfg: &EvalConfig) -> Result<(Vec<BTNode>, SeedRequestLog), CliError> {
    let scenario = &eval_cfg.scenario;
    let bundle = build_prompt(
        scenario,
        &eval_cfg.registry,
        &config.task_text(),
        config.seeding.image_ref.as_deref(),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let mut provider = make_provider(config)?;
    let (candidates, log) = generate_candidates(
        provider.as_mut(),
        &bundle,
        config.seeding.n_seeds,
        &eval_cfg.registry,
        config.seeding.attempts_cap(),
    )?;
    Ok((candidates, log))
}

/// Runs the `runs` independent evolutions of one experiment config.
/// Seeds are generated once and gated per run (gate evaluations spend
/// that run's episode budget); run `i` uses master seed
/// `master_seed + i`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, CliError> {
    config.validate()?;
    let eval_cfg = config.eval_config()?;
    let seeding_plan = match config.seeding.mode {
        SeedMode::None => None,
        _ => {
            let theta = resolve_theta(config, &eval_cfg)?;
            let (candidates, _log) = seed_candidates(config, &eval_cfg)?;
            Some(SeedingPlan { candidates, theta })
        }
    };
    let mut runs = Vec::with_capacity(config.runs as usize);
    for run_id in 0..config.runs {
        let master_seed = config.master_seed.wrapping_add(run_id as u64);
        let (best, trace) = evolve(&config.gp, &eval_cfg, seeding_plan.as_ref(), master_seed)
            .map_err(|e| CliError::Failure(e.to_string()))?;
        runs.push(RunOutcome { run_id, best, trace });
    }
    Ok(ExperimentResult {
        label: config.method_label(),
        target_j: config.summary_target_j,
        runs,
    })
}

fn trace_csv(run: &RunOutcome) -> String {
    let mut out = String::from("run_id,generation,episode,best_J,best_nodes\n");
    for row in &run.trace.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            run.run_id,
            row.generation,
            row.episode,
            fmt_float(row.best_j),
            row.best_nodes
        )
        .expect("write to string");
    }
    out
}

fn summary_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("run_id,episodes_to_target,best_J,best_tree,wall_time_s\n");
    for run in &result.runs {
        let to_target = run
            .trace
            .episodes_to(result.target_j)
            .map(|e| e.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            run.run_id,
            to_target,
            fmt_float(run.best.mean_j()),
            run.best.key,
            fmt_float(run.trace.sim_seconds)
        )
        .expect("write to string");
    }
    out
}

/// Best fitness per run as a step function over episodes 1..=E (E the
/// longest trace), forward-filled past each run's end.
fn mean_curve(runs: &[RunOutcome]) -> Vec<(u64, f64)> {
    let max_episode = runs.iter().filter_map(|r| r.trace.rows.last().map(|row| row.episode)).max().unwrap_or(0);
    let mut curve = Vec::with_capacity(max_episode as usize);
    let mut cursors = vec![0usize; runs.len()];
    let mut current: Vec<Option<f64>> = vec![None; runs.len()];
    for episode in 1..=max_episode {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, run) in runs.iter().enumerate() {
            let rows = &run.trace.rows;
            while cursors[i] < rows.len() && rows[cursors[i]].episode <= episode {
                current[i] = Some(rows[cursors[i]].best_j);
                cursors[i] += 1;
            }
            if let Some(value) = current[i] {
                sum += value;
                count += 1;
            }
        }
        if count > 0 {
            curve.push((episode, sum / count as f64));
        }
    }
    curve
}

fn mean_curve_csv(runs: &[RunOutcome]) -> String {
    let mut out = String::from("episode,mean_best_J\n");
    for (episode, value) in mean_curve(runs) {
        writeln!(out, "{},{}", episode, fmt_float(value)).expect("write to string");
    }
    out
}

fn write_experiment_files(dir: &Path, result: &ExperimentResult) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for run in &result.runs {
        fs::write(dir.join(format!("trace_run{}.csv", run.run_id)), trace_csv(run))?;
    }
    fs::write(dir.join("summary.csv"), summary_csv(result))?;
    fs::write(dir.join("mean_curve.csv"), mean_curve_csv(&result.runs))?;
    Ok(())
}

/// `evobt evolve <config>`: run the experiment, emit per-run traces, the
/// summary, and the averaged curve.
pub fn cmd_evolve(config_path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut config);
    let started = Instant::now();
    let result = run_experiment(&config)?;
    write_experiment_files(&config.output_dir, &result)?;
    for run in &result.runs {
        let to_target = run
            .trace
            .episodes_to(result.target_j)
            .map(|e| e.to_string())
            .unwrap_or_else(|| "never".to_string());
        println!(
            "run {}: best_J={} nodes={} episodes={} to_target={}",
            run.run_id,
            fmt_float(run.best.mean_j()),
            run.best.node_count(),
            run.trace.rows.len(),
            to_target
        );
    }
    let reached = result.episodes_to_target().iter().filter(|e| e.is_some()).count();
    println!(
        "{}: {}/{} runs reached J>={}; median episodes-to-target {}; wrote {} ({:.2}s elapsed)",
        result.label,
        reached,
        result.runs.len(),
        fmt_float(result.target_j),
        median_episodes(&result.episodes_to_target())
            .map(|m| fmt_float(m))
            .unwrap_or_else(|| "n/a".to_string()),
        config.output_dir.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// `evobt run-bt <file>`: validate, run one episode, print the
/// action-by-action transcript and the scored outcome.
pub fn cmd_run_bt(tree_path: &Path, scenario: &str, profile: &str, seed: u64) -> Result<(), CliError> {
    let text = fs::read_to_string(tree_path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", tree_path.display())))?;
    let tree = parse(&text).map_err(|e| CliError::Validation(format!("parse error: {e}")))?;
    let scenario = Scenario::by_name(scenario)
        .ok_or_else(|| CliError::Config(format!("unknown scenario `{scenario}`")))?;
    let profile = FailureProfile::by_name(profile)
        .ok_or_else(|| CliError::Config(format!("unknown profile `{profile}`")))?;
    let registry = scenario.registry();
    let report = validate(&tree, &registry);
    for violation in &report.violations {
        println!("{violation}");
    }
    if !report.is_valid() {
        return Err(CliError::Validation("tree is not contextually valid".to_string()));
    }
    let eval_cfg = EvalConfig::new(scenario, profile);
    let key = serialize(&tree);
    let (outcome, transcript) = run_episode_traced(&tree, &eval_cfg, rollout_rng(seed, &key, 0))
        .map_err(|e| CliError::Failure(e.to_string()))?;
    for row in &transcript {
        println!(
            "tick {:>2} step {:>3}  {:<24} {:<8} clock={:<8} {}",
            row.root_tick,
            row.step,
            row.leaf,
            format!("{:?}", row.status),
            fmt_float(row.clock),
            row.delta
        );
    }
    let j = score(&outcome, &eval_cfg.weights);
    println!(
        "picked={} placed={} d_cube_goal={} d_robot_cube={} loc_err={} nodes={} exec_time={} root_ticks={}",
        outcome.picked,
        outcome.placed,
        fmt_float(outcome.d_cube_goal),
        fmt_float(outcome.d_robot_cube),
        fmt_float(outcome.loc_err),
        outcome.node_count,
        fmt_float(outcome.exec_time),
        outcome.root_ticks_used
    );
    println!("J={}", fmt_float(j));
    Ok(())
}

/// `evobt seed <config>`: prompt, generate, validate, gate; write the
/// accepted trees as `.bt` files plus the attempt log.
pub fn cmd_seed(config_path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut config);
    if config.seeding.mode == SeedMode::None {
        return Err(CliError::Config("seeding.mode must be llm or replay".to_string()));
    }
    let eval_cfg = config.eval_config()?;
    let theta = resolve_theta(&config, &eval_cfg)?;
    let (candidates, mut log) = seed_candidates(&config, &eval_cfg)?;
    // one evaluation per candidate feeds both the gate and the log
    let mut reports = Vec::with_capacity(candidates.len());
    for tree in &candidates {
        reports.push(evaluate(tree, &eval_cfg, config.master_seed).map_err(|e| CliError::Failure(e.to_string()))?);
    }
    let verdicts: Vec<(f64, bool)> = reports.iter().map(|r| (r.mean_j, r.mean_j >= theta)).collect();
    let mut report_iter = reports.into_iter();
    let gated = gate_seeds(
        &candidates,
        |tree| -> Result<Individual, CliError> {
            let report = report_iter.next().expect("one report per candidate");
            Ok(Individual { tree: tree.clone(), key: serialize(tree), report })
        },
        theta,
    )?;

    let mut verdict_iter = verdicts.into_iter();
    for attempt in log.attempts.iter_mut().filter(|a| a.valid) {
        if let Some((mean_j, accepted)) = verdict_iter.next() {
            attempt.gate_mean_j = Some(mean_j);
            attempt.gate_accepted = Some(accepted);
        }
    }

    fs::create_dir_all(&config.output_dir)?;
    for (i, individual) in gated.iter().enumerate() {
        let path = config.output_dir.join(format!("seed_{:03}.bt", i));
        fs::write(path, format!("{}\n", individual.key))?;
    }
    log.write_jsonl(&config.output_dir.join("seed_log.jsonl"))?;
    println!(
        "attempts={} valid={} gated_in={} (theta={}) -> {}",
        log.attempts.len(),
        log.attempts.iter().filter(|a| a.valid).count(),
        gated.len(),
        fmt_float(theta),
        config.output_dir.display()
    );
    Ok(())
}

/// `evobt compare <config>...`: run each config, emit one long-format
/// CSV of all traces, print per-method medians.
pub fn cmd_compare(config_paths: &[PathBuf], overrides: &Overrides) -> Result<(), CliError> {
    if config_paths.len() < 2 {
        return Err(CliError::Usage("compare needs at least two configs".to_string()));
    }
    let mut results = Vec::new();
    let mut output_dir = None;
    for path in config_paths {
        let mut config = ExperimentConfig::load(path)?;
        overrides.apply(&mut config);
        output_dir.get_or_insert_with(|| config.output_dir.clone());
        results.push(run_experiment(&config)?);
    }
    let output_dir = overrides
        .output_dir
        .clone()
        .or(output_dir)
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&output_dir)?;
    let mut out = String::from("method,run_id,episode,best_J\n");
    for result in &results {
        for run in &result.runs {
            for row in &run.trace.rows {
                writeln!(out, "{},{},{},{}", result.label, run.run_id, row.episode, fmt_float(row.best_j))
                    .expect("write to string");
            }
        }
    }
    fs::write(output_dir.join("compare.csv"), out)?;
    for result in &results {
        let median = median_episodes(&result.episodes_to_target())
            .map(|m| fmt_float(m))
            .unwrap_or_else(|| "n/a".to_string());
        println!("{}: median episodes to J>={}: {}", result.label, fmt_float(result.target_j), median);
    }
    println!("wrote {}", output_dir.join("compare.csv").display());
    Ok(())
}

/// `evobt validate <file>`: parse and validate, print the report.
pub fn cmd_validate(tree_path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(tree_path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", tree_path.display())))?;
    let tree = parse(&text).map_err(|e| CliError::Validation(format!("parse error: {e}")))?;
    let registry = Scenario::scenario1().registry();
    let report = validate(&tree, &registry);
    for violation in &report.violations {
        println!("{violation}");
    }
    if report.is_valid() {
        println!("{}: contextually valid ({} nodes)", tree_path.display(), tree.node_count());
        Ok(())
    } else {
        Err(CliError::Validation(format!("{} error(s)", report.error_count())))
    }
}
