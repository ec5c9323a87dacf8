//! Episode execution and fitness scoring.
//!
//! An episode initializes a fresh world and re-ticks the tree's root
//! until the task is done, a root-tick cap is hit, or the simulated
//! clock reaches the time cap. The terminal measurements are scored as
//!
//! ```text
//! J = R - (a1*d_cube_goal^2 + a2*d_robot_cube^2 + a3*loc_err^2 + beta*b + gamma*T + delta*P)
//! ```
//!
//! with `R` the pick/place rewards granted once per episode, `b` the
//! node count, `T` the simulated execution time, and `P` the per-rollout
//! not-placed indicator. Stochastic regimes average several rollouts
//! whose random streams derive deterministically from the master seed,
//! the tree's canonical serialization, and the rollout index, so
//! evaluation is a pure function of its inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bt::{BTNode, SkillRegistry, Status, TickError, WorldPort};
use crate::sim::{ActionTiming, FailureProfile, Scenario, World, WorldState};
use crate::text::serialize;

/// Weights of the fitness function; defaults are the experiment values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitnessWeights {
    pub pick_reward: f64,
    pub place_reward: f64,
    /// Cube-goal distance weight (per m^2).
    pub alpha1: f64,
    /// Robot-cube distance weight (per m^2).
    pub alpha2: f64,
    /// Localization error weight.
    pub alpha3: f64,
    /// Node-count weight (per node).
    pub beta: f64,
    /// Execution-time weight (per s).
    pub gamma: f64,
    /// Failure-probability weight.
    pub delta: f64,
}

impl Default for FitnessWeights {
    fn default() -> FitnessWeights {
        FitnessWeights {
            pick_reward: 50.0,
            place_reward: 100.0,
            alpha1: 10.0,
            alpha2: 2.0,
            alpha3: 1.0,
            beta: 0.5,
            gamma: 0.1,
            delta: 0.0,
        }
    }
}

/// Caps that keep episodes finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeLimits {
    pub max_root_ticks: u32,
    pub time_cap: f64,
}

impl Default for EpisodeLimits {
    fn default() -> EpisodeLimits {
        EpisodeLimits { max_root_ticks: 20, time_cap: 300.0 }
    }
}

/// Terminal measurements of one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeOutcome {
    pub picked: bool,
    pub placed: bool,
    pub d_cube_goal: f64,
    pub d_robot_cube: f64,
    pub loc_err: f64,
    pub node_count: usize,
    pub exec_time: f64,
    pub root_ticks_used: u32,
}

/// Aggregated fitness over the rollouts of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitnessReport {
    pub mean_j: f64,
    pub per_rollout_j: Vec<f64>,
    /// Fraction of rollouts that did not place the cube.
    pub failure_fraction: f64,
    pub rollouts: u32,
    /// Simulated seconds consumed by all rollouts of this evaluation.
    pub total_exec_time: f64,
}

/// Everything an evaluation needs besides the tree and the master seed.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub scenario: Scenario,
    pub profile: FailureProfile,
    pub limits: EpisodeLimits,
    pub weights: FitnessWeights,
    pub timing: ActionTiming,
    pub registry: SkillRegistry,
    /// Rollouts per evaluation in stochastic regimes; deterministic
    /// profiles always use a single rollout.
    pub rollouts: u32,
}

impl EvalConfig {
    pub fn new(scenario: Scenario, profile: FailureProfile) -> EvalConfig {
        let registry = scenario.registry();
        EvalConfig {
            scenario,
            profile,
            limits: EpisodeLimits::default(),
            weights: FitnessWeights::default(),
            timing: ActionTiming::default(),
            registry,
            rollouts: 5,
        }
    }

    pub fn effective_rollouts(&self) -> u32 {
        if self.profile.is_deterministic() {
            1
        } else {
            self.rollouts.max(1)
        }
    }
}

/// One executed leaf in a transcript, with the state fields it changed.
#[derive(Debug, Clone)]
pub struct TranscriptRow {
    pub step: usize,
    pub root_tick: u32,
    pub leaf: String,
    pub status: Status,
    pub clock: f64,
    pub delta: String,
}

struct Recorder<'w, 'a> {
    world: &'w mut World<'a>,
    rows: &'w mut Vec<TranscriptRow>,
    root_tick: u32,
}

fn describe_delta(before: &WorldState, after: &WorldState) -> String {
    let mut parts = Vec::new();
    if before.robot_pos != after.robot_pos {
        parts.push(format!("robot_pos {} -> {}", before.robot_pos, after.robot_pos));
    }
    if before.localized != after.localized {
        parts.push(format!("localized {} -> {}", before.localized, after.localized));
    }
    if before.head != after.head {
        parts.push(format!("head {:?} -> {:?}", before.head, after.head));
    }
    if before.tucked != after.tucked {
        parts.push(format!("tucked {} -> {}", before.tucked, after.tucked));
    }
    if before.cube_at != after.cube_at {
        parts.push(format!("cube_at {} -> {}", before.cube_at, after.cube_at));
    }
    if before.placed_ever != after.placed_ever {
        parts.push("placed".to_string());
    }
    if parts.is_empty() {
        "no change".to_string()
    } else {
        parts.join("; ")
    }
}

impl WorldPort for Recorder<'_, '_> {
    fn exec_action(&mut self, skill: &str, param: Option<&str>) -> Result<Status, TickError> {
        let before = self.world.state.clone();
        let status = self.world.exec_action(skill, param)?;
        let leaf = match param {
            Some(p) => format!("(act {skill} {p})"),
            None => format!("(act {skill})"),
        };
        self.rows.push(TranscriptRow {
            step: self.rows.len() + 1,
            root_tick: self.root_tick,
            leaf,
            status,
            clock: self.world.clock(),
            delta: describe_delta(&before, &self.world.state),
        });
        Ok(status)
    }

    fn eval_condition(&mut self, check: &str, param: Option<&str>) -> Result<Status, TickError> {
        let status = self.world.eval_condition(check, param)?;
        let leaf = match param {
            Some(p) => format!("(cond {check} {p})"),
            None => format!("(cond {check})"),
        };
        self.rows.push(TranscriptRow {
            step: self.rows.len() + 1,
            root_tick: self.root_tick,
            leaf,
            status,
            clock: self.world.clock(),
            delta: String::new(),
        });
        Ok(status)
    }
}

/// Runs one rollout: init, repeated root ticks, terminal measurement.
pub fn run_episode(tree: &BTNode, cfg: &EvalConfig, rng: ChaCha8Rng) -> Result<EpisodeOutcome, TickError> {
    run_rollout(tree, cfg, rng, None)
}

/// Like [`run_episode`] but records every executed leaf.
pub fn run_episode_traced(
    tree: &BTNode,
    cfg: &EvalConfig,
    rng: ChaCha8Rng,
) -> Result<(EpisodeOutcome, Vec<TranscriptRow>), TickError> {
    let mut rows = Vec::new();
    let outcome = run_rollout(tree, cfg, rng, Some(&mut rows))?;
    Ok((outcome, rows))
}

fn run_rollout(
    tree: &BTNode,
    cfg: &EvalConfig,
    rng: ChaCha8Rng,
    mut transcript: Option<&mut Vec<TranscriptRow>>,
) -> Result<EpisodeOutcome, TickError> {
    let mut world = World::new(&cfg.scenario, &cfg.profile, &cfg.timing, &cfg.registry, rng);
    world.set_time_cap(cfg.limits.time_cap);
    let mut ticks = 0u32;
    while ticks < cfg.limits.max_root_ticks {
        match transcript.as_deref_mut() {
            Some(rows) => {
                let mut recorder = Recorder { world: &mut world, rows, root_tick: ticks + 1 };
                tree.tick(&mut recorder)?;
            }
            None => {
                tree.tick(&mut world)?;
            }
        }
        ticks += 1;
        if world.task_done() || world.clock() >= cfg.limits.time_cap {
            break;
        }
    }
    let m = world.metrics();
    Ok(EpisodeOutcome {
        picked: world.state.picked_ever,
        placed: world.state.placed_ever,
        d_cube_goal: m.d_cube_goal,
        d_robot_cube: m.d_robot_cube,
        loc_err: m.loc_err,
        node_count: tree.node_count(),
        exec_time: world.clock(),
        root_ticks_used: ticks,
    })
}

/// The fitness function applied to one rollout's measurements.
pub fn score(outcome: &EpisodeOutcome, weights: &FitnessWeights) -> f64 {
    let reward = if outcome.picked { weights.pick_reward } else { 0.0 }
        + if outcome.placed { weights.place_reward } else { 0.0 };
    let p_rollout = if outcome.placed { 0.0 } else { 1.0 };
    reward
        - (weights.alpha1 * outcome.d_cube_goal.powi(2)
            + weights.alpha2 * outcome.d_robot_cube.powi(2)
            + weights.alpha3 * outcome.loc_err.powi(2)
            + weights.beta * outcome.node_count as f64
            + weights.gamma * outcome.exec_time
            + weights.delta * p_rollout)
}

// FNV-1a over the rollout identity, finished with a splitmix64 round so
// close seeds land far apart.
fn derive_stream_seed(master_seed: u64, key: &str, rollout: u32) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in master_seed.to_le_bytes() {
        eat(b);
    }
    for b in key.as_bytes() {
        eat(*b);
    }
    for b in rollout.to_le_bytes() {
        eat(b);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The random stream of one rollout of one tree under one master seed.
pub fn rollout_rng(master_seed: u64, key: &str, rollout: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_stream_seed(master_seed, key, rollout))
}

/// Scores a tree: K independent rollouts (one under a deterministic
/// profile), each scored, averaged into a report.
pub fn evaluate(tree: &BTNode, cfg: &EvalConfig, master_seed: u64) -> Result<FitnessReport, TickError> {
    let key = serialize(tree);
    evaluate_keyed(tree, &key, cfg, master_seed)
}

/// [`evaluate`] for callers that already hold the canonical key.
pub fn evaluate_keyed(
    tree: &BTNode,
    key: &str,
    cfg: &EvalConfig,
    master_seed: u64,
) -> Result<FitnessReport, TickError> {
    let rollouts = cfg.effective_rollouts();
    let mut per_rollout_j = Vec::with_capacity(rollouts as usize);
    let mut failures = 0u32;
    let mut total_exec_time = 0.0;
    for rollout in 0..rollouts {
        let rng = rollout_rng(master_seed, key, rollout);
        let outcome = run_episode(tree, cfg, rng)?;
        if !outcome.placed {
            failures += 1;
        }
        total_exec_time += outcome.exec_time;
        per_rollout_j.push(score(&outcome, &cfg.weights));
    }
    let mean_j = per_rollout_j.iter().sum::<f64>() / rollouts as f64;
    Ok(FitnessReport {
        mean_j,
        per_rollout_j,
        failure_fraction: failures as f64 / rollouts as f64,
        rollouts,
        total_exec_time,
    })
}

/// The hand-written reference solution for scenario-1.
pub fn reference_tree() -> BTNode {
    crate::text::parse(
        "(seq (act localise) (act move_to table1) (act head_down) (act pick) \
         (act tuck) (act move_to goal) (act place))",
    )
    .expect("reference tree parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bt::BTNode;
    use crate::sim::{FailureProfile, Scenario};
    use proptest::prelude::*;

    fn det_cfg() -> EvalConfig {
        EvalConfig::new(Scenario::scenario1(), FailureProfile::det())
    }

    #[test]
    fn empty_sequence_episode_measures_the_initial_state() {
        let cfg = det_cfg();
        let outcome = run_episode(&BTNode::Sequence(vec![]), &cfg, rollout_rng(0, "(seq)", 0)).unwrap();
        assert!(!outcome.picked && !outcome.placed);
        assert_eq!(outcome.exec_time, 0.0);
        assert!((outcome.d_cube_goal - 20f64.sqrt()).abs() < 1e-12);
        assert_eq!(outcome.root_ticks_used, cfg.limits.max_root_ticks);
    }

    #[test]
    fn reference_tree_places_in_one_root_tick() {
        let cfg = det_cfg();
        let outcome = run_episode(&reference_tree(), &cfg, rollout_rng(0, "ref", 0)).unwrap();
        assert!(outcome.placed);
        assert_eq!(outcome.root_ticks_used, 1);
        assert!((outcome.exec_time - 32.601).abs() <= 1e-3);
        assert_eq!(outcome.node_count, 8);
    }

    #[test]
    fn episodes_are_replay_identical() {
        let cfg = EvalConfig::new(Scenario::scenario1(), FailureProfile::stoch3());
        let tree = reference_tree();
        let a = run_episode(&tree, &cfg, rollout_rng(7, "k", 3)).unwrap();
        let b = run_episode(&tree, &cfg, rollout_rng(7, "k", 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_matches_hand_computed_example() {
        let outcome = EpisodeOutcome {
            picked: true,
            placed: true,
            d_cube_goal: 0.0,
            d_robot_cube: 0.5,
            loc_err: 0.0,
            node_count: 8,
            exec_time: 30.0,
            root_ticks_used: 1,
        };
        let j = score(&outcome, &FitnessWeights::default());
        assert!((j - 142.5).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_score_zero() {
        let weights = FitnessWeights {
            pick_reward: 0.0,
            place_reward: 0.0,
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        };
        let outcome = EpisodeOutcome {
            picked: false,
            placed: false,
            d_cube_goal: 4.0,
            d_robot_cube: 2.0,
            loc_err: 1.0,
            node_count: 12,
            exec_time: 55.0,
            root_ticks_used: 9,
        };
        assert_eq!(score(&outcome, &weights), 0.0);
    }

    #[test]
    fn empty_tree_scores_the_textbook_value() {
        let cfg = det_cfg();
        let report = evaluate(&BTNode::Sequence(vec![]), &cfg, 0).unwrap();
        assert!((report.mean_j - (-217.5)).abs() < 1e-9);
        assert_eq!(report.failure_fraction, 1.0);
    }

    #[test]
    fn reference_tree_scores_near_its_derived_value() {
        let cfg = det_cfg();
        let report = evaluate(&reference_tree(), &cfg, 0).unwrap();
        let expected = 150.0 - (0.5 * 8.0 + 0.1 * (5.0 + 8f64.sqrt() / 0.5 + 2.0 + 4.0 + 3.0 + 20f64.sqrt() / 0.5 + 4.0));
        assert!((report.mean_j - expected).abs() < 1e-9);
        assert!((report.mean_j - 142.74).abs() <= 0.05);
    }

    #[test]
    fn deterministic_profile_collapses_rollouts() {
        let mut cfg = det_cfg();
        cfg.rollouts = 7;
        let report = evaluate(&reference_tree(), &cfg, 1).unwrap();
        assert_eq!(report.rollouts, 1);
        assert_eq!(report.per_rollout_j.len(), 1);
    }

    #[test]
    fn stochastic_evaluation_is_derived_stream_deterministic() {
        let mut cfg = EvalConfig::new(Scenario::scenario1(), FailureProfile::stoch1());
        cfg.rollouts = 5;
        let a = evaluate(&reference_tree(), &cfg, 99).unwrap();
        let b = evaluate(&reference_tree(), &cfg, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rollouts, 5);
    }

    #[test]
    fn stoch3_mean_is_below_the_deterministic_score() {
        let det = evaluate(&reference_tree(), &det_cfg(), 5).unwrap();
        let mut cfg = EvalConfig::new(Scenario::scenario1(), FailureProfile::stoch3());
        cfg.rollouts = 200;
        let stoch = evaluate(&reference_tree(), &cfg, 5).unwrap();
        assert!(stoch.mean_j < det.mean_j, "stoch {} vs det {}", stoch.mean_j, det.mean_j);
    }

    #[test]
    fn wrapping_in_a_one_child_sequence_costs_exactly_beta() {
        let cfg = det_cfg();
        let tree = reference_tree();
        let wrapped = BTNode::Sequence(vec![tree.clone()]);
        let j = evaluate(&tree, &cfg, 0).unwrap().mean_j;
        let j_wrapped = evaluate(&wrapped, &cfg, 0).unwrap().mean_j;
        assert!((j - j_wrapped - cfg.weights.beta).abs() < 1e-12);
    }

    #[test]
    fn score_is_linear_in_each_weight() {
        let outcome = EpisodeOutcome {
            picked: true,
            placed: false,
            d_cube_goal: 3.0,
            d_robot_cube: 1.5,
            loc_err: 1.0,
            node_count: 9,
            exec_time: 40.0,
            root_ticks_used: 6,
        };
        let base = FitnessWeights::default();
        // bumping one weight by h moves J by -h * (term value)
        let terms: [(fn(&mut FitnessWeights) -> &mut f64, f64); 6] = [
            (|w| &mut w.alpha1, 9.0),
            (|w| &mut w.alpha2, 2.25),
            (|w| &mut w.alpha3, 1.0),
            (|w| &mut w.beta, 9.0),
            (|w| &mut w.gamma, 40.0),
            (|w| &mut w.delta, 1.0),
        ];
        let h = 0.25;
        for (field, term_value) in terms {
            let mut bumped = base;
            *field(&mut bumped) += h;
            let dj = score(&outcome, &bumped) - score(&outcome, &base);
            assert!((dj + h * term_value).abs() < 1e-9, "dj {dj} for term {term_value}");
        }
    }

    #[test]
    fn mean_matches_independent_recomputation() {
        let mut cfg = EvalConfig::new(Scenario::scenario1(), FailureProfile::stoch2());
        cfg.rollouts = 16;
        let tree = reference_tree();
        let report = evaluate(&tree, &cfg, 123).unwrap();
        let key = crate::text::serialize(&tree);
        let mut sum = 0.0;
        for rollout in 0..report.rollouts {
            let outcome = run_episode(&tree, &cfg, rollout_rng(123, &key, rollout)).unwrap();
            sum += score(&outcome, &cfg.weights);
        }
        assert!((report.mean_j - sum / report.rollouts as f64).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn j_is_bounded_by_total_reward(seed in any::<u64>(), depth in 1usize..4) {
            let cfg = det_cfg();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tree = crate::bt::random_tree(&mut rng, &cfg.registry, depth);
            let report = evaluate(&tree, &cfg, seed).unwrap();
            prop_assert!(report.mean_j <= cfg.weights.pick_reward + cfg.weights.place_reward + 1e-12);
        }
    }
}
