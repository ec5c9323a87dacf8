//! Genetic programming over behavior trees.
//!
//! Generational loop with tournament selection, subtree crossover, three
//! mutation operators (label mutation, leaf addition, subtree deletion),
//! and elitism. The search is budgeted in episodes: every evaluation of
//! a previously unseen canonical key counts one episode and appends a
//! trace row, so the trace is exactly the "number of all generated BTs"
//! axis. Seed candidates pass a fitness gate before they join the
//! initial population; shortfall is topped up with random trees.
//!
//! Ordering everywhere (selection winners, elites, best-so-far) is the
//! total order: higher mean fitness, then fewer nodes, then
//! lexicographically smaller canonical key. That makes whole runs
//! reproducible from one master seed.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bt::{random_leaf, random_tree_with, BTNode, SkillRegistry, TickError, TreeGen};
use crate::fitness::{evaluate_keyed, EvalConfig, FitnessReport};
use crate::text::serialize;

/// Shares of the three mutation operators; they sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationSplit {
    pub node_mutation: f64,
    pub node_addition: f64,
    pub node_deletion: f64,
}

impl Default for MutationSplit {
    fn default() -> MutationSplit {
        MutationSplit { node_mutation: 0.30, node_addition: 0.40, node_deletion: 0.30 }
    }
}

/// Evolution parameters. Defaults are the experiment values: population
/// 30, 8000-episode budget, 40/60 crossover/mutation, 10% elitism,
/// 30/40/30 mutation split, tournament size 3.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GPConfig {
    pub population_size: usize,
    /// Unique-evaluation budget; the run stops when it is spent.
    pub episode_budget: u64,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub elitism_fraction: f64,
    pub mutation_split: MutationSplit,
    pub tournament_size: usize,
    /// Structural caps; offspring beyond them are retried.
    pub max_nodes: usize,
    pub max_depth: usize,
    pub allow_parallel: bool,
    /// Depth bound for randomly generated initial trees.
    pub init_max_depth: usize,
    /// Stop early once the best fitness reaches this value.
    pub target_j: Option<f64>,
    /// Optional hard cap on generations.
    pub max_generations: Option<u64>,
}

impl Default for GPConfig {
    fn default() -> GPConfig {
        GPConfig {
            population_size: 30,
            episode_budget: 8000,
            crossover_prob: 0.40,
            mutation_prob: 0.60,
            elitism_fraction: 0.10,
            mutation_split: MutationSplit::default(),
            tournament_size: 3,
            max_nodes: 25,
            max_depth: 7,
            allow_parallel: false,
            init_max_depth: 3,
            target_j: None,
            max_generations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("population_size must be at least 2, got {0}")]
    PopulationTooSmall(usize),
    #[error("crossover_prob + mutation_prob must equal 1, got {0}")]
    OperatorProbs(f64),
    #[error("mutation_split must sum to 1, got {0}")]
    MutationSplit(f64),
    #[error("tournament_size must be at least 2, got {0}")]
    TournamentTooSmall(usize),
    #[error("elitism_fraction must lie in [0, 1], got {0}")]
    Elitism(f64),
    #[error("{0}")]
    Invalid(String),
}

impl GPConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.population_size < 2 {
            return Err(ConfigError::PopulationTooSmall(self.population_size));
        }
        let op_sum = self.crossover_prob + self.mutation_prob;
        if (op_sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::OperatorProbs(op_sum));
        }
        let split = &self.mutation_split;
        let split_sum = split.node_mutation + split.node_addition + split.node_deletion;
        if (split_sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::MutationSplit(split_sum));
        }
        if self.tournament_size < 2 {
            return Err(ConfigError::TournamentTooSmall(self.tournament_size));
        }
        if !(0.0..=1.0).contains(&self.elitism_fraction) {
            return Err(ConfigError::Elitism(self.elitism_fraction));
        }
        if self.max_nodes == 0 || self.max_depth == 0 || self.init_max_depth == 0 {
            return Err(ConfigError::Invalid("structural caps must be positive".to_string()));
        }
        if self.episode_budget == 0 {
            return Err(ConfigError::Invalid("episode_budget must be positive".to_string()));
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        // guard the product against float fuzz so 0.1 * 30 stays 3
        let raw = self.elitism_fraction * self.population_size as f64;
        (raw - 1e-9).ceil().max(0.0) as usize
    }

    fn tree_gen(&self, max_depth: usize) -> TreeGen {
        let mut gen = TreeGen::new(max_depth);
        gen.allow_parallel = self.allow_parallel;
        gen
    }

    fn within_caps(&self, tree: &BTNode) -> bool {
        tree.node_count() <= self.max_nodes && tree.depth() <= self.max_depth
    }
}

/// A scored genome: the tree, its fitness report, and the canonical
/// serialization used for deduplication and caching.
#[derive(Debug, Clone)]
pub struct Individual {
    pub tree: BTNode,
    pub report: FitnessReport,
    pub key: String,
}

impl Individual {
    pub fn mean_j(&self) -> f64 {
        self.report.mean_j
    }

    pub fn node_count(&self) -> usize {
        self.tree.node_count()
    }
}

/// Total order used for selection, elites, and best-so-far: higher mean
/// fitness first, ties broken by fewer nodes, then smaller key.
pub fn rank(a: &Individual, b: &Individual) -> Ordering {
    b.mean_j()
        .total_cmp(&a.mean_j())
        .then_with(|| a.node_count().cmp(&b.node_count()))
        .then_with(|| a.key.cmp(&b.key))
}

/// One best-so-far observation per episode (unique evaluation).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub episode: u64,
    pub best_j: f64,
    pub best_key: String,
    pub best_nodes: usize,
    pub generation: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvolutionTrace {
    pub rows: Vec<TraceRow>,
    /// Simulated seconds consumed by all unique evaluations of the run.
    pub sim_seconds: f64,
}

impl EvolutionTrace {
    /// First episode whose best fitness reached `target`, if any.
    pub fn episodes_to(&self, target: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.best_j >= target).map(|r| r.episode)
    }

    pub fn best_j(&self) -> Option<f64> {
        self.rows.last().map(|r| r.best_j)
    }
}

#[derive(Debug, Error)]
pub enum GpError {
    #[error("selection over an empty population")]
    EmptyPopulation,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tick(#[from] TickError),
}

/// Seed candidates plus the acceptance-fitness threshold they must meet.
#[derive(Debug, Clone)]
pub struct SeedingPlan {
    pub candidates: Vec<BTNode>,
    pub theta: f64,
}

/// Samples `k` individuals uniformly with replacement and returns the
/// best by [`rank`].
pub fn tournament_select<'p, R: Rng + ?Sized>(
    population: &'p [Individual],
    k: usize,
    rng: &mut R,
) -> Result<&'p Individual, GpError> {
    if population.is_empty() {
        return Err(GpError::EmptyPopulation);
    }
    let mut best: Option<&Individual> = None;
    for _ in 0..k.max(1) {
        let candidate = &population[rng.random_range(0..population.len())];
        best = Some(match best {
            None => candidate,
            Some(current) if rank(candidate, current) == Ordering::Less => candidate,
            Some(current) => current,
        });
    }
    Ok(best.expect("k >= 1"))
}

fn node_paths(tree: &BTNode) -> Vec<Vec<usize>> {
    let mut paths = Vec::with_capacity(tree.node_count());
    fn walk(node: &BTNode, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(path.clone());
        for (i, child) in node.children().iter().enumerate() {
            path.push(i);
            walk(child, path, out);
            path.pop();
        }
    }
    walk(tree, &mut Vec::new(), &mut paths);
    paths
}

fn subtree_at<'t>(tree: &'t BTNode, path: &[usize]) -> &'t BTNode {
    path.iter().fold(tree, |node, &i| &node.children()[i])
}

fn subtree_at_mut<'t>(tree: &'t mut BTNode, path: &[usize]) -> &'t mut BTNode {
    path.iter().fold(tree, |node, &i| {
        &mut node.children_mut().expect("path points through control nodes")[i]
    })
}

fn replace_subtree(tree: &BTNode, path: &[usize], replacement: BTNode) -> BTNode {
    let mut out = tree.clone();
    *subtree_at_mut(&mut out, path) = replacement;
    out
}

/// Swaps uniformly chosen subtrees between two parents. Offspring outside
/// the structural caps trigger fresh cut points, up to ten attempts; on
/// exhaustion the parents come back unchanged.
pub fn crossover<R: Rng + ?Sized>(
    parent_a: &BTNode,
    parent_b: &BTNode,
    cfg: &GPConfig,
    rng: &mut R,
) -> (BTNode, BTNode) {
    let paths_a = node_paths(parent_a);
    let paths_b = node_paths(parent_b);
    for _ in 0..10 {
        let cut_a = &paths_a[rng.random_range(0..paths_a.len())];
        let cut_b = &paths_b[rng.random_range(0..paths_b.len())];
        let sub_a = subtree_at(parent_a, cut_a).clone();
        let sub_b = subtree_at(parent_b, cut_b).clone();
        let child_a = replace_subtree(parent_a, cut_a, sub_b);
        let child_b = replace_subtree(parent_b, cut_b, sub_a);
        if cfg.within_caps(&child_a) && cfg.within_caps(&child_b) {
            return (child_a, child_b);
        }
    }
    (parent_a.clone(), parent_b.clone())
}

enum MutationKind {
    NodeMutation,
    NodeAddition,
    NodeDeletion,
}

fn draw_mutation_kind<R: Rng + ?Sized>(split: &MutationSplit, rng: &mut R) -> MutationKind {
    let r = rng.random::<f64>();
    if r < split.node_mutation {
        MutationKind::NodeMutation
    } else if r < split.node_mutation + split.node_addition {
        MutationKind::NodeAddition
    } else {
        MutationKind::NodeDeletion
    }
}

/// Applies one mutation drawn from the configured split. Cap violations
/// retry with fresh randomness, up to ten attempts, then return the tree
/// unchanged.
pub fn mutate<R: Rng + ?Sized>(
    tree: &BTNode,
    cfg: &GPConfig,
    registry: &SkillRegistry,
    rng: &mut R,
) -> BTNode {
    let leaves = registry.expanded_leaves();
    for _ in 0..10 {
        let candidate = match draw_mutation_kind(&cfg.mutation_split, rng) {
            MutationKind::NodeMutation => mutate_label(tree, cfg, &leaves, rng),
            MutationKind::NodeAddition => add_leaf(tree, cfg, &leaves, rng),
            MutationKind::NodeDeletion => delete_subtree(tree, &leaves, rng),
        };
        if cfg.within_caps(&candidate) {
            return candidate;
        }
    }
    tree.clone()
}

/// Replaces one uniformly chosen node's label in kind: a leaf becomes a
/// uniformly different registered leaf, a control node becomes another
/// control kind over the same children.
fn mutate_label<R: Rng + ?Sized>(tree: &BTNode, cfg: &GPConfig, leaves: &[BTNode], rng: &mut R) -> BTNode {
    let paths = node_paths(tree);
    let path = &paths[rng.random_range(0..paths.len())];
    let target = subtree_at(tree, path);
    let replacement = if target.is_leaf() {
        let mut pick = random_leaf(rng, leaves);
        for _ in 0..32 {
            if &pick != target {
                break;
            }
            pick = random_leaf(rng, leaves);
        }
        pick
    } else {
        let children = target.children().to_vec();
        let mut kinds: Vec<u8> = Vec::new();
        if !matches!(target, BTNode::Sequence(_)) {
            kinds.push(0);
        }
        if !matches!(target, BTNode::Fallback(_)) {
            kinds.push(1);
        }
        if cfg.allow_parallel && !matches!(target, BTNode::Parallel { .. }) && !children.is_empty() {
            kinds.push(2);
        }
        match kinds[rng.random_range(0..kinds.len())] {
            0 => BTNode::Sequence(children),
            1 => BTNode::Fallback(children),
            _ => {
                let threshold = rng.random_range(1..=children.len());
                BTNode::Parallel { threshold, children }
            }
        }
    };
    replace_subtree(tree, path, replacement)
}

/// Inserts a fresh random leaf at a uniform position under a uniformly
/// chosen control node; a bare leaf is first wrapped in a random control
/// node.
fn add_leaf<R: Rng + ?Sized>(tree: &BTNode, cfg: &GPConfig, leaves: &[BTNode], rng: &mut R) -> BTNode {
    let mut out = tree.clone();
    if out.is_leaf() {
        let child = out;
        out = if cfg.allow_parallel && rng.random_range(0..3) == 2 {
            BTNode::Parallel { threshold: 1, children: vec![child] }
        } else if rng.random::<bool>() {
            BTNode::Fallback(vec![child])
        } else {
            BTNode::Sequence(vec![child])
        };
    }
    let control_paths: Vec<Vec<usize>> = node_paths(&out)
        .into_iter()
        .filter(|p| subtree_at(&out, p).is_control())
        .collect();
    let path = &control_paths[rng.random_range(0..control_paths.len())];
    let leaf = random_leaf(rng, leaves);
    let children = subtree_at_mut(&mut out, path).children_mut().expect("control node");
    let slot = rng.random_range(0..=children.len());
    children.insert(slot, leaf);
    out
}

/// Removes the subtree rooted at a uniformly chosen non-root node; a
/// control node emptied this way collapses into a fresh random leaf.
fn delete_subtree<R: Rng + ?Sized>(tree: &BTNode, leaves: &[BTNode], rng: &mut R) -> BTNode {
    let paths: Vec<Vec<usize>> = node_paths(tree).into_iter().filter(|p| !p.is_empty()).collect();
    if paths.is_empty() {
        return tree.clone();
    }
    let path = &paths[rng.random_range(0..paths.len())];
    let mut out = tree.clone();
    let (parent_path, index) = path.split_at(path.len() - 1);
    let parent = subtree_at_mut(&mut out, parent_path);
    parent.children_mut().expect("parent of a node is a control node").remove(index[0]);
    if parent.children().is_empty() {
        let replacement = random_leaf(rng, leaves);
        *parent = replacement;
    }
    out
}

/// Evaluates candidates in order and keeps those whose mean fitness
/// meets the threshold.
pub fn gate_seeds<F, E>(candidates: &[BTNode], mut evaluator: F, theta: f64) -> Result<Vec<Individual>, E>
where
    F: FnMut(&BTNode) -> Result<Individual, E>,
{
    let mut accepted = Vec::new();
    for candidate in candidates {
        let individual = evaluator(candidate)?;
        if individual.mean_j() >= theta {
            accepted.push(individual);
        }
    }
    Ok(accepted)
}

/// Budget/trace bookkeeping shared by seeding and the generational loop.
struct Evaluator<'a> {
    eval_cfg: &'a EvalConfig,
    master_seed: u64,
    budget: u64,
    episodes: u64,
    generation: u64,
    cache: HashMap<String, FitnessReport>,
    trace: EvolutionTrace,
    best: Option<Individual>,
}

enum Evaluated {
    Done(Individual),
    BudgetExhausted,
}

impl Evaluator<'_> {
    /// Evaluates a tree, counting an episode and appending a trace row
    /// only for previously unseen canonical keys. Evaluation is a pure
    /// function of (master seed, key), so cached reports are identical
    /// to re-runs in every regime.
    fn evaluate(&mut self, tree: &BTNode) -> Result<Evaluated, GpError> {
        let key = serialize(tree);
        if let Some(report) = self.cache.get(&key) {
            return Ok(Evaluated::Done(Individual { tree: tree.clone(), report: report.clone(), key }));
        }
        if self.episodes >= self.budget {
            return Ok(Evaluated::BudgetExhausted);
        }
        let report = evaluate_keyed(tree, &key, self.eval_cfg, self.master_seed)?;
        self.episodes += 1;
        self.trace.sim_seconds += report.total_exec_time;
        let individual = Individual { tree: tree.clone(), report: report.clone(), key: key.clone() };
        let is_new_best = match &self.best {
            None => true,
            Some(best) => rank(&individual, best) == Ordering::Less,
        };
        if is_new_best {
            self.best = Some(individual.clone());
        }
        let best = self.best.as_ref().expect("best set above");
        self.trace.rows.push(TraceRow {
            episode: self.episodes,
            best_j: best.mean_j(),
            best_key: best.key.clone(),
            best_nodes: best.node_count(),
            generation: self.generation,
        });
        self.cache.insert(key, report);
        Ok(Evaluated::Done(individual))
    }

    fn target_reached(&self, target: Option<f64>) -> bool {
        match (target, &self.best) {
            (Some(t), Some(best)) => best.mean_j() >= t,
            _ => false,
        }
    }
}

/// Runs one evolution. The initial population is the gated seeds (if
/// any) topped up with random trees; generations then produce elites
/// plus crossover/mutation offspring until the episode budget is spent,
/// the target fitness is reached, or the optional generation cap hits.
/// Returns the best individual ever evaluated and the full trace.
pub fn evolve(
    cfg: &GPConfig,
    eval_cfg: &EvalConfig,
    seeding: Option<&SeedingPlan>,
    master_seed: u64,
) -> Result<(Individual, EvolutionTrace), GpError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut ev = Evaluator {
        eval_cfg,
        master_seed,
        budget: cfg.episode_budget,
        episodes: 0,
        generation: 0,
        cache: HashMap::new(),
        trace: EvolutionTrace::default(),
        best: None,
    };

    let mut population: Vec<Individual> = Vec::with_capacity(cfg.population_size);
    let mut exhausted = false;

    if let Some(plan) = seeding {
        for candidate in &plan.candidates {
            if population.len() >= cfg.population_size {
                break;
            }
            if !cfg.within_caps(candidate) {
                continue; // seeds must obey the same structural caps as offspring
            }
            match ev.evaluate(candidate)? {
                Evaluated::Done(ind) => {
                    if ind.mean_j() >= plan.theta {
                        population.push(ind);
                    }
                }
                Evaluated::BudgetExhausted => {
                    exhausted = true;
                    break;
                }
            }
            if ev.target_reached(cfg.target_j) {
                exhausted = true;
                break;
            }
        }
    }

    let init_gen = cfg.tree_gen(cfg.init_max_depth.min(cfg.max_depth));
    while !exhausted && population.len() < cfg.population_size {
        let tree = random_tree_with(&mut rng, &eval_cfg.registry, &init_gen);
        match ev.evaluate(&tree)? {
            Evaluated::Done(ind) => population.push(ind),
            Evaluated::BudgetExhausted => exhausted = true,
        }
        if ev.target_reached(cfg.target_j) {
            exhausted = true;
        }
    }

    while !exhausted {
        if let Some(cap) = cfg.max_generations {
            if ev.generation >= cap {
                break;
            }
        }
        ev.generation += 1;
        population.sort_by(rank);
        let elite_count = cfg.elite_count().min(population.len());
        let mut next: Vec<Individual> = population[..elite_count].to_vec();
        while next.len() < cfg.population_size {
            let mut offspring: Vec<BTNode> = Vec::with_capacity(2);
            if rng.random::<f64>() < cfg.crossover_prob {
                let a = tournament_select(&population, cfg.tournament_size, &mut rng)?.tree.clone();
                let b = tournament_select(&population, cfg.tournament_size, &mut rng)?.tree.clone();
                let (c1, c2) = crossover(&a, &b, cfg, &mut rng);
                offspring.push(c1);
                offspring.push(c2);
            } else {
                let parent = tournament_select(&population, cfg.tournament_size, &mut rng)?.tree.clone();
                offspring.push(mutate(&parent, cfg, &eval_cfg.registry, &mut rng));
            }
            for child in offspring {
                if next.len() >= cfg.population_size {
                    break; // a crossover pair may overshoot the last slot
                }
                match ev.evaluate(&child)? {
                    Evaluated::Done(ind) => next.push(ind),
                    Evaluated::BudgetExhausted => {
                        exhausted = true;
                        break;
                    }
                }
                if ev.target_reached(cfg.target_j) {
                    exhausted = true;
                    break;
                }
            }
            if exhausted {
                break;
            }
        }
        if !exhausted {
            population = next;
        }
    }

    let best = ev.best.ok_or(GpError::EmptyPopulation)?;
    Ok((best, ev.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitness::{evaluate, reference_tree, EvalConfig};
    use crate::sim::{FailureProfile, Scenario};
    use crate::text::{parse, validate};

    fn eval_cfg() -> EvalConfig {
        EvalConfig::new(Scenario::scenario1(), FailureProfile::det())
    }

    fn individual(tree: BTNode, mean_j: f64) -> Individual {
        let key = serialize(&tree);
        Individual {
            tree,
            report: FitnessReport {
                mean_j,
                per_rollout_j: vec![mean_j],
                failure_fraction: 1.0,
                rollouts: 1,
                total_exec_time: 0.0,
            },
            key,
        }
    }

    #[test]
    fn tournament_of_one_always_wins() {
        let pop = vec![individual(BTNode::action("pick"), 10.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let chosen = tournament_select(&pop, 3, &mut rng).unwrap();
            assert_eq!(chosen.key, "(act pick)");
        }
    }

    #[test]
    fn tournament_k1_is_uniform() {
        let pop = vec![
            individual(BTNode::action("pick"), 10.0),
            individual(BTNode::action("place"), 5.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut wins = 0u32;
        for _ in 0..10_000 {
            if tournament_select(&pop, 1, &mut rng).unwrap().mean_j() == 10.0 {
                wins += 1;
            }
        }
        let freq = wins as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn tournament_k3_favors_the_better() {
        let pop = vec![
            individual(BTNode::action("pick"), 10.0),
            individual(BTNode::action("place"), 5.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut wins = 0u32;
        for _ in 0..10_000 {
            if tournament_select(&pop, 3, &mut rng).unwrap().mean_j() == 10.0 {
                wins += 1;
            }
        }
        let freq = wins as f64 / 10_000.0;
        // the worse individual wins only when sampled all three times
        assert!((freq - 0.875).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn empty_population_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(tournament_select(&[], 3, &mut rng), Err(GpError::EmptyPopulation)));
    }

    #[test]
    fn crossover_of_single_leaves_swaps_them() {
        let cfg = GPConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = BTNode::action("pick");
        let b = BTNode::action("place");
        let (c1, c2) = crossover(&a, &b, &cfg, &mut rng);
        assert_eq!(c1, b);
        assert_eq!(c2, a);
    }

    #[test]
    fn self_crossover_conserves_total_nodes() {
        let cfg = GPConfig::default();
        let reg = eval_cfg().registry;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = crate::bt::random_tree(&mut rng, &reg, 3);
            let (c1, c2) = crossover(&t, &t, &cfg, &mut rng);
            assert_eq!(c1.node_count() + c2.node_count(), 2 * t.node_count());
            assert!(validate(&c1, &reg).is_valid());
            assert!(validate(&c2, &reg).is_valid());
        }
    }

    #[test]
    fn crossover_conserves_nodes_across_random_pairs() {
        let cfg = GPConfig::default();
        let reg = eval_cfg().registry;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut non_retry = 0u32;
        for _ in 0..1000 {
            let a = crate::bt::random_tree(&mut rng, &reg, 3);
            let b = crate::bt::random_tree(&mut rng, &reg, 3);
            let total_before = a.node_count() + b.node_count();
            let (c1, c2) = crossover(&a, &b, &cfg, &mut rng);
            let total_after = c1.node_count() + c2.node_count();
            if (c1 != a || c2 != b) || total_after == total_before {
                // every non-retry swap conserves the pair's node count
                assert_eq!(total_after, total_before);
                non_retry += 1;
            }
        }
        assert!(non_retry > 900);
    }

    #[test]
    fn deleting_the_only_child_collapses_to_a_leaf() {
        let reg = eval_cfg().registry;
        let leaves = reg.expanded_leaves();
        let tree = BTNode::Sequence(vec![BTNode::action("pick")]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let out = delete_subtree(&tree, &leaves, &mut rng);
            assert!(out.is_leaf());
            assert_eq!(out.node_count(), 1);
        }
    }

    #[test]
    fn adding_to_a_bare_leaf_wraps_it() {
        let cfg = GPConfig::default();
        let reg = eval_cfg().registry;
        let leaves = reg.expanded_leaves();
        let tree = BTNode::action("pick");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let out = add_leaf(&tree, &cfg, &leaves, &mut rng);
            assert!(out.is_control());
            assert_eq!(out.children().len(), 2);
            assert!(out.children().contains(&tree));
        }
    }

    #[test]
    fn mutation_kind_frequencies_match_the_split() {
        let split = MutationSplit::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0u32; 3];
        for _ in 0..10_000 {
            match draw_mutation_kind(&split, &mut rng) {
                MutationKind::NodeMutation => counts[0] += 1,
                MutationKind::NodeAddition => counts[1] += 1,
                MutationKind::NodeDeletion => counts[2] += 1,
            }
        }
        let freqs: Vec<f64> = counts.iter().map(|c| *c as f64 / 10_000.0).collect();
        for (freq, expected) in freqs.iter().zip([0.30, 0.40, 0.30]) {
            assert!((freq - expected).abs() <= 0.02, "split frequencies {freqs:?}");
        }
    }

    #[test]
    fn mutants_stay_valid_and_within_caps() {
        let cfg = GPConfig::default();
        let reg = eval_cfg().registry;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tree = reference_tree();
        for _ in 0..2_000 {
            tree = mutate(&tree, &cfg, &reg, &mut rng);
            assert!(tree.node_count() <= cfg.max_nodes);
            assert!(tree.depth() <= cfg.max_depth);
            assert!(validate(&tree, &reg).is_valid());
        }
    }

    #[test]
    fn gate_with_minus_infinity_accepts_everything() {
        let cfg = eval_cfg();
        let candidates = vec![BTNode::Sequence(vec![]), reference_tree()];
        let accepted = gate_seeds(
            &candidates,
            |t| {
                evaluate(t, &cfg, 0).map(|report| Individual {
                    tree: t.clone(),
                    key: serialize(t),
                    report,
                })
            },
            f64::NEG_INFINITY,
        )
        .unwrap();
        assert_eq!(accepted.len(), 2);
    }

    #[test]
    fn gate_at_empty_tree_fitness_is_inclusive() {
        let cfg = eval_cfg();
        let empty = BTNode::Sequence(vec![]);
        let theta = evaluate(&empty, &cfg, 0).unwrap().mean_j;
        assert!((theta - (-217.5)).abs() < 1e-9);
        let eval = |t: &BTNode| {
            evaluate(t, &cfg, 0).map(|report| Individual { tree: t.clone(), key: serialize(t), report })
        };
        // the empty tree itself meets a >= gate
        let accepted = gate_seeds(&[empty.clone(), reference_tree()], eval, theta).unwrap();
        assert_eq!(accepted.len(), 2);
        // a tree scoring below theta does not
        let wanderer = parse("(seq (act localise) (act move_to goal) (act move_to table3))").unwrap();
        let j = evaluate(&wanderer, &cfg, 0).unwrap().mean_j;
        assert!(j < theta, "wanderer scores {j}, expected below {theta}");
        let accepted = gate_seeds(&[wanderer, reference_tree()], eval, theta).unwrap();
        assert_eq!(accepted.len(), 1);
        assert_eq!(accepted[0].key, serialize(&reference_tree()));
    }

    #[test]
    fn gate_of_nothing_is_nothing() {
        let accepted: Vec<Individual> =
            gate_seeds(&[], |_: &BTNode| -> Result<Individual, GpError> { unreachable!() }, 0.0).unwrap();
        assert!(accepted.is_empty());
    }

    #[test]
    fn evolve_stops_during_initialization_when_a_seed_hits_the_target() {
        let mut cfg = GPConfig::default();
        cfg.target_j = Some(140.0);
        let cfg_eval = eval_cfg();
        let plan = SeedingPlan { candidates: vec![reference_tree()], theta: f64::NEG_INFINITY };
        let (best, trace) = evolve(&cfg, &cfg_eval, Some(&plan), 0).unwrap();
        assert_eq!(best.key, serialize(&reference_tree()));
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].generation, 0);
    }

    #[test]
    fn evolve_is_deterministic_per_master_seed() {
        let mut cfg = GPConfig::default();
        cfg.episode_budget = 300;
        let cfg_eval = eval_cfg();
        let (best_a, trace_a) = evolve(&cfg, &cfg_eval, None, 11).unwrap();
        let (best_b, trace_b) = evolve(&cfg, &cfg_eval, None, 11).unwrap();
        assert_eq!(best_a.key, best_b.key);
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn trace_obeys_the_budget_law_and_is_monotone() {
        let mut cfg = GPConfig::default();
        cfg.episode_budget = 400;
        let cfg_eval = eval_cfg();
        let (_, trace) = evolve(&cfg, &cfg_eval, None, 3).unwrap();
        assert!(trace.rows.len() as u64 <= cfg.episode_budget);
        for pair in trace.rows.windows(2) {
            assert!(pair[1].episode > pair[0].episode);
            assert!(pair[1].best_j >= pair[0].best_j);
        }
        let episodes: Vec<u64> = trace.rows.iter().map(|r| r.episode).collect();
        let expected: Vec<u64> = (1..=trace.rows.len() as u64).collect();
        assert_eq!(episodes, expected);
    }

    #[test]
    fn operator_draw_ratio_matches_config() {
        // measured on the operator draws themselves: crossover fires on
        // 40% of offspring-production events
        let cfg = GPConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut crossovers = 0u32;
        let n = 20_000;
        for _ in 0..n {
            if rng.random::<f64>() < cfg.crossover_prob {
                crossovers += 1;
            }
        }
        let freq = crossovers as f64 / n as f64;
        assert!((freq - 0.40).abs() <= 0.03);
    }

    #[test]
    fn evolved_populations_close_over_valid_bounded_trees() {
        let mut cfg = GPConfig::default();
        cfg.episode_budget = 500;
        let cfg_eval = eval_cfg();
        let (best, trace) = evolve(&cfg, &cfg_eval, None, 21).unwrap();
        assert!(best.tree.node_count() <= cfg.max_nodes);
        assert!(best.tree.depth() <= cfg.max_depth);
        assert!(validate(&best.tree, &cfg_eval.registry).is_valid());
        for row in &trace.rows {
            let tree = parse(&row.best_key).unwrap();
            assert!(tree.node_count() <= cfg.max_nodes);
            assert!(validate(&tree, &cfg_eval.registry).is_valid());
        }
    }

    #[test]
    fn elite_count_rounds_like_a_ceiling() {
        let mut cfg = GPConfig::default();
        assert_eq!(cfg.elite_count(), 3);
        cfg.population_size = 15;
        assert_eq!(cfg.elite_count(), 2);
        cfg.population_size = 20;
        assert_eq!(cfg.elite_count(), 2);
        cfg.population_size = 2;
        assert_eq!(cfg.elite_count(), 1);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = GPConfig::default();
        cfg.crossover_prob = 0.5;
        assert!(matches!(cfg.validate(), Err(ConfigError::OperatorProbs(_))));
        let mut cfg = GPConfig::default();
        cfg.population_size = 1;
        assert!(matches!(cfg.validate(), Err(ConfigError::PopulationTooSmall(1))));
        let mut cfg = GPConfig::default();
        cfg.mutation_split.node_addition = 0.9;
        assert!(matches!(cfg.validate(), Err(ConfigError::MutationSplit(_))));
        assert!(GPConfig::default().validate().is_ok());
    }
}
