//! Behavior-tree data model and tick execution.
//!
//! A tree is a value: immutable after construction, cheap to clone, and
//! executed by sending a tick to the root. Control nodes (`Sequence`,
//! `Fallback`, `Parallel`) route the tick to their children; leaves call
//! into a [`WorldPort`], the abstract execution target. Leaves return
//! either `Success` or `Failure` -- there is no `Running` state, actions
//! execute atomically and consume simulated time inside the port.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Result of ticking a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Success,
    Failure,
}

impl Status {
    pub fn from_bool(ok: bool) -> Status {
        if ok {
            Status::Success
        } else {
            Status::Failure
        }
    }

    pub fn is_success(self) -> bool {
        self == Status::Success
    }
}

/// A node in a behavior tree. Trees are finite and acyclic by
/// construction; every tree has at least one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BTNode {
    /// Ticks children left to right, fails on the first child failure.
    Sequence(Vec<BTNode>),
    /// Ticks children left to right, succeeds on the first child success.
    Fallback(Vec<BTNode>),
    /// Ticks all children; succeeds iff at least `threshold` succeed.
    Parallel { threshold: usize, children: Vec<BTNode> },
    /// Executes a registered skill against the world.
    Action { skill: String, param: Option<String> },
    /// Evaluates a registered check against the world.
    Condition { check: String, param: Option<String> },
}

/// Errors surfaced while ticking a leaf whose identifiers do not resolve
/// in the registry bound to the world.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TickError {
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
    #[error("`{0}` requires a table parameter")]
    MissingParam(String),
    #[error("`{0}` does not take a parameter")]
    UnexpectedParam(String),
    #[error("`{leaf}` references unknown table `{table}`")]
    UnknownTable { leaf: String, table: String },
}

/// Abstract execution target for leaves. Tick semantics depend only on
/// the returned statuses, never on world internals.
pub trait WorldPort {
    fn exec_action(&mut self, skill: &str, param: Option<&str>) -> Result<Status, TickError>;
    fn eval_condition(&mut self, check: &str, param: Option<&str>) -> Result<Status, TickError>;
}

impl BTNode {
    pub fn action(skill: &str) -> BTNode {
        BTNode::Action { skill: skill.to_string(), param: None }
    }

    pub fn action_with(skill: &str, param: &str) -> BTNode {
        BTNode::Action { skill: skill.to_string(), param: Some(param.to_string()) }
    }

    pub fn condition(check: &str) -> BTNode {
        BTNode::Condition { check: check.to_string(), param: None }
    }

    pub fn condition_with(check: &str, param: &str) -> BTNode {
        BTNode::Condition { check: check.to_string(), param: Some(param.to_string()) }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, BTNode::Action { .. } | BTNode::Condition { .. })
    }

    pub fn is_control(&self) -> bool {
        !self.is_leaf()
    }

    /// Children of this node; empty for leaves.
    pub fn children(&self) -> &[BTNode] {
        match self {
            BTNode::Sequence(c) | BTNode::Fallback(c) => c,
            BTNode::Parallel { children, .. } => children,
            _ => &[],
        }
    }

    /// Mutable child list of a control node; `None` for leaves.
    pub fn children_mut(&mut self) -> Option<&mut Vec<BTNode>> {
        match self {
            BTNode::Sequence(c) | BTNode::Fallback(c) => Some(c),
            BTNode::Parallel { children, .. } => Some(children),
            _ => None,
        }
    }

    /// Total node count, control nodes and leaves included.
    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(BTNode::node_count).sum::<usize>()
    }

    /// Depth of the tree; a single leaf has depth 1.
    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(BTNode::depth).max().unwrap_or(0)
    }

    /// Sends a tick through this subtree.
    ///
    /// Sequence succeeds only if all children succeed; Fallback succeeds
    /// if at least one child succeeds; Parallel ticks every child (left
    /// to right, actions being atomic and synchronous) and succeeds iff
    /// at least `threshold` children succeeded. Empty Sequence is the
    /// vacuous conjunction (Success); empty Fallback and empty Parallel
    /// are Failure.
    pub fn tick<W: WorldPort + ?Sized>(&self, world: &mut W) -> Result<Status, TickError> {
        match self {
            BTNode::Sequence(children) => {
                for child in children {
                    if !child.tick(world)?.is_success() {
                        return Ok(Status::Failure);
                    }
                }
                Ok(Status::Success)
            }
            BTNode::Fallback(children) => {
                for child in children {
                    if child.tick(world)?.is_success() {
                        return Ok(Status::Success);
                    }
                }
                Ok(Status::Failure)
            }
            BTNode::Parallel { threshold, children } => {
                let mut successes = 0usize;
                for child in children {
                    if child.tick(world)?.is_success() {
                        successes += 1;
                    }
                }
                Ok(Status::from_bool(!children.is_empty() && successes >= *threshold))
            }
            BTNode::Action { skill, param } => world.exec_action(skill, param.as_deref()),
            BTNode::Condition { check, param } => world.eval_condition(check, param.as_deref()),
        }
    }
}

/// Legal parameters of a primitive: none, or one table id out of a set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamDomain {
    None,
    Tables(BTreeSet<String>),
}

/// The set of action skills and condition checks a tree may reference.
/// Identifiers are unique across actions and conditions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkillRegistry {
    actions: BTreeMap<String, ParamDomain>,
    conditions: BTreeMap<String, ParamDomain>,
}

impl SkillRegistry {
    pub fn new() -> SkillRegistry {
        SkillRegistry::default()
    }

    /// The paper's primitive set over the given table ids:
    /// actions localise, head_up, head_down, tuck, pick, place,
    /// move_to(table); checks have_cube, cube_placed(table), task_done.
    pub fn standard<I>(tables: I) -> SkillRegistry
    where
        I: IntoIterator,
        I::Item: Into<String>,
    {
        let tables: BTreeSet<String> = tables.into_iter().map(Into::into).collect();
        let mut reg = SkillRegistry::new();
        for skill in ["localise", "head_up", "head_down", "tuck", "pick", "place"] {
            reg.register_action(skill, ParamDomain::None);
        }
        reg.register_action("move_to", ParamDomain::Tables(tables.clone()));
        reg.register_condition("have_cube", ParamDomain::None);
        reg.register_condition("cube_placed", ParamDomain::Tables(tables));
        reg.register_condition("task_done", ParamDomain::None);
        reg
    }

    pub fn register_action(&mut self, name: &str, domain: ParamDomain) {
        assert!(
            !self.actions.contains_key(name) && !self.conditions.contains_key(name),
            "duplicate registry identifier `{name}`"
        );
        self.actions.insert(name.to_string(), domain);
    }

    pub fn register_condition(&mut self, name: &str, domain: ParamDomain) {
        assert!(
            !self.actions.contains_key(name) && !self.conditions.contains_key(name),
            "duplicate registry identifier `{name}`"
        );
        self.conditions.insert(name.to_string(), domain);
    }

    pub fn action_domain(&self, name: &str) -> Option<&ParamDomain> {
        self.actions.get(name)
    }

    pub fn condition_domain(&self, name: &str) -> Option<&ParamDomain> {
        self.conditions.get(name)
    }

    pub fn action_names(&self) -> impl Iterator<Item = &str> {
        self.actions.keys().map(String::as_str)
    }

    pub fn condition_names(&self) -> impl Iterator<Item = &str> {
        self.conditions.keys().map(String::as_str)
    }

    /// The expanded primitive set: one leaf per unparameterized primitive
    /// and one per (primitive, legal parameter) pair, in a fixed order.
    pub fn expanded_leaves(&self) -> Vec<BTNode> {
        let mut leaves = Vec::new();
        for (name, domain) in &self.actions {
            match domain {
                ParamDomain::None => leaves.push(BTNode::action(name)),
                ParamDomain::Tables(tables) => {
                    leaves.extend(tables.iter().map(|t| BTNode::action_with(name, t)));
                }
            }
        }
        for (name, domain) in &self.conditions {
            match domain {
                ParamDomain::None => leaves.push(BTNode::condition(name)),
                ParamDomain::Tables(tables) => {
                    leaves.extend(tables.iter().map(|t| BTNode::condition_with(name, t)));
                }
            }
        }
        leaves
    }
}

/// Shape parameters for random tree generation.
#[derive(Debug, Clone)]
pub struct TreeGen {
    pub max_depth: usize,
    /// Probability of emitting a control node at non-maximal depth.
    pub control_prob: f64,
    pub min_children: usize,
    pub max_children: usize,
    /// Parallel is excluded from generation unless enabled.
    pub allow_parallel: bool,
}

impl TreeGen {
    pub fn new(max_depth: usize) -> TreeGen {
        TreeGen {
            max_depth,
            control_prob: 0.4,
            min_children: 2,
            max_children: 4,
            allow_parallel: false,
        }
    }
}

/// Generates a registry-valid tree of depth at most `max_depth`, with the
/// default generation shape (control probability 0.4, 2-4 children,
/// Parallel excluded). Leaves are drawn uniformly over the expanded
/// primitive set.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, registry: &SkillRegistry, max_depth: usize) -> BTNode {
    random_tree_with(rng, registry, &TreeGen::new(max_depth))
}

pub fn random_tree_with<R: Rng + ?Sized>(rng: &mut R, registry: &SkillRegistry, gen: &TreeGen) -> BTNode {
    assert!(gen.max_depth >= 1, "max_depth must be at least 1");
    let leaves = registry.expanded_leaves();
    assert!(!leaves.is_empty(), "registry has no primitives");
    gen_node(rng, &leaves, gen, gen.max_depth)
}

pub(crate) fn random_leaf<R: Rng + ?Sized>(rng: &mut R, leaves: &[BTNode]) -> BTNode {
    leaves[rng.random_range(0..leaves.len())].clone()
}

fn gen_node<R: Rng + ?Sized>(rng: &mut R, leaves: &[BTNode], gen: &TreeGen, depth_left: usize) -> BTNode {
    if depth_left <= 1 || rng.random::<f64>() >= gen.control_prob {
        return random_leaf(rng, leaves);
    }
    let arity = rng.random_range(gen.min_children..=gen.max_children);
    let children: Vec<BTNode> = (0..arity).map(|_| gen_node(rng, leaves, gen, depth_left - 1)).collect();
    let kinds = if gen.allow_parallel { 3 } else { 2 };
    match rng.random_range(0..kinds) {
        0 => BTNode::Sequence(children),
        1 => BTNode::Fallback(children),
        _ => {
            let threshold = rng.random_range(1..=children.len());
            BTNode::Parallel { threshold, children }
        }
    }
}
