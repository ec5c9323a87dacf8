//! Behavior-tree evolution workbench.
//!
//! The crate is organized around a small pipeline: behavior trees
//! ([`bt`]) are parsed and validated ([`text`]), executed against a
//! simulated pick-and-place world ([`sim`]), scored by episode rollouts
//! ([`fitness`]), and evolved with genetic programming ([`gp`]).
//! Optionally the initial population is seeded from a chat-completion
//! provider ([`seeder`]). The [`harness`] module and the `evobt` binary
//! drive full experiments from JSON configs.

pub mod bt;
pub mod config;
pub mod fitness;
pub mod gp;
pub mod harness;
pub mod seeder;
pub mod sim;
pub mod text;

pub use bt::{random_tree, BTNode, SkillRegistry, Status, TickError, WorldPort};
pub use fitness::{evaluate, run_episode, EpisodeLimits, EpisodeOutcome, EvalConfig, FitnessReport, FitnessWeights};
pub use gp::{evolve, EvolutionTrace, GPConfig, Individual, SeedingPlan};
pub use sim::{FailureProfile, Scenario, World, WorldState};
pub use text::{parse, serialize, validate, ParseError, ValidationReport};
