//! JSON experiment configuration for the command-line harness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::{EpisodeLimits, EvalConfig, FitnessWeights};
use crate::gp::GPConfig;
use crate::seeder::ProviderConfig;
use crate::sim::{ActionTiming, FailureProfile, Scenario};

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("unknown scenario `{0}` (expected scenario1 or scenario2)")]
    UnknownScenario(String),
    #[error("unknown failure profile `{0}` (expected det, stoch1, stoch2 or stoch3)")]
    UnknownProfile(String),
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("seeding mode `{0}` requires {1}")]
    SeedingField(String, &'static str),
    #[error(transparent)]
    Gp(#[from] crate::gp::ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedMode {
    None,
    Llm,
    Replay,
}

/// Acceptance-fitness threshold: the deterministic fitness of the empty
/// tree ("must beat doing nothing"), or an explicit value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaMode {
    EmptyTree,
    Explicit(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedingConfig {
    pub mode: SeedMode,
    pub n_seeds: usize,
    pub theta: ThetaMode,
    /// Reply directory for replay mode.
    pub script_dir: Option<PathBuf>,
    /// Endpoint settings for llm mode.
    pub provider: Option<ProviderConfig>,
    pub task_text: Option<String>,
    pub image_ref: Option<PathBuf>,
    /// Reply cap for the regeneration loop; defaults to five per seed.
    pub max_attempts: Option<usize>,
}

impl Default for SeedingConfig {
    fn default() -> SeedingConfig {
        SeedingConfig {
            mode: SeedMode::None,
            n_seeds: 30,
            theta: ThetaMode::EmptyTree,
            script_dir: None,
            provider: None,
            task_text: None,
            image_ref: None,
            max_attempts: None,
        }
    }
}

impl SeedingConfig {
    pub fn attempts_cap(&self) -> usize {
        self.max_attempts.unwrap_or(5 * self.n_seeds.max(1))
    }
}

/// One experiment: scenario, failure regime, GP setup, seeding, and how
/// many independent runs to average over.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Method label used in comparison CSVs; defaults to the file stem.
    pub label: Option<String>,
    pub scenario: String,
    pub profile: String,
    pub runs: u32,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Rollouts per evaluation in stochastic regimes.
    pub rollouts: u32,
    pub gp: GPConfig,
    pub weights: FitnessWeights,
    pub limits: EpisodeLimits,
    pub timing: ActionTiming,
    pub seeding: SeedingConfig,
    /// Fitness defining "episodes to target" in summaries.
    pub summary_target_j: f64,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            label: None,
            scenario: "scenario1".to_string(),
            profile: "det".to_string(),
            runs: 10,
            master_seed: 42,
            output_dir: PathBuf::from("out"),
            rollouts: 5,
            gp: GPConfig::default(),
            weights: FitnessWeights::default(),
            limits: EpisodeLimits::default(),
            timing: ActionTiming::default(),
            seeding: SeedingConfig::default(),
            summary_target_j: 135.0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigFileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigFileError::Io { path: path.to_path_buf(), source })?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|source| ConfigFileError::Json { path: path.to_path_buf(), source })?;
        if config.label.is_none() {
            config.label = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        self.scenario()?;
        self.failure_profile()?;
        if self.runs < 1 {
            return Err(ConfigFileError::NoRuns);
        }
        self.gp.validate()?;
        match self.seeding.mode {
            SeedMode::Replay if self.seeding.script_dir.is_none() => {
                Err(ConfigFileError::SeedingField("replay".to_string(), "seeding.script_dir"))
            }
            _ => Ok(()),
        }
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigFileError> {
        Scenario::by_name(&self.scenario).ok_or_else(|| ConfigFileError::UnknownScenario(self.scenario.clone()))
    }

    pub fn failure_profile(&self) -> Result<FailureProfile, ConfigFileError> {
        FailureProfile::by_name(&self.profile).ok_or_else(|| ConfigFileError::UnknownProfile(self.profile.clone()))
    }

    pub fn eval_config(&self) -> Result<EvalConfig, ConfigFileError> {
        let scenario = self.scenario()?;
        let registry = scenario.registry();
        Ok(EvalConfig {
            scenario,
            profile: self.failure_profile()?,
            limits: self.limits,
            weights: self.weights,
            timing: self.timing,
            registry,
            rollouts: self.rollouts,
        })
    }

    /// Task command handed to the provider; scenario-specific default.
    pub fn task_text(&self) -> String {
        match &self.seeding.task_text {
            Some(text) => text.clone(),
            None if self.scenario == "scenario2" => {
                "Find the cube on one of the tables and place it on the black table.".to_string()
            }
            None => "Take the cube to the black table and place it there.".to_string(),
        }
    }

    pub fn method_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| "experiment".to_string())
    }
}
