//! Experiment configuration: one TOML document covering every module.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::TrainConfig;
use crate::contact::ScenarioConfig;
use crate::controller::{ImpedanceGains, ReactionConfig};
use crate::dataset::DatasetConfig;
use crate::dynamics::{DynamicsParams, RobotModel};
use crate::error::{Error, Result};
use crate::kinematics::{self, RobotGeometry};
use crate::observer::ObserverConfig;
use crate::reaction::ReactionPolicy;
use crate::simulation::{Engine, SimulationConfig};

/// Schema version this build reads and writes.
pub const CONFIG_VERSION: u32 = 1;

/// Held-out evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Joint configuration kept out of training and used for evaluation.
    pub held_out_config: usize,
    /// Rounds of archetypes simulated on the held-out configuration.
    pub rounds: usize,
    /// Seed of the evaluation scenarios, independent of the dataset seed.
    pub seed: u64,
    /// Fewest FCA and FCB episodes for a share comparison to count.
    pub min_misclassified: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { held_out_config: 1, rounds: 300, seed: 1_000, min_misclassified: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed of dataset generation and simulation noise.
    pub seed: u64,
    /// Worker threads for episode batches (0 = all cores).
    pub workers: usize,
    /// Directory for generated files.
    pub output_dir: String,
    pub geometry: RobotGeometry,
    pub dynamics: DynamicsParams,
    pub observer: ObserverConfig,
    pub impedance: ImpedanceGains,
    pub reactions: ReactionConfig,
    pub policy: ReactionPolicy,
    pub simulation: SimulationConfig,
    pub scenarios: ScenarioConfig,
    pub dataset: DatasetConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            workers: 0,
            output_dir: "out".into(),
            geometry: RobotGeometry::default(),
            dynamics: DynamicsParams::default(),
            observer: ObserverConfig::default(),
            impedance: ImpedanceGains::default(),
            reactions: ReactionConfig::default(),
            policy: ReactionPolicy::default(),
            simulation: SimulationConfig::default(),
            scenarios: ScenarioConfig::default(),
            dataset: DatasetConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.geometry.validate()?;
        self.dynamics.validate()?;
        self.observer.validate()?;
        self.impedance.validate()?;
        self.reactions.validate()?;
        self.policy.validate()?;
        self.simulation.validate()?;
        self.scenarios.validate()?;
        self.dataset.validate()?;
        self.training.validate()?;
        if (self.observer.dt - self.simulation.dt).abs() > 1e-15 {
            return Err(Error::Config("observer.dt must equal simulation.dt".into()));
        }
        let n = self.scenarios.configurations.len();
        if self.evaluation.held_out_config >= n {
            return Err(Error::Config(format!(
                "held_out_config {} does not name one of the {n} configurations",
                self.evaluation.held_out_config
            )));
        }
        if n < 2 {
            return Err(Error::Config("a held-out split needs at least two configurations".into()));
        }
        if self.evaluation.rounds == 0 {
            return Err(Error::Config("evaluation.rounds must be >= 1".into()));
        }
        let model = self.model();
        for (i, c) in self.scenarios.configurations.iter().enumerate() {
            kinematics::inverse_kinematics(&kinematics::PlatformPose::new(c[0], c[1], c[2]), &model.geometry, &model.branch)
                .map_err(|e| Error::Config(format!("configuration {i} is not reachable: {e}")))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, hex encoded. Where outputs go and
    /// how many threads produce them do not change results, so `output_dir`
    /// and `workers` are left out.
    pub fn hash(&self) -> String {
        let canonical = Self { output_dir: String::new(), workers: 0, ..self.clone() };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn model(&self) -> RobotModel {
        RobotModel { geometry: self.geometry.clone(), params: self.dynamics.clone(), ..RobotModel::default() }
    }

    pub fn engine(&self) -> Engine {
        Engine {
            model: self.model(),
            observer: self.observer.clone(),
            gains: self.impedance.clone(),
            reactions: self.reactions.clone(),
            thresholds: self.policy.thresholds,
            sim: self.simulation.clone(),
        }
    }

    /// Configurations used for training.
    pub fn train_configs(&self) -> Vec<usize> {
        (0..self.scenarios.configurations.len()).filter(|c| *c != self.evaluation.held_out_config).collect()
    }

    pub fn worker_count(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }
}
