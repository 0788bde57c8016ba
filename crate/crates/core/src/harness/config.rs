//! Experiment configuration, loaded from TOML. Every field has a default, so
//! an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::LqrConfig;
use crate::expert::RecordingConfig;
use crate::harness::tracks::TrackGenConfig;
use crate::harness::HarnessError;
use crate::losses::{CvarConfig, MultiTaskWeights};
use crate::network::AdamConfig;
use crate::simulator::{DensityConfig, DT_SIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    TrajectoryGmm,
    TrajectoryL2,
    BaselineActuation,
}

impl AgentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::TrajectoryGmm => "trajectory-gmm",
            AgentKind::TrajectoryL2 => "trajectory-l2",
            AgentKind::BaselineActuation => "baseline-actuation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    #[serde(flatten)]
    pub generator: TrackGenConfig,
    pub train_ids: Vec<u32>,
    pub val_ids: Vec<u32>,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { generator: TrackGenConfig::default(), train_ids: (0..8).collect(), val_ids: (8..12).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub agent: AgentKind,
    /// Adds the affordance auxiliary head.
    pub affordance: bool,
    pub fusion_layers: Vec<usize>,
    pub modes: usize,
    /// Checkpoint name; derived from the agent settings when absent.
    pub name: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            agent: AgentKind::TrajectoryGmm,
            affordance: true,
            fusion_layers: vec![128, 128, 64],
            modes: 2,
            name: None,
        }
    }
}

impl ModelConfig {
    pub fn name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut n = self.agent.as_str().to_string();
        if self.affordance {
            n.push_str("-aff");
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub freeze_epochs: usize,
    pub weights: MultiTaskWeights,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
            clip_norm: 10.0,
            freeze_epochs: 5,
            weights: MultiTaskWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { alpha: CvarConfig::default().alpha, epochs: 1, lr: 1e-4, batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Checkpoint to evaluate, or "expert"; the model name when absent.
    pub agent: Option<String>,
    pub miles_target: f64,
    pub episode_mile_cap: f64,
    pub replan_interval: f64,
    /// Spacing of decimated trace records, seconds.
    pub trace_interval: f64,
    /// An episode that stays below `stall_speed` this long is ended.
    pub stall_time: f64,
    pub stall_speed: f64,
    pub start_speed: f64,
    pub density: DensityConfig,
    pub lqr: LqrConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            agent: None,
            miles_target: 100.0,
            episode_mile_cap: 10.0,
            replan_interval: 0.1,
            trace_interval: 1.0,
            stall_time: 20.0,
            stall_speed: 0.5,
            start_speed: 15.0,
            density: DensityConfig::default(),
            lqr: LqrConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub w_aff: Vec<f64>,
    pub epochs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { w_aff: vec![0.1, 0.3, 1.0], epochs: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tracks: TrackConfig,
    pub recording: RecordingConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tracks: TrackConfig::default(),
            recording: RecordingConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

fn is_multiple(x: f64, step: f64) -> bool {
    let r = x / step;
    r.round() >= 1.0 && (r - r.round()).abs() < 1e-9
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let overlap: Vec<u32> =
            self.tracks.train_ids.iter().copied().filter(|id| self.tracks.val_ids.contains(id)).collect();
        if !overlap.is_empty() {
            return bad(format!("train and validation tracks overlap: {overlap:?}"));
        }
        if self.tracks.train_ids.is_empty() || self.tracks.val_ids.is_empty() {
            return bad("need at least one train and one validation track".into());
        }
        if !is_multiple(self.eval.replan_interval, DT_SIM) {
            return bad(format!("replan_interval {} is not a multiple of {DT_SIM}", self.eval.replan_interval));
        }
        if !is_multiple(self.recording.sample_tick, DT_SIM) {
            return bad(format!("sample_tick {} is not a multiple of {DT_SIM}", self.recording.sample_tick));
        }
        if !is_multiple(self.recording.dt_label, self.recording.sample_tick) {
            return bad("dt_label must be a multiple of sample_tick".into());
        }
        if self.recording.k < 2 {
            return bad("k must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.finetune.alpha) {
            return bad(format!("finetune alpha {} outside [0, 1)", self.finetune.alpha));
        }
        if self.training.batch_size == 0 || self.finetune.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.training.clip_norm <= 0.0 {
            return bad("clip_norm must be positive".into());
        }
        if !(self.training.weights.w_traj > 0.0 && self.training.weights.w_aff >= 0.0) {
            return bad("need w_traj > 0 and w_aff >= 0".into());
        }
        if self.model.modes == 0 {
            return bad("modes must be positive".into());
        }
        if self.grid.w_aff.is_empty() {
            return bad("grid must be nonempty".into());
        }
        if !(self.eval.miles_target > 0.0 && self.eval.episode_mile_cap > 0.0) {
            return bad("mileage targets must be positive".into());
        }
        self.eval.lqr.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.recording.k, 5);
        assert_eq!(cfg.finetune.alpha, 0.9);
        assert_eq!(cfg.model.name(), "trajectory-gmm-aff");
    }

    #[test]
    fn roundtrip_and_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 4\n[model]\nagent = \"baseline-actuation\"\naffordance = false\n[tracks]\ntrain_ids = [1, 2]\nval_ids = [3]\n",
        )
        .unwrap();
        assert_eq!(cfg.model.name(), "baseline-actuation");
        assert_eq!(cfg.tracks.train_ids, vec![1, 2]);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_overlap_and_bad_replan() {
        assert!(ExperimentConfig::from_toml_str("[tracks]\ntrain_ids = [1, 2]\nval_ids = [2]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[eval]\nreplan_interval = 0.11\n").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1\n").is_err());
    }
}
