//! Pipeline configuration: one TOML document holding every module's
//! settings. Unknown keys are rejected; `key.path=value` overrides are
//! applied to the parsed document before it is validated.

use std::path::Path;

use radarloop::alignment::AlignmentConfig;
use radarloop::evaluation::DEFAULT_KITTI_LENGTHS;
use radarloop::keyframing::KeyframeConfig;
use radarloop::logistic::LogisticConfig;
use radarloop::odometry::RansacConfig;
use radarloop::place_recognition::{DescriptorConfig, RetrievalConfig};
use radarloop::pose_graph::GraphConfig;
use radarloop::loop_verification::VerificationConfig;
use radarloop::sim::{ImuDrift, PathSpec, PathTemplate, Scenario, SensorModel};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub scenario: Scenario,
    /// Master seed: world layout, sensor noise and disturbance sampling.
    pub seed: u64,
    pub sim: SimConfig,
    pub odometry: RansacConfig,
    pub keyframing: KeyframeConfig,
    /// Keyframes accumulated into the submaps used for registration.
    pub submap_keyframes: usize,
    pub alignment: AlignmentConfig,
    pub descriptor: DescriptorConfig,
    pub retrieval: RetrievalConfig,
    pub verification: VerificationConfig,
    pub loop_training: LoopTrainingConfig,
    pub graph: GraphConfig,
    pub evaluation: EvaluationConfig,
    pub grid: GridConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Forest,
            seed: 1,
            sim: SimConfig::default(),
            odometry: RansacConfig::default(),
            keyframing: KeyframeConfig::default(),
            submap_keyframes: 5,
            alignment: AlignmentConfig::default(),
            descriptor: DescriptorConfig::default(),
            retrieval: RetrievalConfig::default(),
            verification: VerificationConfig::default(),
            loop_training: LoopTrainingConfig::default(),
            graph: GraphConfig::default(),
            evaluation: EvaluationConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub path: PathSpec,
    pub sensor: SensorModel,
    pub rate_hz: f64,
    pub imu_drift: ImuDrift,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            path: PathSpec::new(PathTemplate::SquareLoop { laps: 2, reverse: false }),
            sensor: SensorModel::default(),
            rate_hz: 10.0,
            imu_drift: ImuDrift::default(),
        }
    }
}

/// The loop classifier is trained on a separate simulated sequence of the
/// same world with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopTrainingConfig {
    /// Train classifiers when no model files are supplied.
    pub enabled: bool,
    /// Added to the master seed for the training sequence's noise.
    pub seed_offset: u64,
    pub path: PathSpec,
    /// Candidates verified per query while collecting features.
    pub top_k: usize,
    pub logistic: LogisticConfig,
}

impl Default for LoopTrainingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            seed_offset: 1000,
            path: PathSpec::new(PathTemplate::SquareLoop { laps: 2, reverse: false }),
            top_k: 3,
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Ground-truth loop distance in meters.
    pub loop_distance: f64,
    pub kitti_lengths: Vec<f64>,
    pub overlap_radius: f64,
    /// Pairs below this overlap count as non-loops under the overlap gate.
    pub overlap_gate: f64,
    /// Fraction of alignment training pairs held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            loop_distance: 6.0,
            kitti_lengths: DEFAULT_KITTI_LENGTHS.to_vec(),
            overlap_radius: 1.0,
            overlap_gate: 0.2,
            holdout_fraction: 0.3,
        }
    }
}

/// Experiment grid: one run per (descriptor keyframes, top-k) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub keyframes: Vec<usize>,
    pub top_k: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            keyframes: vec![1, 5],
            top_k: vec![1, 3],
        }
    }
}

impl GridConfig {
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &k in &self.keyframes {
            for &t in &self.top_k {
                out.push((k, t));
            }
        }
        out
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.submap_keyframes == 0 {
            return bad("submap_keyframes must be at least 1");
        }
        if self.grid.keyframes.is_empty() || self.grid.top_k.is_empty() {
            return bad("grid needs at least one keyframe count and one top-k");
        }
        if self.grid.keyframes.contains(&0) || self.grid.top_k.contains(&0) || self.loop_training.top_k == 0 {
            return bad("keyframe counts and top-k values must be at least 1");
        }
        if !(self.verification.threshold > 0.0 && self.verification.threshold < 1.0) {
            return bad("verification.threshold must lie in (0, 1)");
        }
        if !(self.sim.rate_hz > 0.0) {
            return bad("sim.rate_hz must be positive");
        }
        if self.evaluation.kitti_lengths.is_empty() || self.evaluation.kitti_lengths.iter().any(|l| !(*l > 0.0)) {
            return bad("evaluation.kitti_lengths must be positive");
        }
        if !(0.0..1.0).contains(&self.evaluation.holdout_fraction) {
            return bad("evaluation.holdout_fraction must lie in [0, 1)");
        }
        self.odometry.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.sim.sensor.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        Self::from_layers(&[text], overrides)
    }

    /// Merges TOML documents left to right (later keys win, tables merge
    /// recursively), then applies overrides.
    pub fn from_layers(layers: &[&str], overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Table::new();
        for text in layers {
            let layer: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
            merge(&mut doc, layer);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: PipelineConfig = doc.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Descriptor settings with the accumulation count of one grid cell.
    pub fn retrieval_for(&self, keyframes: usize, top_k: usize) -> RetrievalConfig {
        RetrievalConfig {
            keyframes,
            top_k,
            ..self.retrieval.clone()
        }
    }
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal, falling
/// back to a plain string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
