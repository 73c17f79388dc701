//! One structured run configuration for every pipeline stage.
//!
//! The file format is TOML. Every key has a default, unknown keys are
//! rejected. The clock spacing `dt` and the master `seed` live at the top
//! level only and are copied into each section on load, so no two stages can
//! disagree about them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::ingest::{LightEstimatorConfig, ResampleConfig};
use crate::metrics::OFF_ROAD_THRESHOLD;
use crate::rulebase::{CalibrationConfig, IdmParams, RuleConfig};
use crate::sim::SimConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Sections whose `dt` / `seed` keys are owned by the top level.
const MIRRORED: [(&str, &[&str]); 5] = [
    ("resample", &["dt"]),
    ("rule", &["dt"]),
    ("sim", &["dt", "seed"]),
    ("synth", &["dt", "seed"]),
    ("train", &["seed"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TupleConfig {
    /// Leader-follower pairs with a larger bumper gap are not used (m).
    pub max_gap: f64,
}

impl Default for TupleConfig {
    fn default() -> Self {
        TupleConfig { max_gap: 60.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Distance beyond the road edge that counts as off-road (m).
    pub off_road_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            off_road_threshold: OFF_ROAD_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Closed-loop steps per rollout.
    pub steps: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { steps: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Clock spacing shared by every stage (s).
    pub dt: f64,
    pub seed: u64,
    pub resample: ResampleConfig,
    pub lights: LightEstimatorConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub simulate: SimulateConfig,
    pub rule: RuleConfig,
    /// IDM parameters used before (or without) calibration.
    pub idm: IdmParams,
    pub calibration: CalibrationConfig,
    pub tuples: TupleConfig,
    pub metrics: MetricsConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            dt: 0.4,
            seed: 0,
            resample: ResampleConfig::default(),
            lights: LightEstimatorConfig::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            simulate: SimulateConfig::default(),
            rule: RuleConfig::default(),
            idm: IdmParams::default(),
            calibration: CalibrationConfig::default(),
            tuples: TupleConfig::default(),
            metrics: MetricsConfig::default(),
            synth: SynthConfig::default(),
        };
        c.sync();
        c
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (section, keys) in MIRRORED {
            if let Some(toml::Value::Table(t)) = table.get(section) {
                if let Some(k) = keys.iter().find(|k| t.contains_key(**k)) {
                    return Err(Error::Config(format!("`{section}.{k}` is set by the top-level `{k}` key")));
                }
            }
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Serialized form without the mirrored keys; reads back to `self`.
    pub fn to_toml_string(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (section, keys) in MIRRORED {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                for k in keys {
                    t.remove(*k);
                }
            }
        }
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy the top-level `dt` and `seed` into every section.
    pub fn sync(&mut self) {
        self.resample.dt = self.dt;
        self.rule.dt = self.dt;
        self.sim.dt = self.dt;
        self.synth.dt = self.dt;
        self.sim.seed = self.seed;
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync();
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.into()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.resample.route_spacing > 0.0 && self.resample.min_duration >= 0.0) {
            return bad("resample: route_spacing must be positive, min_duration non-negative");
        }
        let g = &self.graph;
        if g.k_route == 0 || g.horizon == 0 || !(g.neighbor_radius >= 0.0) || !(g.sigma_p >= 0.0) {
            return bad("graph: k_route and horizon must be positive, radii non-negative");
        }
        let l = &self.lights;
        if !(l.stop_zone > 0.0 && l.v_stop >= 0.0 && l.min_phase >= 0.0 && l.cycle_min > 0.0 && l.cycle_max >= l.cycle_min)
        {
            return bad("lights: thresholds out of range");
        }
        if !(self.tuples.max_gap > 0.0) {
            return bad("tuples.max_gap must be positive");
        }
        if !(self.metrics.off_road_threshold >= 0.0) {
            return bad("metrics.off_road_threshold must be non-negative");
        }
        if self.simulate.steps == 0 {
            return bad("simulate.steps must be positive");
        }
        if self.calibration.iterations == 0 || !(self.calibration.lr > 0.0) {
            return bad("calibration: iterations and lr must be positive");
        }
        self.train.validate()?;
        self.sim.validate()?;
        self.idm.validate()?;
        Ok(())
    }
}
