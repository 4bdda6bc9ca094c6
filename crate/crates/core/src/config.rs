//! Run configuration: one TOML file with sections `plant`, `initial_state`,
//! `integrator`, `dmc`, `schedule`, `scenario` and `simulate`.
//!
//! Plant constants come either from an inline `[plant]` table or from the
//! file named by the top-level key `plant_file` (resolved against the
//! directory of the run configuration). Without either, the shipped default
//! set is used.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dmc::DmcConfig;
use crate::error::{Error, Result};
use crate::harness::{
    Disturbance, MetricBaseline, Noise, OperatingPointSource, PlantModel, ScenarioConfig,
    SetpointProfile,
};
use crate::integrator::IntegratorConfig;
use crate::kinetics::{PlantParams, ReactorState};
use crate::linmodel::OperatingPower;
use crate::scheduler::ScheduleEntry;

pub const DEFAULT_PLANT_TOML: &str = include_str!("../../../params/default.toml");

pub fn default_plant() -> PlantParams {
    toml::from_str(DEFAULT_PLANT_TOML).expect("shipped default parameters parse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantParams>,
    pub initial_state: ReactorState,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    pub dmc: DmcConfig,
    pub schedule: ScheduleSection,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Linearization times, s. Defaults to the start of every setpoint
    /// segment.
    #[serde(default)]
    pub breakpoints: Option<Vec<f64>>,
    /// Explicit switch table; defaults to one switch per breakpoint.
    #[serde(default)]
    pub entries: Option<Vec<ScheduleEntry>>,
    pub operating_points: OperatingPointSource,
    #[serde(default)]
    pub op_power: OperatingPower,
    #[serde(default = "default_settle_cap")]
    pub settle_cap: usize,
}

fn default_settle_cap() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// s.
    pub batch_duration: f64,
    /// (s, °C) knots.
    pub setpoint: SetpointProfile,
    /// W per heater before t = 0.
    #[serde(default)]
    pub initial_power: Option<f64>,
    #[serde(default)]
    pub metric_baseline: MetricBaseline,
    #[serde(default)]
    pub plant_model: PlantModel,
    #[serde(default)]
    pub disturbance: Disturbance,
    #[serde(default)]
    pub noise: Noise,
}

/// Open-loop power program for the `simulate` subcommand: piecewise
/// constant (s, W) knots. Empty means the scenario's initial power.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default)]
    pub power: Vec<(f64, f64)>,
}

/// A parsed configuration together with its resolved plant.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub raw: RunConfig,
    pub scenario: ScenarioConfig,
}

impl LoadedConfig {
    /// Power applied in sample k of an open-loop run.
    pub fn open_loop_profile(&self) -> Vec<f64> {
        let n = self.scenario.n_samples();
        let ts = self.scenario.dmc.ts;
        let knots = &self.raw.simulate.power;
        if knots.is_empty() {
            return vec![self.scenario.resolved_initial_power(); n];
        }
        (0..n)
            .map(|k| {
                let t = k as f64 * ts;
                let i = knots.partition_point(|(tk, _)| *tk <= t);
                knots[i.max(1) - 1].1
            })
            .collect()
    }
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse(&text, base)
        .map(|(raw, scenario)| LoadedConfig {
            path: path.to_path_buf(),
            raw,
            scenario,
        })
        .map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
}

/// Parse and validate a run configuration. `base` resolves `plant_file`.
pub fn parse(text: &str, base: &Path) -> Result<(RunConfig, ScenarioConfig)> {
    let raw: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let plant = match (&raw.plant, &raw.plant_file) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either [plant] or plant_file, not both".into(),
            ));
        }
        (Some(p), None) => p.clone(),
        (None, Some(file)) => load_plant(&base.join(file))?,
        (None, None) => default_plant(),
    };
    let scenario = build_scenario(&raw, plant)?;
    scenario
        .plant
        .validate()
        .map_err(|e| e.in_section("plant"))?;
    scenario
        .initial_state
        .validate()
        .map_err(|e| e.in_section("initial_state"))?;
    scenario.validate()?;
    validate_simulate(&raw.simulate, &scenario)?;
    Ok((raw, scenario))
}

pub fn load_plant(path: &Path) -> Result<PlantParams> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("plant_file {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("plant_file {}: {e}", path.display())))
}

fn build_scenario(raw: &RunConfig, plant: PlantParams) -> Result<ScenarioConfig> {
    let sc = &raw.scenario;
    let breakpoints = match &raw.schedule.breakpoints {
        Some(b) => b.clone(),
        None => segment_starts(&sc.setpoint, sc.batch_duration),
    };
    Ok(ScenarioConfig {
        setpoint: sc.setpoint.clone(),
        batch_duration: sc.batch_duration,
        disturbance: sc.disturbance,
        noise: sc.noise,
        dmc: raw.dmc.clone(),
        breakpoints,
        schedule: raw.schedule.entries.clone(),
        operating_points: raw.schedule.operating_points,
        op_power: raw.schedule.op_power,
        settle_cap: raw.schedule.settle_cap,
        plant,
        integrator: raw.integrator,
        initial_state: raw.initial_state,
        initial_power: sc.initial_power,
        metric_baseline: sc.metric_baseline,
        plant_model: sc.plant_model,
    })
}

/// Start time of every setpoint segment inside the batch; t = 0 first.
pub fn segment_starts(setpoint: &SetpointProfile, duration: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    out.extend(
        setpoint
            .points
            .iter()
            .map(|(t, _)| *t)
            .filter(|t| *t > 0.0 && *t < duration),
    );
    out
}

fn validate_simulate(sim: &SimulateSection, scenario: &ScenarioConfig) -> Result<()> {
    if sim.power.is_empty() {
        return Ok(());
    }
    if sim.power[0].0 != 0.0 {
        return Err(Error::invalid(
            "simulate.power",
            "first knot must be at t = 0",
        ));
    }
    if sim.power.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::invalid(
            "simulate.power",
            "times must be strictly increasing",
        ));
    }
    if sim
        .power
        .iter()
        .any(|(_, p)| !(*p >= 0.0 && *p <= scenario.plant.p_max))
    {
        return Err(Error::invalid("simulate.power", "power outside [0, p_max]"));
    }
    Ok(())
}
