//! Closed-loop batch simulation: nonlinear plant, modified DMC and the
//! model scheduler, with optional output step disturbance and Gaussian
//! measurement noise.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dmc::{control_step, ControllerState, DmcConfig, DmcGain};
use crate::error::{Error, Result};
use crate::integrator::{advance_sample, IntegratorConfig};
use crate::kinetics::{jacket_balance_power, PlantParams, ReactorState};
use crate::linmodel::{
    build_model_bank, BankSettings, LinearModel, OperatingPoint, OperatingPower,
};
use crate::scheduler::{switch_model, Schedule, ScheduleEntry};

/// Offset between kelvin and degrees Celsius.
pub const KELVIN: f64 = 273.15;

/// Piecewise-linear setpoint trajectory in (s, °C), held flat past its ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SetpointProfile {
    pub points: Vec<(f64, f64)>,
}

impl SetpointProfile {
    pub fn constant(value: f64) -> Self {
        SetpointProfile {
            points: vec![(0.0, value)],
        }
    }

    pub fn validate(&self, duration: f64) -> Result<()> {
        let first = self
            .points
            .first()
            .ok_or_else(|| Error::invalid("scenario.setpoint", "needs at least one point"))?;
        if first.0 > 0.0 {
            return Err(Error::invalid(
                "scenario.setpoint",
                "must start at or before t = 0",
            ));
        }
        if self.points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::invalid(
                "scenario.setpoint",
                "times must be strictly increasing",
            ));
        }
        if self
            .points
            .iter()
            .any(|(t, y)| !t.is_finite() || !y.is_finite())
        {
            return Err(Error::invalid("scenario.setpoint", "values must be finite"));
        }
        if self.points.len() > 1 && self.points.last().map_or(0.0, |p| p.0) < duration {
            return Err(Error::invalid(
                "scenario.setpoint",
                "must cover the whole batch",
            ));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> f64 {
        let pts = &self.points;
        let k = pts.partition_point(|(tk, _)| *tk <= t);
        if k == 0 {
            return pts[0].1;
        }
        if k == pts.len() {
            return pts[k - 1].1;
        }
        let (t0, y0) = pts[k - 1];
        let (t1, y1) = pts[k];
        y0 + (y1 - y0) * (t - t0) / (t1 - t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceChannel {
    /// Adds to the process output itself; the controlled variable moves.
    #[default]
    Process,
    /// Sensor offset only.
    Measurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    #[default]
    None,
    OutputStep {
        magnitude: f64,
        time: f64,
        #[serde(default)]
        channel: DisturbanceChannel,
    },
}

impl Disturbance {
    fn value(&self, t: f64, channel: DisturbanceChannel) -> f64 {
        match *self {
            Disturbance::OutputStep {
                magnitude,
                time,
                channel: c,
            } if c == channel && t >= time => magnitude,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    #[default]
    None,
    Gaussian {
        std: f64,
        seed: u64,
    },
}

/// How operating points for the model bank are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatingPointSource {
    /// Single-model closed-loop pre-run along the setpoint trajectory; its
    /// power history, smoothed by a centered moving average of
    /// `2·half_window + 1` samples, drives the open-loop simulation that is
    /// linearized.
    Prerun {
        #[serde(default = "default_half_window")]
        half_window: usize,
    },
    /// Open-loop warm-up at a fixed heater power.
    ConstantPower { watts: f64 },
}

fn default_half_window() -> usize {
    6
}

/// Centered moving average, window shrunk at the ends.
pub fn smooth_profile(values: &[f64], half_window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|k| {
            let lo = k.saturating_sub(half_window);
            let hi = (k + half_window + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricBaseline {
    /// Error against the filtered reference y_d.
    #[default]
    Filtered,
    /// Error against the raw setpoint y_sp.
    Raw,
}

/// What the controller acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantModel {
    #[default]
    Nonlinear,
    /// Self-test: the plant is bank model `index`, exactly as discretized.
    Linear { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub setpoint: SetpointProfile,
    /// Batch length, s.
    pub batch_duration: f64,
    pub disturbance: Disturbance,
    pub noise: Noise,
    pub dmc: DmcConfig,
    /// Linearization times, s.
    pub breakpoints: Vec<f64>,
    /// Explicit schedule; defaults to one switch per breakpoint.
    pub schedule: Option<Vec<ScheduleEntry>>,
    pub operating_points: OperatingPointSource,
    pub op_power: OperatingPower,
    pub settle_cap: usize,
    pub plant: PlantParams,
    pub integrator: IntegratorConfig,
    pub initial_state: ReactorState,
    /// Heater power applied before t = 0, W; defaults to the power that
    /// holds the initial jacket temperature.
    pub initial_power: Option<f64>,
    pub metric_baseline: MetricBaseline,
    pub plant_model: PlantModel,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.integrator.validate()?;
        self.dmc.validate()?;
        self.initial_state.validate()?;
        if !(self.batch_duration > 0.0) {
            return Err(Error::invalid(
                "scenario.batch_duration",
                "must be positive",
            ));
        }
        self.setpoint.validate(self.batch_duration)?;
        let ts = self.dmc.ts;
        if (self.integrator.sample_period() - ts).abs() > 1e-9 * ts {
            return Err(Error::invalid(
                "integrator.substeps_per_sample",
                format!(
                    "dt x substeps = {} s must equal the controller period {ts} s",
                    self.integrator.sample_period()
                ),
            ));
        }
        let n = self.batch_duration / ts;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::invalid(
                "scenario.batch_duration",
                "must be a whole number of samples",
            ));
        }
        if let Noise::Gaussian { std, .. } = self.noise {
            if !(std >= 0.0) {
                return Err(Error::invalid("scenario.noise.std", "must be non-negative"));
            }
        }
        if let Some(p) = self.initial_power {
            if !(p >= self.dmc.u_min && p <= self.dmc.u_max) {
                return Err(Error::invalid(
                    "scenario.initial_power",
                    "outside the actuator range",
                ));
            }
        }
        if let OperatingPointSource::ConstantPower { watts } = self.operating_points {
            if !(watts >= 0.0 && watts <= self.plant.p_max) {
                return Err(Error::invalid(
                    "schedule.operating_points.watts",
                    "outside [0, p_max]",
                ));
            }
        }
        if !(self.dmc.u_min >= 0.0 && self.dmc.u_max <= self.plant.p_max) {
            return Err(Error::invalid(
                "dmc.u_max",
                "actuator bounds must lie within [0, p_max]",
            ));
        }
        if self.breakpoints.is_empty() {
            return Err(Error::invalid(
                "schedule.breakpoints",
                "needs at least one breakpoint",
            ));
        }
        if self.breakpoints.iter().any(|t| *t > self.batch_duration) {
            return Err(Error::invalid(
                "schedule.breakpoints",
                "breakpoint beyond the batch",
            ));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.batch_duration / self.dmc.ts).round() as usize
    }

    /// Heater power before t = 0.
    pub fn resolved_initial_power(&self) -> f64 {
        self.initial_power.unwrap_or_else(|| {
            jacket_balance_power(&self.initial_state, &self.plant)
                .clamp(self.dmc.u_min, self.dmc.u_max)
        })
    }

    fn bank_settings(&self) -> BankSettings {
        BankSettings {
            settle_cap: self.settle_cap,
            min_samples: self.dmc.required_samples() + 1,
            op_power: self.op_power,
        }
    }
}

/// One logged sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimRow {
    pub t: f64,
    pub y_sp: f64,
    pub y_d: f64,
    #[serde(rename = "T_true")]
    pub t_true: f64,
    #[serde(rename = "T_meas")]
    pub t_meas: f64,
    #[serde(rename = "T_jacket")]
    pub t_jacket: f64,
    pub x: f64,
    pub i_conc: f64,
    pub u: f64,
    pub du: f64,
    pub active_model: usize,
    pub saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean absolute tracking error, °C.
    pub mae: f64,
    /// Largest absolute tracking error, °C.
    pub max_err: f64,
    pub rmse: f64,
    /// Absolute error at the last sample, °C.
    pub final_err: f64,
    /// Fraction of samples where the input hit a bound.
    pub saturated_fraction: f64,
}

pub fn compute_metrics(rows: &[SimRow], baseline: MetricBaseline) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::Range("no samples to score".into()));
    }
    let err = |r: &SimRow| match baseline {
        MetricBaseline::Filtered => r.t_true - r.y_d,
        MetricBaseline::Raw => r.t_true - r.y_sp,
    };
    let n = rows.len() as f64;
    let mae = rows.iter().map(|r| err(r).abs()).sum::<f64>() / n;
    let max_err = rows.iter().map(|r| err(r).abs()).fold(0.0, f64::max);
    let rmse = (rows.iter().map(|r| err(r).powi(2)).sum::<f64>() / n).sqrt();
    let final_err = err(rows.last().unwrap()).abs();
    let saturated_fraction = rows.iter().filter(|r| r.saturated).count() as f64 / n;
    Ok(Metrics {
        mae,
        max_err,
        rmse,
        final_err,
        saturated_fraction,
    })
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub rows: Vec<SimRow>,
    pub metrics: Metrics,
    pub bank: Vec<LinearModel>,
    /// Sample indices at which the active model changed.
    pub switches: Vec<usize>,
}

/// Model bank for a scenario, following its operating-point source.
pub fn scenario_bank(scenario: &ScenarioConfig) -> Result<Vec<LinearModel>> {
    let n = scenario.n_samples();
    let profile = match scenario.operating_points {
        OperatingPointSource::ConstantPower { watts } => vec![watts; n],
        OperatingPointSource::Prerun { half_window } => {
            let op = OperatingPoint {
                state_s: scenario.initial_state,
                power_s: scenario.resolved_initial_power(),
                time_s: 0.0,
            };
            let model = LinearModel::build(
                &op,
                &scenario.plant,
                scenario.dmc.ts,
                scenario.settle_cap,
                scenario.bank_settings().min_samples,
            )?;
            let pre = ScenarioConfig {
                disturbance: Disturbance::None,
                noise: Noise::None,
                schedule: None,
                plant_model: PlantModel::Nonlinear,
                ..scenario.clone()
            };
            let run = simulate(&pre, vec![model], &Schedule::single(0))?;
            let raw: Vec<f64> = run.rows[..n].iter().map(|r| r.u).collect();
            smooth_profile(&raw, half_window)
        }
    };
    let bank = build_model_bank(
        &scenario.initial_state,
        &profile,
        &scenario.breakpoints,
        &scenario.plant,
        &scenario.integrator,
        scenario.bank_settings(),
    )?;
    Ok(bank)
}

/// Run the closed loop of `scenario`.
pub fn run_closed_loop(scenario: &ScenarioConfig) -> Result<SimResult> {
    scenario.validate()?;
    if scenario.plant.volume_consistency_gap() > 0.01 {
        log::warn!(
            "M0/rho_m*(1+beta) differs from v0 by {:.1} %",
            100.0 * scenario.plant.volume_consistency_gap()
        );
    }
    let bank = scenario_bank(scenario)?;
    let schedule = match &scenario.schedule {
        Some(entries) => Schedule::new(entries.clone(), bank.len())?,
        None => Schedule::from_breakpoints(&scenario.breakpoints)?,
    };
    simulate(scenario, bank, &schedule)
}

/// Closed loop with a prepared bank and schedule.
pub fn simulate(
    scenario: &ScenarioConfig,
    bank: Vec<LinearModel>,
    schedule: &Schedule,
) -> Result<SimResult> {
    let cfg = &scenario.dmc;
    let ts = cfg.ts;
    let n = scenario.n_samples();
    let horizon = cfg.required_samples();
    let gains = bank
        .iter()
        .map(|m| DmcGain::for_model(&m.discrete, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = match scenario.noise {
        Noise::Gaussian { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Noise::None => None,
    };
    let normal = match scenario.noise {
        Noise::Gaussian { std, .. } => Some(
            Normal::new(0.0, std)
                .map_err(|e| Error::invalid("scenario.noise.std", e.to_string()))?,
        ),
        Noise::None => None,
    };

    let mut plant = PlantSim::new(scenario, &bank)?;
    let mut active = schedule.active_model(0.0)?;
    let y0 = plant.output() + scenario.disturbance.value(0.0, DisturbanceChannel::Process);
    let mut ctrl = ControllerState::at_rest(
        &bank[active].discrete,
        scenario.resolved_initial_power(),
        y0,
    );
    let mut rows = Vec::with_capacity(n + 1);
    let mut switches = Vec::new();

    for k in 0..=n {
        let t = k as f64 * ts;
        let y_true = plant.output() + scenario.disturbance.value(t, DisturbanceChannel::Process);
        let noise = match (&mut rng, &normal) {
            (Some(rng), Some(normal)) => normal.sample(rng),
            _ => 0.0,
        };
        let y_meas = y_true
            + scenario
                .disturbance
                .value(t, DisturbanceChannel::Measurement)
            + noise;

        let idx = schedule.active_model(t).map_err(|e| e.at_sample(k))?;
        if idx != active {
            ctrl = switch_model(
                &ctrl,
                &bank[active].discrete,
                &bank[idx].discrete,
                y_meas,
                ctrl.u_prev,
                horizon,
            )
            .map_err(|e| e.at_sample(k))?;
            active = idx;
            switches.push(k);
        }

        let sp_future: Vec<f64> = (1..=horizon)
            .map(|i| scenario.setpoint.at(t + i as f64 * ts))
            .collect();
        let out = control_step(
            &mut ctrl,
            y_meas,
            &sp_future,
            &gains[active],
            &bank[active].discrete,
            cfg,
        )
        .map_err(|e| e.at_sample(k))?;

        let state = plant.state();
        rows.push(SimRow {
            t,
            y_sp: scenario.setpoint.at(t),
            y_d: out.y_d,
            t_true: y_true,
            t_meas: y_meas,
            t_jacket: state.t_jacket - KELVIN,
            x: state.x,
            i_conc: state.i_conc,
            u: out.u,
            du: out.du,
            active_model: active,
            saturated: out.saturated,
        });

        if k < n {
            plant.advance(out.u).map_err(|e| e.at_sample(k))?;
        }
    }

    let metrics = compute_metrics(&rows, scenario.metric_baseline)?;
    Ok(SimResult {
        rows,
        metrics,
        bank,
        switches,
    })
}

enum PlantSim<'a> {
    Nonlinear {
        state: ReactorState,
        params: &'a PlantParams,
        integrator: &'a IntegratorConfig,
    },
    Linear {
        x: DVector<f64>,
        model: &'a LinearModel,
    },
}

impl<'a> PlantSim<'a> {
    fn new(scenario: &'a ScenarioConfig, bank: &'a [LinearModel]) -> Result<Self> {
        Ok(match scenario.plant_model {
            PlantModel::Nonlinear => PlantSim::Nonlinear {
                state: scenario.initial_state,
                params: &scenario.plant,
                integrator: &scenario.integrator,
            },
            PlantModel::Linear { index } => {
                let model = bank.get(index).ok_or_else(|| {
                    Error::Config(format!(
                        "linear plant model {index} not in a bank of {}",
                        bank.len()
                    ))
                })?;
                PlantSim::Linear {
                    x: DVector::zeros(model.discrete.order()),
                    model,
                }
            }
        })
    }

    /// Reactor temperature, °C.
    fn output(&self) -> f64 {
        match self {
            PlantSim::Nonlinear { state, .. } => state.t_reactor - KELVIN,
            PlantSim::Linear { x, model } => model.discrete.output(x),
        }
    }

    fn state(&self) -> ReactorState {
        match self {
            PlantSim::Nonlinear { state, .. } => *state,
            PlantSim::Linear { x, model } => {
                let s = model.op.state_s;
                ReactorState {
                    x: s.x + x[0],
                    i_conc: s.i_conc + x[1],
                    t_reactor: s.t_reactor + x[2],
                    t_jacket: s.t_jacket + x[3],
                }
            }
        }
    }

    fn advance(&mut self, u: f64) -> Result<()> {
        match self {
            PlantSim::Nonlinear {
                state,
                params,
                integrator,
            } => {
                *state = advance_sample(state, u, params, integrator)?.state;
            }
            PlantSim::Linear { x, model } => {
                *x = model.discrete.advance(x, u);
            }
        }
        Ok(())
    }
}
