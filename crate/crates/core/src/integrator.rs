//! Fixed-step RK4 integration of the plant with zero-order-hold inputs.

use nalgebra::{SVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{derivatives, PlantParams, ReactorState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    /// Inner RK4 step, s.
    pub dt: f64,
    /// Inner steps per controller sample.
    pub substeps_per_sample: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            dt: 1.0,
            substeps_per_sample: 10,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(
                "integrator.dt",
                format!("must be positive, got {}", self.dt),
            ));
        }
        if self.substeps_per_sample == 0 {
            return Err(Error::invalid(
                "integrator.substeps_per_sample",
                "must be at least 1",
            ));
        }
        Ok(())
    }

    /// Controller sampling period implied by the inner step.
    pub fn sample_period(&self) -> f64 {
        self.dt * self.substeps_per_sample as f64
    }
}

/// One classical Runge–Kutta step for an autonomous N-dimensional system.
pub fn rk4<const N: usize, F>(deriv: F, y: &SVector<f64, N>, dt: f64) -> Result<SVector<f64, N>>
where
    F: Fn(&SVector<f64, N>) -> Result<SVector<f64, N>>,
{
    let k1 = deriv(y)?;
    let k2 = deriv(&(y + k1 * (0.5 * dt)))?;
    let k3 = deriv(&(y + k2 * (0.5 * dt)))?;
    let k4 = deriv(&(y + k3 * dt))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Result of one plant step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: ReactorState,
    /// Set when x or [I] had to be pulled back into its physical range.
    pub clamped: bool,
}

/// RK4 step of the reactor under constant `power`, followed by a clamp of
/// conversion into [0, 1] and initiator into [0, ∞).
///
/// Intermediate stage states are evaluated with the same clamp applied, so
/// a stage never asks the rate model for a negative concentration.
pub fn rk4_step<F>(deriv: F, state: &ReactorState, power: f64, dt: f64) -> Result<Step>
where
    F: Fn(&ReactorState, f64) -> Result<Vector4<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::invalid(
            "dt",
            format!("step must be positive, got {dt}"),
        ));
    }
    let rhs = |v: &Vector4<f64>| -> Result<Vector4<f64>> {
        let s = ReactorState::from_vector(v);
        let s = ReactorState {
            x: s.x.clamp(0.0, 1.0),
            i_conc: s.i_conc.max(0.0),
            ..s
        };
        if !(s.t_reactor > 0.0 && s.t_jacket > 0.0) {
            return Err(Error::Numeric(format!(
                "stage temperature left the physical range: {s:?}"
            )));
        }
        let d = deriv(&s, power)?;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite derivative {d:?} at state {s:?}"
            )));
        }
        Ok(d)
    };
    let next = ReactorState::from_vector(&rk4(rhs, &state.to_vector(), dt)?);
    let clamped_state = ReactorState {
        x: next.x.clamp(0.0, 1.0),
        i_conc: next.i_conc.max(0.0),
        ..next
    };
    if ![clamped_state.t_reactor, clamped_state.t_jacket]
        .iter()
        .all(|t| t.is_finite() && *t > 0.0)
    {
        return Err(Error::Numeric(format!(
            "temperature left the physical range: {clamped_state:?}"
        )));
    }
    Ok(Step {
        clamped: clamped_state != next,
        state: clamped_state,
    })
}

/// Advance the plant over one controller sample with the input held.
pub fn advance_sample(
    state: &ReactorState,
    power: f64,
    params: &PlantParams,
    cfg: &IntegratorConfig,
) -> Result<Step> {
    let deriv = |s: &ReactorState, p: f64| derivatives(s, p, params);
    let mut s = *state;
    let mut clamped = false;
    for _ in 0..cfg.substeps_per_sample {
        let step = rk4_step(deriv, &s, power, cfg.dt)?;
        clamped |= step.clamped;
        s = step.state;
    }
    Ok(Step { state: s, clamped })
}

/// Open-loop simulation record: one state per sample boundary, `t = 0` first.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopRun {
    pub states: Vec<ReactorState>,
    /// Sample indices (1-based boundary index) at which a clamp occurred.
    pub clamp_events: Vec<usize>,
}

pub fn simulate_open_loop(
    state0: &ReactorState,
    power_profile: &[f64],
    params: &PlantParams,
    cfg: &IntegratorConfig,
) -> Result<OpenLoopRun> {
    if power_profile.is_empty() {
        return Err(Error::Range("power profile is empty".into()));
    }
    cfg.validate()?;
    state0.validate()?;
    if let Some((k, p)) = power_profile
        .iter()
        .enumerate()
        .find(|(_, p)| !(**p >= 0.0 && **p <= params.p_max))
    {
        return Err(Error::Range(format!(
            "power {p} W at sample {k} outside [0, {}]",
            params.p_max
        )));
    }

    let mut states = Vec::with_capacity(power_profile.len() + 1);
    let mut clamp_events = Vec::new();
    states.push(*state0);
    let mut s = *state0;
    for (k, &p) in power_profile.iter().enumerate() {
        let step = advance_sample(&s, p, params, cfg).map_err(|e| e.at_sample(k))?;
        if step.clamped {
            clamp_events.push(k + 1);
        }
        s = step.state;
        states.push(s);
    }
    Ok(OpenLoopRun {
        states,
        clamp_events,
    })
}
