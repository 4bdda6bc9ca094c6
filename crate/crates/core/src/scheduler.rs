//! Time-scheduled switching between the local models of the bank.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dmc::ControllerState;
use crate::error::{Error, Result};
use crate::linmodel::DiscreteModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    /// Batch time at which the model becomes active, s.
    pub switch_time: f64,
    pub model_index: usize,
}

/// Piecewise-constant model schedule, right-continuous at each switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    entries: Vec<ScheduleEntry>,
}

impl Schedule {
    pub fn new(entries: Vec<ScheduleEntry>, bank_len: usize) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Config("schedule is empty".into()))?;
        if first.switch_time != 0.0 {
            return Err(Error::Config(format!(
                "first schedule entry must start at t = 0, got {}",
                first.switch_time
            )));
        }
        if entries
            .windows(2)
            .any(|w| !(w[1].switch_time > w[0].switch_time))
        {
            return Err(Error::Config(
                "schedule switch times must be strictly increasing".into(),
            ));
        }
        if let Some(e) = entries.iter().find(|e| e.model_index >= bank_len) {
            return Err(Error::Config(format!(
                "schedule refers to model {} but the bank has {bank_len}",
                e.model_index
            )));
        }
        Ok(Schedule { entries })
    }

    /// One entry per breakpoint: model k is active from breakpoint k on.
    pub fn from_breakpoints(breakpoints: &[f64]) -> Result<Self> {
        let entries = breakpoints
            .iter()
            .enumerate()
            .map(|(model_index, &switch_time)| ScheduleEntry {
                switch_time,
                model_index,
            })
            .collect();
        Schedule::new(entries, breakpoints.len())
    }

    /// Use a single model for the whole batch.
    pub fn single(model_index: usize) -> Self {
        Schedule {
            entries: vec![ScheduleEntry {
                switch_time: 0.0,
                model_index,
            }],
        }
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// Index of the model active at time `t`.
    pub fn active_model(&self, t: f64) -> Result<usize> {
        if self.entries.is_empty() {
            return Err(Error::Config("schedule is empty".into()));
        }
        if !(t >= 0.0) {
            return Err(Error::Range(format!(
                "schedule queried at negative time {t}"
            )));
        }
        let n = self.entries.partition_point(|e| e.switch_time <= t);
        Ok(self.entries[n.max(1) - 1].model_index)
    }
}

/// Hand the controller over from `old` to `new`.
///
/// The old internal state is first re-expressed around the new operating
/// point (same absolute state). It is then corrected by the minimum-norm
/// change that matches the current predicted output exactly and fits the
/// new model's free response over `horizon` samples to the old one in the
/// least-squares sense. The applied input is carried over unchanged, so u
/// is continuous across the switch, and the disturbance estimate is
/// recomputed against the new model.
pub fn switch_model(
    ctrl: &ControllerState,
    old: &DiscreteModel,
    new: &DiscreteModel,
    y_meas: f64,
    u_prev: f64,
    horizon: usize,
) -> Result<ControllerState> {
    if (old.ts - new.ts).abs() > 1e-12 * old.ts.abs().max(1.0) {
        return Err(Error::Config(format!(
            "cannot switch between models sampled at {} s and {} s",
            old.ts, new.ts
        )));
    }
    if old.order() != new.order() {
        return Err(Error::Config(format!(
            "cannot switch between models of order {} and {}",
            old.order(),
            new.order()
        )));
    }
    let cc = new.c.dot(&new.c);
    if cc == 0.0 {
        return Err(Error::Config("new model has no output".into()));
    }
    let n = new.order();

    let mut state = &old.state_offset + &ctrl.model_state - &new.state_offset;
    let y_pred = old.output(&ctrl.model_state);
    state += &new.c * ((y_pred - new.output(&state)) / cc);

    if horizon > 0 {
        // Corrections confined to the null space of c keep the output fixed.
        let proj = DMatrix::identity(n, n) - &new.c * new.c.transpose() / cc;
        let mut obs = DMatrix::zeros(horizon, n);
        let mut resid = DVector::zeros(horizon);
        let mut x_old = ctrl.model_state.clone();
        let mut x_new = state.clone();
        let mut phi_pow = proj.clone();
        for i in 0..horizon {
            x_old = old.advance(&x_old, u_prev);
            x_new = new.advance(&x_new, u_prev);
            phi_pow = &new.phi * phi_pow;
            obs.row_mut(i).copy_from(&(new.c.transpose() * &phi_pow));
            resid[i] = old.output(&x_old) - new.output(&x_new);
        }
        let svd = obs.svd(true, true);
        let tol = 1e-9 * svd.singular_values.max();
        let z = svd
            .solve(&resid, tol)
            .map_err(|e| Error::Numeric(format!("switch fit: {e}")))?;
        state += &proj * z;
    }

    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite state after model switch".into()));
    }
    let d_est = y_meas - new.output(&state);
    Ok(ControllerState {
        model_state: state,
        u_prev,
        yd_prev: ctrl.yd_prev,
        d_est,
    })
}
