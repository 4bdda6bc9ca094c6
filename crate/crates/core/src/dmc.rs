//! Modified Dynamic Matrix Control.
//!
//! The controller keeps the step-response dynamic matrix G₊ only for the
//! closed-form gain K = (G₊ᵀQG₊ + R)⁻¹G₊ᵀQ. The free response (the effect of
//! past inputs on future outputs) is obtained by rolling the internal
//! discrete model forward with all future moves set to zero, so nothing
//! depends on a truncated step-response length N.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::DiscreteModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmcConfig {
    /// Prediction horizon P, samples.
    pub pred_horizon: usize,
    /// Control horizon M, samples.
    pub ctrl_horizon: usize,
    /// Pure delay N1, samples.
    #[serde(default)]
    pub delay: usize,
    /// Diagonal of Q (length P).
    pub q_weights: Vec<f64>,
    /// Diagonal of R (length M), in (°C / move unit)².
    pub r_weights: Vec<f64>,
    /// Reference filter pole.
    pub alpha_filter: f64,
    /// Sampling period, s.
    pub ts: f64,
    /// Actuator bounds, W per heater.
    pub u_min: f64,
    pub u_max: f64,
    /// Optional bound on |Δu| per sample, W.
    #[serde(default)]
    pub du_max: Option<f64>,
    /// Watts per move unit in which R is expressed.
    #[serde(default = "unit_scale")]
    pub u_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl DmcConfig {
    pub fn validate(&self) -> Result<()> {
        let (p, m) = (self.pred_horizon, self.ctrl_horizon);
        if m < 1 || m > p {
            return Err(Error::invalid(
                "dmc.ctrl_horizon",
                format!("need 1 <= M <= P, got M = {m}, P = {p}"),
            ));
        }
        if self.q_weights.len() != p {
            return Err(Error::invalid(
                "dmc.q_weights",
                format!("expected {p} values, got {}", self.q_weights.len()),
            ));
        }
        if self.r_weights.len() != m {
            return Err(Error::invalid(
                "dmc.r_weights",
                format!("expected {m} values, got {}", self.r_weights.len()),
            ));
        }
        if self.q_weights.iter().any(|q| !(*q >= 0.0)) || !self.q_weights.iter().any(|q| *q > 0.0) {
            return Err(Error::invalid(
                "dmc.q_weights",
                "must be non-negative with at least one positive",
            ));
        }
        if self.r_weights.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::invalid("dmc.r_weights", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.alpha_filter) {
            return Err(Error::invalid(
                "dmc.alpha_filter",
                format!("{} outside [0, 1)", self.alpha_filter),
            ));
        }
        if !(self.ts > 0.0) {
            return Err(Error::invalid(
                "dmc.ts",
                format!("must be positive, got {}", self.ts),
            ));
        }
        if !(self.u_min <= self.u_max) {
            return Err(Error::invalid("dmc.u_max", "u_max must not be below u_min"));
        }
        if let Some(du) = self.du_max {
            if !(du > 0.0) {
                return Err(Error::invalid(
                    "dmc.du_max",
                    format!("must be positive, got {du}"),
                ));
            }
        }
        if !(self.u_scale > 0.0) {
            return Err(Error::invalid(
                "dmc.u_scale",
                format!("must be positive, got {}", self.u_scale),
            ));
        }
        Ok(())
    }

    /// Move weights converted to watts: R_W = R / u_scale².
    pub fn r_weights_watts(&self) -> Vec<f64> {
        let s2 = self.u_scale * self.u_scale;
        self.r_weights.iter().map(|r| r / s2).collect()
    }

    /// Number of step samples the gain needs.
    pub fn required_samples(&self) -> usize {
        self.delay + self.pred_horizon
    }
}

/// Precomputed controller gain.
#[derive(Debug, Clone, PartialEq)]
pub struct DmcGain {
    /// K_DMC, M×P.
    pub k_mat: DMatrix<f64>,
    /// G₊, P×M.
    pub g_plus: DMatrix<f64>,
}

impl DmcGain {
    /// Dynamic matrix and gain for a model's step response under `cfg`.
    pub fn for_model(model: &DiscreteModel, cfg: &DmcConfig) -> Result<Self> {
        let g = model.step_samples(cfg.required_samples());
        let g_plus = build_dynamic_matrix(&g, cfg.pred_horizon, cfg.ctrl_horizon, cfg.delay)?;
        compute_gain(&g_plus, &cfg.q_weights, &cfg.r_weights_watts())
    }
}

/// Mutable per-loop controller memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// Deviation state of the internal model, predicted for the current sample.
    pub model_state: DVector<f64>,
    /// Last applied input, W.
    pub u_prev: f64,
    /// Filtered reference at the current sample, °C.
    pub yd_prev: f64,
    /// Latest output disturbance estimate, °C.
    pub d_est: f64,
}

impl ControllerState {
    /// Controller at rest on `model`'s operating point.
    pub fn at_rest(model: &DiscreteModel, u_prev: f64, y_meas: f64) -> Self {
        let model_state = DVector::zeros(model.order());
        let d_est = y_meas - model.output(&model_state);
        ControllerState {
            model_state,
            u_prev,
            yd_prev: y_meas,
            d_est,
        }
    }
}

/// Toeplitz dynamic matrix. Row i is the prediction at t+N1+i, column j the
/// move at t+j−1 (both 1-based), so G₊[i][j] = g_{N1+i−j+1}, zero when that
/// index falls below 1.
pub fn build_dynamic_matrix(g: &[f64], p: usize, m: usize, n1: usize) -> Result<DMatrix<f64>> {
    if g.len() < n1 + p {
        return Err(Error::Range(format!(
            "dynamic matrix needs {} step samples, got {}",
            n1 + p,
            g.len()
        )));
    }
    if m == 0 || m > p {
        return Err(Error::Config(format!(
            "control horizon {m} must lie in 1..={p}"
        )));
    }
    Ok(DMatrix::from_fn(p, m, |i, j| {
        if n1 + i >= j {
            g[n1 + i - j]
        } else {
            0.0
        }
    }))
}

/// K = (G₊ᵀQG₊ + R)⁻¹G₊ᵀQ through a Cholesky solve of the M×M normal matrix.
pub fn compute_gain(
    g_plus: &DMatrix<f64>,
    q_weights: &[f64],
    r_weights: &[f64],
) -> Result<DmcGain> {
    let (p, m) = g_plus.shape();
    if q_weights.len() != p || r_weights.len() != m {
        return Err(Error::Config(format!(
            "weights sized {}/{} do not match a {p}x{m} dynamic matrix",
            q_weights.len(),
            r_weights.len()
        )));
    }
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(q_weights));
    let gtq = g_plus.transpose() * &q;
    let mut h = &gtq * g_plus;
    for (i, r) in r_weights.iter().enumerate() {
        h[(i, i)] += r;
    }
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularGain(format!("G+^T Q G+ + R = {h}")))?;
    let k_mat = chol.solve(&gtq);
    if k_mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularGain("non-finite gain entries".into()));
    }
    Ok(DmcGain {
        k_mat,
        g_plus: g_plus.clone(),
    })
}

/// Filtered reference y_d(t+1)…y_d(t+n) from y_d(t) = `yd_prev` and the
/// future setpoints y_sp(t+1)…y_sp(t+n).
pub fn reference_trajectory(yd_prev: f64, y_sp_future: &[f64], alpha: f64) -> Vec<f64> {
    let mut yd = yd_prev;
    y_sp_future
        .iter()
        .map(|sp| {
            yd = alpha * yd + (1.0 - alpha) * sp;
            yd
        })
        .collect()
}

/// Free response y(t+1)…y(t+n): the internal model rolled forward with the
/// input held at the last applied value.
pub fn predict_free_response(ctrl: &ControllerState, model: &DiscreteModel, n: usize) -> Vec<f64> {
    let mut x = ctrl.model_state.clone();
    (0..n)
        .map(|_| {
            x = model.advance(&x, ctrl.u_prev);
            model.output(&x)
        })
        .collect()
}

/// Per-sample controller diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    /// Applied input, W.
    pub u: f64,
    /// Applied move u − u_prev, W.
    pub du: f64,
    /// Move requested by the unconstrained law, W.
    pub du_requested: f64,
    /// Input clamped to the actuator or rate bounds.
    pub saturated: bool,
    /// Disturbance estimate used for this step, °C.
    pub d_est: f64,
    /// Filtered reference at the current sample, °C.
    pub y_d: f64,
}

/// One receding-horizon step.
///
/// `y_sp_future` holds the setpoints y_sp(t+1)…y_sp(t+N1+P).
pub fn control_step(
    ctrl: &mut ControllerState,
    y_meas: f64,
    y_sp_future: &[f64],
    gain: &DmcGain,
    model: &DiscreteModel,
    cfg: &DmcConfig,
) -> Result<ControlOutput> {
    if !y_meas.is_finite() {
        return Err(Error::Numeric(format!(
            "measurement {y_meas} is not finite"
        )));
    }
    let (p, m, n1) = (cfg.pred_horizon, cfg.ctrl_horizon, cfg.delay);
    if gain.k_mat.shape() != (m, p) {
        return Err(Error::Config(format!(
            "gain is {}x{}, configuration needs {m}x{p}",
            gain.k_mat.nrows(),
            gain.k_mat.ncols()
        )));
    }
    if model.order() != ctrl.model_state.len() {
        return Err(Error::Config(format!(
            "controller state has {} entries, model has order {}",
            ctrl.model_state.len(),
            model.order()
        )));
    }
    if y_sp_future.len() < n1 + p {
        return Err(Error::Range(format!(
            "need {} future setpoints, got {}",
            n1 + p,
            y_sp_future.len()
        )));
    }

    let y_d = ctrl.yd_prev;
    let d_est = y_meas - model.output(&ctrl.model_state);
    let reference = reference_trajectory(ctrl.yd_prev, &y_sp_future[..n1 + p], cfg.alpha_filter);
    let free = predict_free_response(ctrl, model, n1 + p);
    let error = DVector::from_iterator(p, (n1..n1 + p).map(|i| reference[i] - (free[i] + d_est)));
    let moves = &gain.k_mat * error;

    let du_requested = moves[0];
    let mut du = du_requested;
    if let Some(limit) = cfg.du_max {
        du = du.clamp(-limit, limit);
    }
    let u = (ctrl.u_prev + du).clamp(cfg.u_min, cfg.u_max);
    let saturated = u != ctrl.u_prev + du_requested;
    let du = u - ctrl.u_prev;

    ctrl.model_state = model.advance(&ctrl.model_state, u);
    ctrl.u_prev = u;
    ctrl.yd_prev = reference[0];
    ctrl.d_est = d_est;

    Ok(ControlOutput {
        u,
        du,
        du_requested,
        saturated,
        d_est,
        y_d,
    })
}
