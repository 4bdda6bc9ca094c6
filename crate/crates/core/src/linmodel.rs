//! Sequential linearization of the reactor along a trajectory.
//!
//! Each local model is the Jacobian pair (A, b) at an operating point, the
//! heater-power → reactor-temperature transfer function obtained from it,
//! and its zero-order-hold step response at the controller sampling period.

use nalgebra::{DMatrix, DVector, Matrix4, RowVector4, SMatrix, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{simulate_open_loop, IntegratorConfig};
use crate::kinetics::{derivatives, jacket_balance_power, PlantParams, ReactorState};

/// Default cap on the settlement length N of a step response.
pub const DEFAULT_SETTLE_CAP: usize = 2000;
const SETTLE_TOL: f64 = 1e-4;
const REL_STEP: f64 = 1e-6;
const ABS_STEP: f64 = 1e-9;

/// Linearization point (absolute units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub state_s: ReactorState,
    /// Heater power per heater, W.
    pub power_s: f64,
    /// Time into the batch, s.
    pub time_s: f64,
}

/// Output selector: deviation reactor temperature.
pub fn output_selector() -> RowVector4<f64> {
    RowVector4::new(0.0, 0.0, 1.0, 0.0)
}

/// Heat-transfer-only entries of the thermal rows of the Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalEntries {
    pub a33: f64,
    pub a34: f64,
    pub a43: f64,
    pub a44: f64,
    pub b4: f64,
}

impl ThermalEntries {
    pub fn new(params: &PlantParams) -> Self {
        ThermalEntries {
            a33: -(params.ua_r + params.ua_inf) / params.m_cp,
            a34: params.ua_r / params.m_cp,
            a43: params.ua_r / params.mo_cpo,
            a44: -(params.ua_r + params.ua_o_inf) / params.mo_cpo,
            b4: 2.0 * params.alpha_heater / params.mo_cpo,
        }
    }
}

/// Finite-difference Jacobian of the plant at `op`, before the thermal
/// diagonal is replaced by its heat-transfer form.
///
/// Central differences with step `rel_step·|s|` (at least 1e-9 in state
/// units); the initiator column falls back to a forward difference when
/// the backward point would be a negative concentration.
pub fn raw_jacobian(
    op: &OperatingPoint,
    params: &PlantParams,
    rel_step: f64,
) -> Result<(Matrix4<f64>, Vector4<f64>)> {
    let s0 = op.state_s.to_vector();
    let eval = |v: &Vector4<f64>, p: f64, entry: &str| -> Result<Vector4<f64>> {
        derivatives(&ReactorState::from_vector(v), p, params).map_err(|e| {
            Error::Numeric(format!(
                "derivative evaluation failed while differentiating {entry}: {e}"
            ))
        })
    };

    let mut a = Matrix4::zeros();
    for j in 0..4 {
        let h = (rel_step * s0[j].abs()).max(ABS_STEP);
        let mut up = s0;
        up[j] += h;
        let f_up = eval(&up, op.power_s, &format!("column {}", j + 1))?;
        let col = if j == 1 && s0[j] - h < 0.0 {
            let f0 = eval(&s0, op.power_s, "column 2")?;
            (f_up - f0) / h
        } else {
            let mut dn = s0;
            dn[j] -= h;
            let f_dn = eval(&dn, op.power_s, &format!("column {}", j + 1))?;
            (f_up - f_dn) / (2.0 * h)
        };
        a.set_column(j, &col);
    }

    let hp = (rel_step * op.power_s.abs()).max(ABS_STEP);
    let b = (eval(&s0, op.power_s + hp, "input column")?
        - eval(&s0, op.power_s - hp, "input column")?)
        / (2.0 * hp);
    Ok((a, b))
}

/// Jacobian pair (A, b) of the plant at `op`.
///
/// All entries come from central finite differences of
/// [`derivatives`], except the reactor-temperature diagonal, which keeps
/// only its heat-transfer part −(UA_r + UA_∞)/(m·C_p). The temperature
/// sensitivity of the reaction heat is left out of the local model and
/// reported separately by [`reaction_heat_sensitivity`].
pub fn linearize(
    op: &OperatingPoint,
    params: &PlantParams,
) -> Result<(Matrix4<f64>, Vector4<f64>)> {
    op.state_s.validate()?;
    let (mut a, b) = raw_jacobian(op, params, REL_STEP)?;
    a[(2, 2)] = ThermalEntries::new(params).a33;
    Ok((a, b))
}

/// ∂(reaction heat)/∂T / (m·C_p) at `op`, 1/s.
pub fn reaction_heat_sensitivity(op: &OperatingPoint, params: &PlantParams) -> Result<f64> {
    let (a, _) = raw_jacobian(op, params, REL_STEP)?;
    Ok(a[(2, 2)] - ThermalEntries::new(params).a33)
}

/// Transfer function T′(s)/P′(s) in descending powers of s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    /// Numerator coefficients of s³, s², s, 1.
    pub num: [f64; 4],
    /// Denominator coefficients of s⁴ … 1 (monic).
    pub den: [f64; 5],
}

impl TransferFunction {
    /// (n₃, n₄, n₅): the quadratic numerator.
    pub fn quadratic_num(&self) -> [f64; 3] {
        [self.num[1], self.num[2], self.num[3]]
    }
}

/// Characteristic polynomial and adjugate terms by the Faddeev–LeVerrier
/// recurrence: returns the monic coefficients (descending) and the
/// matrices N₀…N₃ with adj(sI − A) = Σ s^{3−k} N_k.
pub fn faddeev_leverrier(a: &Matrix4<f64>) -> ([f64; 5], [Matrix4<f64>; 4]) {
    let mut coeffs = [0.0; 5];
    coeffs[0] = 1.0;
    let mut terms = [Matrix4::identity(); 4];
    let mut n = Matrix4::identity();
    for k in 1..=4 {
        let an = a * n;
        let c = -an.trace() / k as f64;
        coeffs[k] = c;
        if k < 4 {
            n = an + Matrix4::identity() * c;
            terms[k] = n;
        }
    }
    (coeffs, terms)
}

/// State space → transfer function via Faddeev–LeVerrier.
pub fn ss_to_tf(a: &Matrix4<f64>, b: &Vector4<f64>, c: &RowVector4<f64>) -> TransferFunction {
    let (den, terms) = faddeev_leverrier(a);
    let mut num = [0.0; 4];
    for (k, nk) in terms.iter().enumerate() {
        num[k] = (c * nk * b)[0];
    }
    TransferFunction { num, den }
}

/// Zero-order-hold discretization (Φ, Γ) of an n-state single-input system,
/// from the exponential of the augmented matrix [[A, b], [0, 0]]·Ts.
pub fn discretize_zoh(a: &DMatrix<f64>, b: &DVector<f64>, ts: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, 1)).copy_from(b);
    let e = (aug * ts).exp();
    let phi = e.view((0, 0), (n, n)).into_owned();
    let gamma = e.view((0, n), (n, 1)).column(0).into_owned();
    (phi, gamma)
}

/// Sampled unit-step response of a discrete model.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResponse {
    /// g₁ … g_n.
    pub samples: Vec<f64>,
    /// Steady-state gain; `None` for integrating models.
    pub dc_gain: Option<f64>,
}

impl StepResponse {
    pub fn is_integrating(&self) -> bool {
        self.dc_gain.is_none()
    }
}

/// Step-response samples g₁…g_n of (A, b, c) at period `ts` and the dc gain
/// −c·A⁻¹·b. A singular A (pure integrator) is flagged by `dc_gain = None`.
pub fn step_response(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
    ts: f64,
    n: usize,
) -> Result<StepResponse> {
    if !(ts > 0.0) {
        return Err(Error::invalid(
            "ts",
            format!("sampling period must be positive, got {ts}"),
        ));
    }
    let (phi, gamma) = discretize_zoh(a, b, ts);
    let samples = step_samples(&phi, &gamma, c, n);
    Ok(StepResponse {
        samples,
        dc_gain: dc_gain(a, b, c),
    })
}

pub(crate) fn step_samples(
    phi: &DMatrix<f64>,
    gamma: &DVector<f64>,
    c: &DVector<f64>,
    n: usize,
) -> Vec<f64> {
    let mut x = DVector::zeros(phi.nrows());
    (0..n)
        .map(|_| {
            x = phi * &x + gamma;
            c.dot(&x)
        })
        .collect()
}

fn dc_gain(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> Option<f64> {
    let scale = a.amax();
    if scale == 0.0 {
        return None;
    }
    let lu = a.clone().lu();
    // relative pivot test; exact singularity shows up as a zero pivot
    let min_pivot = lu
        .u()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_pivot <= 1e-14 * scale {
        return None;
    }
    let x = lu.solve(b)?;
    let g = -c.dot(&x);
    g.is_finite().then_some(g)
}

/// First k (1-based) with |g_k − dc| < 1e-4·|dc|, capped at `cap`.
pub fn settle_length(resp: &StepResponse, cap: usize) -> usize {
    let Some(dc) = resp.dc_gain else {
        return cap;
    };
    resp.samples
        .iter()
        .take(cap)
        .position(|g| (g - dc).abs() < SETTLE_TOL * dc.abs())
        .map_or(cap, |k| k + 1)
}

/// Discrete-time internal model used by the predictive controller.
///
/// Deviation states evolve as x⁺ = Φx + Γ(u − u_offset); the absolute
/// output is y_offset + c·x.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub phi: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub c: DVector<f64>,
    /// Output at zero deviation, °C.
    pub y_offset: f64,
    /// Input at zero deviation, W.
    pub u_offset: f64,
    /// Absolute state at zero deviation; zeros when unknown.
    pub state_offset: DVector<f64>,
    pub ts: f64,
}

impl DiscreteModel {
    /// ZOH discretization of a continuous single-input single-output model.
    pub fn from_continuous(
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        c: &DVector<f64>,
        ts: f64,
        y_offset: f64,
        u_offset: f64,
    ) -> Self {
        let (phi, gamma) = discretize_zoh(a, b, ts);
        let n = phi.nrows();
        DiscreteModel {
            phi,
            gamma,
            c: c.clone(),
            y_offset,
            u_offset,
            state_offset: DVector::zeros(n),
            ts,
        }
    }

    pub fn with_state_offset(mut self, offset: DVector<f64>) -> Self {
        assert_eq!(offset.len(), self.order(), "state offset length");
        self.state_offset = offset;
        self
    }

    pub fn order(&self) -> usize {
        self.phi.nrows()
    }

    pub fn output(&self, x: &DVector<f64>) -> f64 {
        self.y_offset + self.c.dot(x)
    }

    pub fn advance(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        &self.phi * x + &self.gamma * (u - self.u_offset)
    }

    /// Step-response samples g₁…g_n.
    pub fn step_samples(&self, n: usize) -> Vec<f64> {
        step_samples(&self.phi, &self.gamma, &self.c, n)
    }
}

/// One local model of the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub op: OperatingPoint,
    pub a_mat: Matrix4<f64>,
    pub b_vec: Vector4<f64>,
    pub c_vec: RowVector4<f64>,
    pub tf: TransferFunction,
    /// g₁ … g_N at the sampling period, °C per W.
    pub step_resp: Vec<f64>,
    /// Steady-state gain, °C per W; `None` when the model integrates.
    pub dc_gain: Option<f64>,
    /// Settlement length N.
    pub n_settle: usize,
    /// Largest real part among the eigenvalues of A, 1/s.
    pub max_real_eig: f64,
    /// Reaction-heat temperature sensitivity left out of a₃₃, 1/s.
    pub a33_reaction: f64,
    pub discrete: DiscreteModel,
}

impl LinearModel {
    /// Linearize at `op`, discretize at `ts` and sample the step response.
    /// At least `min_samples` step samples are kept even when the response
    /// settles earlier.
    pub fn build(
        op: &OperatingPoint,
        params: &PlantParams,
        ts: f64,
        settle_cap: usize,
        min_samples: usize,
    ) -> Result<Self> {
        let (a_mat, b_vec) = linearize(op, params)?;
        let a33_reaction = reaction_heat_sensitivity(op, params)?;
        let c_vec = output_selector();
        let tf = ss_to_tf(&a_mat, &b_vec, &c_vec);

        let a = DMatrix::from_iterator(4, 4, a_mat.iter().copied());
        let b = DVector::from_iterator(4, b_vec.iter().copied());
        let c = DVector::from_iterator(4, c_vec.iter().copied());
        let discrete = DiscreteModel::from_continuous(
            &a,
            &b,
            &c,
            ts,
            op.state_s.t_reactor - 273.15,
            op.power_s,
        )
        .with_state_offset(DVector::from_iterator(
            4,
            op.state_s.to_vector().iter().copied(),
        ));
        let cap = settle_cap.max(1);
        let full = StepResponse {
            samples: discrete.step_samples(cap.max(min_samples)),
            dc_gain: dc_gain(&a, &b, &c),
        };
        let n_settle = settle_length(&full, cap);
        let keep = n_settle.max(min_samples);
        let max_real_eig = a_mat
            .complex_eigenvalues()
            .iter()
            .fold(f64::NEG_INFINITY, |m, z| m.max(z.re));
        if max_real_eig > 1e-9 {
            log::warn!(
                "local model at t = {} s has an unstable mode (max Re λ = {max_real_eig:.3e} 1/s)",
                op.time_s
            );
        }

        Ok(LinearModel {
            op: *op,
            a_mat,
            b_vec,
            c_vec,
            tf,
            step_resp: full.samples[..keep].to_vec(),
            dc_gain: full.dc_gain,
            n_settle,
            max_real_eig,
            a33_reaction,
            discrete,
        })
    }

    pub fn is_integrating(&self) -> bool {
        self.dc_gain.is_none()
    }
}

/// Sampling layout shared by bank construction and the closed loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankSettings {
    pub settle_cap: usize,
    /// Minimum number of step samples kept per model.
    pub min_samples: usize,
    pub op_power: OperatingPower,
}

/// How the input of each operating point is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatingPower {
    /// The power that holds the jacket temperature at the captured state,
    /// clamped to [0, p_max]. The local model then has no jacket drift.
    #[default]
    JacketBalance,
    /// The profile power applied at the breakpoint sample.
    Profile,
}

/// Simulate the plant open-loop under `power_profile` (one power per
/// sample) and linearize at every breakpoint. Breakpoints are batch times
/// in seconds and must fall on sample boundaries.
pub fn build_model_bank(
    state0: &ReactorState,
    power_profile: &[f64],
    breakpoints: &[f64],
    params: &PlantParams,
    cfg: &IntegratorConfig,
    settings: BankSettings,
) -> Result<Vec<LinearModel>> {
    if breakpoints.is_empty() {
        return Err(Error::Config(
            "model bank needs at least one breakpoint".into(),
        ));
    }
    if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config(
            "breakpoints must be strictly increasing".into(),
        ));
    }
    let ts = cfg.sample_period();
    let horizon = power_profile.len() as f64 * ts;
    let mut indices = Vec::with_capacity(breakpoints.len());
    for &t in breakpoints {
        if !(t >= 0.0) || t > horizon + 1e-9 {
            return Err(Error::Range(format!(
                "breakpoint {t} s outside the simulated horizon [0, {horizon}] s"
            )));
        }
        let k = (t / ts).round();
        if (k * ts - t).abs() > 1e-6 * ts.max(1.0) {
            return Err(Error::Config(format!(
                "breakpoint {t} s is not a multiple of the sampling period {ts} s"
            )));
        }
        indices.push(k as usize);
    }

    let run = simulate_open_loop(state0, power_profile, params, cfg)?;
    indices
        .iter()
        .map(|&k| {
            let state_s = run.states[k];
            let power_s = match settings.op_power {
                OperatingPower::Profile => power_profile[k.min(power_profile.len() - 1)],
                OperatingPower::JacketBalance => {
                    jacket_balance_power(&state_s, params).clamp(0.0, params.p_max)
                }
            };
            let op = OperatingPoint {
                state_s,
                power_s,
                time_s: k as f64 * ts,
            };
            LinearModel::build(&op, params, ts, settings.settle_cap, settings.min_samples)
                .map_err(|e| e.at_sample(k))
        })
        .collect()
}

/// Convert a fixed 4×4 matrix to a dynamic one.
pub fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}
