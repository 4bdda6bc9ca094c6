//! Measurements behind the acceptance criteria. Each function returns the
//! measured quantity; callers compare it with the tolerance.

use std::time::{Duration, Instant};

use nalgebra::{Complex, DMatrix, DVector};
use polydmc::config::default_plant;
use polydmc::dmc::{control_step, predict_free_response, ControllerState, DmcConfig, DmcGain};
use polydmc::harness::{
    run_closed_loop, scenario_bank, simulate, Disturbance, MetricBaseline, Noise,
    OperatingPointSource, PlantModel, ScenarioConfig, SetpointProfile, SimResult, SimRow, KELVIN,
};
use polydmc::integrator::{simulate_open_loop, IntegratorConfig};
use polydmc::kinetics::{ccs_rate_constants, PlantParams, ReactorState};
use polydmc::linmodel::{linearize, raw_jacobian, LinearModel, OperatingPoint, OperatingPower};
use polydmc::scheduler::Schedule;

use super::{load, nominal, rel_diff};

const R_GAS: f64 = 8.314;

// ---------------------------------------------------------------- headline

pub struct Headline {
    pub mae_clean: f64,
    pub mae_disturbed: f64,
    pub runtime: Duration,
}

pub fn headline() -> Headline {
    let t0 = Instant::now();
    let clean = run_closed_loop(&nominal()).expect("nominal run");
    let runtime = t0.elapsed();
    let dist = run_closed_loop(&super::disturbed()).expect("disturbed run");
    Headline {
        mae_clean: clean.metrics.mae,
        mae_disturbed: dist.metrics.mae,
        runtime,
    }
}

// ------------------------------------------------------------ DMC oracles

fn first_order(a: f64, b: f64, ts: f64) -> polydmc::linmodel::DiscreteModel {
    polydmc::linmodel::DiscreteModel::from_continuous(
        &DMatrix::from_element(1, 1, a),
        &DVector::from_element(1, b),
        &DVector::from_element(1, 1.0),
        ts,
        0.0,
        0.0,
    )
}

fn dmc_cfg(p: usize, m: usize, r: f64, alpha: f64, u_scale: f64) -> DmcConfig {
    DmcConfig {
        pred_horizon: p,
        ctrl_horizon: m,
        delay: 0,
        q_weights: vec![1.0; p],
        r_weights: vec![r; m],
        alpha_filter: alpha,
        ts: 10.0,
        u_min: -1e12,
        u_max: 1e12,
        du_max: None,
        u_scale,
    }
}

/// Closed loop on an exact LTI plant; returns y(k) − y_sp for every k.
fn lti_loop(
    model: &polydmc::linmodel::DiscreteModel,
    cfg: &DmcConfig,
    setpoint: f64,
    disturbance: f64,
    samples: usize,
) -> Vec<f64> {
    let gain = DmcGain::for_model(model, cfg).expect("gain");
    let mut plant = DVector::zeros(model.order());
    let mut ctrl =
        ControllerState::at_rest(model, model.u_offset, model.output(&plant) + disturbance);
    let sp = vec![setpoint; cfg.required_samples()];
    (0..samples)
        .map(|_| {
            let y = model.output(&plant) + disturbance;
            let out = control_step(&mut ctrl, y, &sp, &gain, model, cfg).expect("control step");
            plant = model.advance(&plant, out.u);
            y - setpoint
        })
        .collect()
}

/// Largest |e| from sample P on for a deadbeat loop (M = P = 5, R = 0).
pub fn deadbeat_error() -> f64 {
    let model = first_order(-0.02, 0.004, 10.0);
    let cfg = dmc_cfg(5, 5, 0.0, 0.0, 1.0);
    let e = lti_loop(&model, &cfg, 1.0, 0.0, 60);
    e[5..].iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// |e| after 200 samples on the first-order plant with a constant output
/// disturbance and R = 0.05.
pub fn offset_free_error() -> f64 {
    let model = first_order(-0.02, 0.004, 10.0);
    let cfg = dmc_cfg(5, 2, 0.05, 0.05, 1.0);
    let e = lti_loop(&model, &cfg, 1.0, 0.5, 201);
    e[200].abs()
}

/// Offset-free check with a prediction window starting `n1` samples ahead.
pub fn delayed_offset_free_error(n1: usize) -> f64 {
    let model = first_order(-0.02, 0.004, 10.0);
    let mut cfg = dmc_cfg(5, 2, 0.05, 0.05, 1.0);
    cfg.delay = n1;
    let e = lti_loop(&model, &cfg, 1.0, 0.5, 201);
    e[200].abs()
}

fn insulated_scenario(settle_cap: usize) -> ScenarioConfig {
    let mut plant = default_plant();
    plant.ua_inf = 0.0;
    plant.ua_o_inf = 0.0;
    let mut sc = nominal();
    sc.plant = plant;
    sc.initial_state = ReactorState {
        x: 0.0,
        i_conc: 0.0,
        t_reactor: 50.0 + KELVIN,
        t_jacket: 50.0 + KELVIN,
    };
    sc.batch_duration = 3000.0;
    sc.setpoint = SetpointProfile {
        points: vec![(0.0, 50.0), (600.0, 55.0), (3000.0, 55.0)],
    };
    sc.breakpoints = vec![0.0];
    sc.schedule = None;
    sc.operating_points = OperatingPointSource::ConstantPower { watts: 0.0 };
    sc.op_power = OperatingPower::Profile;
    sc.initial_power = Some(0.0);
    sc.plant_model = PlantModel::Linear { index: 0 };
    sc.settle_cap = settle_cap;
    sc
}

pub struct NIndependence {
    pub integrating: bool,
    pub n_settle: (usize, usize),
    pub max_du_diff: f64,
}

/// Integrating plant run with settlement caps 200 and 2000.
pub fn n_independence() -> NIndependence {
    let a = run_closed_loop(&insulated_scenario(200)).expect("cap 200");
    let b = run_closed_loop(&insulated_scenario(2000)).expect("cap 2000");
    let max_du_diff = a
        .rows
        .iter()
        .zip(&b.rows)
        .fold(0.0, |m: f64, (r, s)| m.max((r.u - s.u).abs()));
    NIndependence {
        integrating: a.bank[0].is_integrating() && b.bank[0].is_integrating(),
        n_settle: (a.bank[0].n_settle, b.bank[0].n_settle),
        max_du_diff,
    }
}

/// Stable fourth-order test model with thermal-like coupling.
pub fn stable_model() -> polydmc::linmodel::DiscreteModel {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            -0.02, 0.001, 0.0, 0.0, //
            0.0, -0.004, 0.0, 0.0, //
            0.003, 0.5, -0.0064, 0.006, //
            0.0, 0.0, 0.0018, -0.0031,
        ],
    );
    let b = DVector::from_column_slice(&[0.0, 0.0, 0.0, 0.00025]);
    let c = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
    polydmc::linmodel::DiscreteModel::from_continuous(&a, &b, &c, 10.0, 60.0, 200.0)
}

/// Classic truncated convolution y(t+i) = Σ_{k<N} g_{i+k}Δu(t−k) + g_N·U_N
/// against the state rollout, for a long input history.
pub fn convolution_gap(n: usize) -> f64 {
    let model = stable_model();
    let p = 5;
    let history = n + 1000;
    let u: Vec<f64> = (0..history)
        .map(|j| {
            let j = j as f64;
            200.0 + 50.0 * (0.013 * j).sin() + 20.0 * (0.37 * j).sin()
        })
        .collect();
    let mut ctrl = ControllerState::at_rest(&model, model.u_offset, model.y_offset);
    for &uj in &u {
        ctrl.model_state = model.advance(&ctrl.model_state, uj);
    }
    ctrl.u_prev = *u.last().unwrap();
    let rollout = predict_free_response(&ctrl, &model, p);

    let g = model.step_samples(n + p);
    let du = |k: usize| {
        let j = history - k;
        let prev = if j == 0 { model.u_offset } else { u[j - 1] };
        u[j] - prev
    };
    (1..=p)
        .map(|i| {
            let mut y = 0.0;
            for k in 1..n {
                y += g[(i + k).min(n) - 1] * du(k);
            }
            y += g[n - 1] * (u[history - n] - model.u_offset);
            (model.y_offset + y - rollout[i - 1]).abs()
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------- linearization

/// Operating points of the nominal bank plus one mid-ramp point.
pub fn nominal_ops() -> Vec<OperatingPoint> {
    let sc = nominal();
    let mut ops: Vec<OperatingPoint> = scenario_bank(&sc)
        .expect("bank")
        .iter()
        .map(|m| m.op)
        .collect();
    ops.push(OperatingPoint {
        state_s: ReactorState {
            x: 0.35,
            i_conc: 0.02,
            t_reactor: 75.0 + KELVIN,
            t_jacket: 77.0 + KELVIN,
        },
        power_s: 300.0,
        time_s: 5700.0,
    });
    ops
}

/// Worst relative mismatch of Jacobian rows 3–4 against their closed forms.
pub fn thermal_rows_gap(ops: &[OperatingPoint], p: &PlantParams) -> f64 {
    let (mcp, mocpo) = (p.m_cp, p.mo_cpo);
    let mut worst: f64 = 0.0;
    for op in ops {
        let (a, _) = linearize(op, p).expect("linearize");
        let expect = [
            (2, 2, -(p.ua_r + p.ua_inf) / mcp),
            (2, 3, p.ua_r / mcp),
            (3, 0, 0.0),
            (3, 1, 0.0),
            (3, 2, p.ua_r / mocpo),
            (3, 3, -(p.ua_r + p.ua_o_inf) / mocpo),
        ];
        let scale = p.ua_r / mcp;
        for (i, j, v) in expect {
            let gap = if v == 0.0 {
                a[(i, j)].abs() / scale
            } else {
                rel_diff(a[(i, j)], v)
            };
            worst = worst.max(gap);
        }
    }
    worst
}

/// Worst entry-wise change of the finite-difference Jacobian when the step
/// is halved, relative to the entry (floored at 1e-8 of its row maximum).
pub fn richardson_gap(ops: &[OperatingPoint], p: &PlantParams) -> f64 {
    let mut worst: f64 = 0.0;
    for op in ops {
        let (j1, b1) = raw_jacobian(op, p, 1e-6).expect("jacobian h");
        let (j2, b2) = raw_jacobian(op, p, 5e-7).expect("jacobian h/2");
        for i in 0..4 {
            let row_max = (0..4).fold(0.0f64, |m, k| m.max(j2[(i, k)].abs()));
            for k in 0..4 {
                let scale = j2[(i, k)].abs().max(1e-8 * row_max);
                if scale > 0.0 {
                    worst = worst.max((j1[(i, k)] - j2[(i, k)]).abs() / scale);
                }
            }
            let bscale = b2.amax();
            worst = worst.max((b1[i] - b2[i]).abs() / bscale);
        }
    }
    worst
}

/// Monic characteristic polynomial from the eigenvalues, descending powers.
pub fn poly_from_roots(roots: &[Complex<f64>]) -> Vec<f64> {
    let mut c = vec![Complex::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex::new(0.0, 0.0); c.len() + 1];
        for (k, ck) in c.iter().enumerate() {
            next[k] += ck;
            next[k + 1] -= ck * r;
        }
        c = next;
    }
    c.iter().map(|z| z.re).collect()
}

/// Worst coefficient-wise relative gap between tf_den and the eigenvalue
/// product.
pub fn tf_den_gap(bank: &[LinearModel]) -> f64 {
    let mut worst: f64 = 0.0;
    for m in bank {
        let eig: Vec<Complex<f64>> = m.a_mat.complex_eigenvalues().iter().copied().collect();
        let poly = poly_from_roots(&eig);
        for (a, b) in m.tf.den.iter().zip(&poly) {
            worst = worst.max(rel_diff(*a, *b));
        }
    }
    worst
}

// -------------------------------------------------------------- CCS solver

/// Independent CCS solution: bisection on the termination balance.
pub fn ccs_oracle(t: f64, i_conc: f64, phi_p: f64, p: &PlantParams) -> (f64, f64, f64) {
    let d = ((1.0 - phi_p) / (p.ccs_a + p.ccs_b * (1.0 - phi_p))).exp();
    let kd = p.kd0 * (-p.ed / (R_GAS * t)).exp();
    let kp0 = p.kp0_pre * (-p.ep / (R_GAS * t)).exp();
    let kt0 = p.kt0_pre * (-p.et / (R_GAS * t)).exp();
    let src = 2.0 * p.f * kd * i_conc;
    let g = |kt: f64| 1.0 / kt - 1.0 / kt0 - p.theta_t * (src / kt).sqrt() / d;
    let (mut lo, mut hi) = ((kt0 * 1e-30).ln(), kt0.ln());
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if g(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let kt = (0.5 * (lo + hi)).exp();
    let lambda0 = (src / kt).sqrt();
    let kp = 1.0 / (1.0 / kp0 + p.theta_p * lambda0 / d);
    (kt, kp, lambda0)
}

pub fn ccs_grid_gap() -> f64 {
    let p = default_plant();
    let mut worst: f64 = 0.0;
    for t in [313.15, 333.15, 353.15, 373.15] {
        for i_conc in [1e-4, 0.005, 0.03, 0.1] {
            for phi in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
                let r = ccs_rate_constants(t, i_conc, phi, &p).expect("ccs");
                let (kt, kp, l0) = ccs_oracle(t, i_conc, phi, &p);
                worst = worst
                    .max(rel_diff(r.kt, kt))
                    .max(rel_diff(r.kp, kp))
                    .max(rel_diff(r.lambda0, l0));
            }
        }
    }
    worst
}

// -------------------------------------------------------------- integrator

fn open_loop(dt: f64, substeps: usize) -> Vec<ReactorState> {
    let cfg = load("nominal.toml");
    let profile = cfg.open_loop_profile();
    let ic = IntegratorConfig {
        dt,
        substeps_per_sample: substeps,
    };
    simulate_open_loop(
        &cfg.scenario.initial_state,
        &profile,
        &cfg.scenario.plant,
        &ic,
    )
    .expect("open loop")
    .states
}

fn max_scaled_gap(a: &[ReactorState], b: &[ReactorState], i0: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(s, r)| {
            let d = s.to_vector() - r.to_vector();
            d[0].abs()
                .max(d[1].abs() / i0)
                .max(d[2].abs())
                .max(d[3].abs())
        })
        .fold(0.0, f64::max)
}

/// Global error ratio e(h)/e(h/2) for h = 2 s on the nominal open-loop batch,
/// with e(h) = max |y_h − y_{h/2}| over all sample boundaries.
pub fn step_halving_ratio() -> (f64, f64, f64) {
    let i0 = load("nominal.toml").scenario.initial_state.i_conc;
    let h = open_loop(2.0, 5);
    let h2 = open_loop(1.0, 10);
    let h4 = open_loop(0.5, 20);
    let e1 = max_scaled_gap(&h, &h2, i0);
    let e2 = max_scaled_gap(&h2, &h4, i0);
    (e1 / e2, e1, e2)
}

// --------------------------------------------------------------- switching

pub struct Switching {
    pub multi_bounded: bool,
    pub single_bounded: bool,
    pub median_du: f64,
    /// Largest |Δu_multi − Δu_single| at a switch instant.
    pub max_excess: f64,
    /// Largest raw |Δu_multi| at a switch instant.
    pub max_raw: f64,
    /// Largest raw |Δu| of the single-model run at the same instants.
    pub single_raw: f64,
    pub bit_identical: bool,
    pub switches: usize,
}

fn bounded(r: &SimResult) -> bool {
    r.rows
        .iter()
        .all(|row| row.u.is_finite() && (row.t_true - row.y_sp).abs() <= 50.0)
}

fn same_trajectory(a: &[SimRow], b: &[SimRow]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(r, s)| {
            r.t.to_bits() == s.t.to_bits()
                && r.t_true.to_bits() == s.t_true.to_bits()
                && r.t_meas.to_bits() == s.t_meas.to_bits()
                && r.t_jacket.to_bits() == s.t_jacket.to_bits()
                && r.y_d.to_bits() == s.y_d.to_bits()
                && r.u.to_bits() == s.u.to_bits()
                && r.du.to_bits() == s.du.to_bits()
                && r.saturated == s.saturated
        })
}

pub fn switching() -> Switching {
    let sc = nominal();
    let bank = scenario_bank(&sc).expect("bank");
    let multi = simulate(
        &sc,
        bank.clone(),
        &Schedule::from_breakpoints(&sc.breakpoints).unwrap(),
    )
    .expect("multi");
    let mid = Schedule::from_breakpoints(&sc.breakpoints)
        .unwrap()
        .active_model(0.5 * sc.batch_duration)
        .unwrap();
    let single = simulate(&sc, bank.clone(), &Schedule::single(mid)).expect("single");
    let alone =
        simulate(&sc, vec![bank[mid].clone()], &Schedule::single(0)).expect("single-model bank");

    let mut du: Vec<f64> = multi.rows.iter().map(|r| r.du.abs()).collect();
    du.sort_by(f64::total_cmp);
    let median_du = du[du.len() / 2];
    let max_excess = multi
        .switches
        .iter()
        .map(|&k| (multi.rows[k].du - single.rows[k].du).abs())
        .fold(0.0, f64::max);
    let max_raw = multi
        .switches
        .iter()
        .map(|&k| multi.rows[k].du.abs())
        .fold(0.0, f64::max);
    let single_raw = multi
        .switches
        .iter()
        .map(|&k| single.rows[k].du.abs())
        .fold(0.0, f64::max);
    Switching {
        multi_bounded: bounded(&multi),
        single_bounded: bounded(&single),
        median_du,
        max_excess,
        max_raw,
        single_raw,
        bit_identical: same_trajectory(&single.rows, &alone.rows),
        switches: multi.switches.len(),
    }
}

// ------------------------------------------------------------- scenarios

/// Nominal plant with the controller acting on bank model 0 itself.
pub fn linear_self_test() -> SimResult {
    let mut sc = nominal();
    sc.setpoint = SetpointProfile::constant(55.0);
    sc.batch_duration = 3000.0;
    sc.breakpoints = vec![0.0];
    sc.plant_model = PlantModel::Linear { index: 0 };
    sc.metric_baseline = MetricBaseline::Filtered;
    sc.disturbance = Disturbance::None;
    sc.noise = Noise::None;
    run_closed_loop(&sc).expect("self-test run")
}
