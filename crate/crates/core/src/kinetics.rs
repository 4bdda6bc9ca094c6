//! Nonlinear model of the batch solution polymerization reactor.
//!
//! Four lumped states close the model: monomer conversion, initiator
//! concentration, reactor temperature and jacket-oil temperature. The
//! propagation and termination constants carry the CCS diffusion
//! corrections (gel and glass effects), and the initiator balance includes
//! the volume shrinkage that accompanies conversion.
//!
//! Units: concentrations in mol/L, temperatures in K, time in s, powers in W.
//! Densities are g/cm³ and the monomer charge is in g, so [`mixture_volume`]
//! returns cm³.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Universal gas constant, J/(mol·K).
pub const R_GAS: f64 = 8.314;

const CCS_TOL: f64 = 1e-12;
const CCS_MAX_ITER: usize = 100;

/// The four dynamic states of the reactor, in absolute units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactorState {
    /// Monomer conversion, 0..=1.
    pub x: f64,
    /// Initiator concentration, mol/L.
    pub i_conc: f64,
    /// Reactor temperature, K.
    pub t_reactor: f64,
    /// Jacket-oil temperature, K.
    pub t_jacket: f64,
}

impl ReactorState {
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.i_conc, self.t_reactor, self.t_jacket)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        ReactorState {
            x: v[0],
            i_conc: v[1],
            t_reactor: v[2],
            t_jacket: v[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.x) {
            return Err(Error::invalid(
                "x",
                format!("conversion {} outside [0, 1]", self.x),
            ));
        }
        if !(self.i_conc >= 0.0) || !self.i_conc.is_finite() {
            return Err(Error::invalid(
                "i_conc",
                format!("{} is not a valid concentration", self.i_conc),
            ));
        }
        for (name, t) in [("t_reactor", self.t_reactor), ("t_jacket", self.t_jacket)] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::invalid(
                    name,
                    format!("{t} is not an absolute temperature"),
                ));
            }
        }
        Ok(())
    }
}

/// Kinetic and thermal constants of the plant.
///
/// Every value is read from configuration; see `params/default.toml` for the
/// shipped set and its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    /// Initiator decomposition pre-factor (1/s) and activation energy (J/mol).
    pub kd0: f64,
    pub ed: f64,
    /// Propagation pre-factor (L/mol·s) and activation energy (J/mol).
    pub kp0_pre: f64,
    pub ep: f64,
    /// Termination pre-factor (L/mol·s) and activation energy (J/mol).
    pub kt0_pre: f64,
    pub et: f64,
    /// Chain transfer to monomer pre-factor (L/mol·s) and activation energy (J/mol).
    pub kf_pre: f64,
    pub ef: f64,
    /// Initiator efficiency.
    pub f: f64,
    /// CCS adjustable parameters for propagation and termination (s).
    pub theta_p: f64,
    pub theta_t: f64,
    /// Free-volume constants of the diffusion factor D.
    pub ccs_a: f64,
    pub ccs_b: f64,
    /// Monomer and polymer densities, g/cm³.
    pub rho_m: f64,
    pub rho_p: f64,
    /// Solvent fraction of the feed.
    pub f_s: f64,
    /// Initial monomer charge, g.
    pub m0: f64,
    /// Thermal capacitance of the reactor contents, J/K.
    pub m_cp: f64,
    /// Thermal capacitance of the jacket oil, J/K.
    pub mo_cpo: f64,
    /// Reactor-jacket, reactor-ambient and jacket-ambient conductances, W/K.
    pub ua_r: f64,
    pub ua_inf: f64,
    pub ua_o_inf: f64,
    /// Fraction of electrical heater power that reaches the oil.
    pub alpha_heater: f64,
    /// Maximum power of one heater, W.
    pub p_max: f64,
    /// Ambient temperature, K.
    pub t_amb: f64,
    /// Heat of propagation, J/mol (positive exotherm magnitude).
    pub delta_hp: f64,
    /// Initial monomer concentration, mol/L.
    pub m_conc0: f64,
    /// Initial mixture volume, L.
    pub v0: f64,
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kd0", self.kd0),
            ("kp0_pre", self.kp0_pre),
            ("kt0_pre", self.kt0_pre),
            ("kf_pre", self.kf_pre),
            ("ccs_a", self.ccs_a),
            ("rho_m", self.rho_m),
            ("rho_p", self.rho_p),
            ("m0", self.m0),
            ("m_cp", self.m_cp),
            ("mo_cpo", self.mo_cpo),
            ("ua_r", self.ua_r),
            ("alpha_heater", self.alpha_heater),
            ("p_max", self.p_max),
            ("t_amb", self.t_amb),
            ("m_conc0", self.m_conc0),
            ("v0", self.v0),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(
                    name,
                    format!("must be strictly positive, got {v}"),
                ));
            }
        }
        let non_negative = [
            ("ed", self.ed),
            ("ep", self.ep),
            ("et", self.et),
            ("ef", self.ef),
            ("theta_p", self.theta_p),
            ("theta_t", self.theta_t),
            ("delta_hp", self.delta_hp),
            ("ccs_b", self.ccs_b),
            ("ua_inf", self.ua_inf),
            ("ua_o_inf", self.ua_o_inf),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(
                    name,
                    format!("must be non-negative, got {v}"),
                ));
            }
        }
        if !(self.f > 0.0 && self.f <= 1.0) {
            return Err(Error::invalid(
                "f",
                format!("efficiency {} outside (0, 1]", self.f),
            ));
        }
        if !(self.f_s >= 0.0 && self.f_s < 1.0) {
            return Err(Error::invalid(
                "f_s",
                format!("solvent fraction {} outside [0, 1)", self.f_s),
            ));
        }
        if self.rho_p <= self.rho_m {
            return Err(Error::invalid(
                "rho_p",
                "polymer must be denser than monomer",
            ));
        }
        Ok(())
    }

    /// Relative gap between the charge volume M₀/ρ_m·(1+β) and the configured V₀.
    ///
    /// [M]₀·V₀ enters the energy balance as two independent fields, so a
    /// mismatch is not fatal; callers log it when it exceeds 1 %.
    pub fn volume_consistency_gap(&self) -> f64 {
        let charge_l = self.m0 / self.rho_m * (1.0 + self.beta()) / 1000.0;
        (charge_l - self.v0).abs() / self.v0
    }

    /// Volumetric shrinkage factor ε.
    pub fn epsilon(&self) -> f64 {
        (self.rho_p - self.rho_m) / self.rho_p
    }

    /// Solvent dilution β = f_s / (1 - f_s).
    pub fn beta(&self) -> f64 {
        self.f_s / (1.0 - self.f_s)
    }

    pub fn kd(&self, t: f64) -> f64 {
        arrhenius(self.kd0, self.ed, t)
    }

    pub fn kp0(&self, t: f64) -> f64 {
        arrhenius(self.kp0_pre, self.ep, t)
    }

    pub fn kt0(&self, t: f64) -> f64 {
        arrhenius(self.kt0_pre, self.et, t)
    }

    pub fn kf(&self, t: f64) -> f64 {
        arrhenius(self.kf_pre, self.ef, t)
    }
}

fn arrhenius(pre: f64, energy: f64, t: f64) -> f64 {
    pre * (-energy / (R_GAS * t)).exp()
}

/// Volumetric reduction factor ε = (ρ_p − ρ_m)/ρ_p.
pub fn volumetric_factor(rho_p: f64, rho_m: f64) -> Result<f64> {
    if !(rho_p > 0.0) {
        return Err(Error::invalid(
            "rho_p",
            format!("density must be positive, got {rho_p}"),
        ));
    }
    if !(rho_m > 0.0) {
        return Err(Error::invalid(
            "rho_m",
            format!("density must be positive, got {rho_m}"),
        ));
    }
    Ok((rho_p - rho_m) / rho_p)
}

/// Instantaneous mixture volume (cm³) at conversion `x`.
pub fn mixture_volume(x: f64, params: &PlantParams) -> Result<f64> {
    if !(params.f_s < 1.0) {
        return Err(Error::invalid(
            "f_s",
            format!("solvent fraction {} must be below 1", params.f_s),
        ));
    }
    let eps = volumetric_factor(params.rho_p, params.rho_m)?;
    Ok(params.m0 / params.rho_m * (1.0 - eps * x + params.beta()))
}

/// Volume fraction of polymer in the mixture at conversion `x`.
pub fn polymer_volume_fraction(x: f64, params: &PlantParams) -> f64 {
    let eps = params.epsilon();
    x * (1.0 - eps) / (1.0 - eps * x + params.beta())
}

/// The free-volume diffusion factor D. Equals 1 at φ_p = 1 and grows as
/// the monomer/solvent fraction 1 − φ_p grows.
pub fn diffusion_factor(phi_p: f64, params: &PlantParams) -> Result<f64> {
    let free = 1.0 - phi_p;
    let denom = params.ccs_a + params.ccs_b * free;
    if !(denom > 0.0) {
        return Err(Error::invalid(
            "ccs_a",
            format!("A + B(1 - phi_p) = {denom} must be positive (phi_p = {phi_p})"),
        ));
    }
    Ok((free / denom).exp())
}

/// Rate constants at a given temperature, initiator level and polymer fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSet {
    pub kd: f64,
    pub kp: f64,
    pub kt: f64,
    pub kf: f64,
    /// Total live-radical concentration λ₀, mol/L.
    pub lambda0: f64,
    pub d_free_vol: f64,
}

/// Gel/glass-corrected rate constants.
///
/// Termination and radical concentration are coupled: λ₀ depends on k_t
/// and the correction to k_t depends on λ₀. The coupling is resolved by
/// fixed-point iteration on k_t from k_t0. The map is monotone increasing
/// with slope below 1/2 at the root, so the plain iteration contracts
/// without oscillating; a log-space bisection takes over if it ever stalls.
pub fn ccs_rate_constants(
    t: f64,
    i_conc: f64,
    phi_p: f64,
    params: &PlantParams,
) -> Result<RateSet> {
    if !(t > 0.0) {
        return Err(Error::invalid(
            "t_reactor",
            format!("{t} is not an absolute temperature"),
        ));
    }
    if !(i_conc >= 0.0) {
        return Err(Error::invalid("i_conc", format!("{i_conc} is negative")));
    }
    let d = diffusion_factor(phi_p, params)?;
    let kd = params.kd(t);
    let kp0 = params.kp0(t);
    let kt0 = params.kt0(t);
    let kf = params.kf(t);

    let source = 2.0 * params.f * kd * i_conc;
    if source == 0.0 {
        return Ok(RateSet {
            kd,
            kp: kp0,
            kt: kt0,
            kf,
            lambda0: 0.0,
            d_free_vol: d,
        });
    }

    // 1/k_t = 1/k_t0 + a / sqrt(k_t), a = θ_t·sqrt(2 f k_d [I]) / D
    let a = params.theta_t * source.sqrt() / d;
    let update = |kt: f64| 1.0 / (1.0 / kt0 + a / kt.sqrt());
    let residual = |kt: f64| (1.0 - kt * (1.0 / kt0 + a / kt.sqrt())).abs();

    let mut kt = kt0;
    let mut res = residual(kt);
    let mut iter = 0;
    while res > CCS_TOL && iter < CCS_MAX_ITER {
        kt = update(kt);
        res = residual(kt);
        iter += 1;
    }
    if !(res <= CCS_TOL) {
        kt = bisect_kt(kt0, a).ok_or(Error::CcsNotConverged { residual: res })?;
        res = residual(kt);
        if !(res <= 1e3 * CCS_TOL) {
            return Err(Error::CcsNotConverged { residual: res });
        }
    }

    let lambda0 = (source / kt).sqrt();
    let kp = 1.0 / (1.0 / kp0 + params.theta_p * lambda0 / d);
    Ok(RateSet {
        kd,
        kp,
        kt,
        kf,
        lambda0,
        d_free_vol: d,
    })
}

fn bisect_kt(kt0: f64, a: f64) -> Option<f64> {
    // r(k) = 1/k − 1/k_t0 − a/sqrt(k) is ≤ 0 at k_t0 and → +∞ as k → 0.
    let r = |k: f64| 1.0 / k - 1.0 / kt0 - a / k.sqrt();
    let mut hi = kt0.ln();
    let mut lo = hi - 1.0;
    while r(lo.exp()) <= 0.0 {
        lo -= 10.0;
        if lo < -700.0 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if r(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Some((0.5 * (lo + hi)).exp())
}

/// Power per heater that makes dT_j/dt vanish at `state`, W. May be
/// negative when the reactor heats the jacket faster than it loses heat.
pub fn jacket_balance_power(state: &ReactorState, params: &PlantParams) -> f64 {
    let loss = params.ua_o_inf * (state.t_jacket - params.t_amb)
        - params.ua_r * (state.t_reactor - state.t_jacket);
    loss / (2.0 * params.alpha_heater)
}

/// State derivatives (dx/dt, d[I]/dt, dT/dt, dT_j/dt) at heater power `power`
/// (W per heater, two heaters).
pub fn derivatives(state: &ReactorState, power: f64, params: &PlantParams) -> Result<Vector4<f64>> {
    let ReactorState {
        x,
        i_conc,
        t_reactor,
        t_jacket,
    } = *state;
    let eps = params.epsilon();
    let beta = params.beta();
    let phi_p = polymer_volume_fraction(x, params);
    let rates = ccs_rate_constants(t_reactor, i_conc, phi_p, params)?;

    let growth = (1.0 - x) * rates.lambda0;
    let dx = (rates.kp + rates.kf) * growth;
    let di =
        -rates.kd * i_conc + eps / (1.0 - eps * x + beta) * (rates.kp + rates.kf) * i_conc * growth;

    let q_rxn = params.delta_hp * rates.kp * params.v0 * params.m_conc0 * growth;
    let q_r = params.ua_r * (t_reactor - t_jacket);
    let dt = (q_rxn - q_r - params.ua_inf * (t_reactor - params.t_amb)) / params.m_cp;
    let dtj = (2.0 * params.alpha_heater * power + q_r
        - params.ua_o_inf * (t_jacket - params.t_amb))
        / params.mo_cpo;

    Ok(Vector4::new(dx, di, dt, dtj))
}
