//! Slope tracking: integral control of `Δf` onto a fixed reference level on
//! the inner slope of a dip.

use thiserror::Error;

use crate::numeric;
use crate::spectrum::{true_dip_minimum, DipSelector, SpectrumError, SpectrumParams};

/// Usable depth fractions for the reference point.
pub const RHO_RANGE: (f64, f64) = (0.05, 0.95);

#[derive(Debug, Error)]
pub enum StcError {
    #[error("depth fraction {0} outside [{lo}, {hi}]", lo = RHO_RANGE.0, hi = RHO_RANGE.1)]
    Rho(f64),
    #[error("reference level {df_ref} Hz is not crossed on the inner slope of the {dip} dip")]
    Unreachable { dip: DipSelector, df_ref: f64 },
    #[error("reference point {v} V is not on the inner slope of the {dip} dip")]
    NotInner { dip: DipSelector, v: f64 },
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StcParams {
    /// Absolute reference level in Hz.
    pub df_ref: f64,
    /// Integral gain; the sign must match the inner-slope sign.
    pub k: f64,
    pub dip: DipSelector,
    /// Depth fraction used to pick `df_ref`.
    pub rho: f64,
}

impl StcParams {
    pub fn default_k(dip: DipSelector) -> f64 {
        match dip {
            DipSelector::Negative => 0.04,
            DipSelector::Positive => -0.003,
        }
    }

    pub fn default_rho(dip: DipSelector) -> f64 {
        match dip {
            DipSelector::Negative => 0.63,
            DipSelector::Positive => 0.59,
        }
    }
}

/// Point on the inner slope where the dip term has fallen to `ρ·|d|`.
/// Returns `(Δf_ref, V_b_at_ref)`.
pub fn pick_reference(params: &SpectrumParams, dip: DipSelector, rho: f64) -> Result<(f64, f64), StcError> {
    if !(RHO_RANGE.0..=RHO_RANGE.1).contains(&rho) {
        return Err(StcError::Rho(rho));
    }
    let d = params.depth(dip);
    if d == 0.0 {
        return Err(SpectrumError::FlatDip(dip).into());
    }
    let c = params.center(dip);
    let w = params.width(dip);
    let side = dip.inner_side();
    let target = rho * d.abs();
    let v = numeric::bisect(c, c + side * 6.0 * w, |v| params.dip(dip, v).abs() - target)
        .ok_or(StcError::Unreachable { dip, df_ref: f64::NAN })?;
    let m = true_dip_minimum(params, dip)?;
    if side * (v - m) <= 0.0 || side * params.derivative(v) <= 0.0 {
        return Err(StcError::NotInner { dip, v });
    }
    Ok((params.eval(v), v))
}

/// Bias on the inner slope where the spectrum equals `df_ref`.
pub fn level_crossing(params: &SpectrumParams, dip: DipSelector, df_ref: f64) -> Result<f64, StcError> {
    let m = true_dip_minimum(params, dip)?;
    let side = dip.inner_side();
    let edge = m + side * 4.0 * params.width(dip);
    numeric::bisect(m, edge, |v| params.eval(v) - df_ref).ok_or(StcError::Unreachable { dip, df_ref })
}

/// Offset between the STC equilibrium and the dip minimum, `e_STC`.
pub fn systematic_error(params: &SpectrumParams, dip: DipSelector, df_ref: f64) -> Result<f64, StcError> {
    let v = level_crossing(params, dip, df_ref)?;
    Ok((v - true_dip_minimum(params, dip)?).abs())
}

#[derive(Debug, Clone)]
pub struct Stc {
    pub params: StcParams,
    pub t_s: f64,
    integrator: f64,
    last_error: f64,
    fault: bool,
}

impl Stc {
    pub fn new(params: StcParams, t_s: f64, v_b_c0: f64) -> Self {
        Stc {
            params,
            t_s,
            integrator: v_b_c0,
            last_error: 0.0,
            fault: false,
        }
    }

    pub fn output(&self) -> f64 {
        self.integrator
    }

    pub fn set_output(&mut self, v: f64) {
        self.integrator = v;
    }

    pub fn last_error(&self) -> f64 {
        self.last_error
    }

    pub fn fault(&self) -> bool {
        self.fault
    }

    pub fn step(&mut self, meas: f64) -> f64 {
        if !meas.is_finite() {
            self.fault = true;
            return self.integrator;
        }
        self.last_error = self.params.df_ref - meas;
        self.integrator += self.t_s * self.params.k * self.last_error;
        self.integrator
    }
}
