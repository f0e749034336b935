//! Extremum seeking control of the bias voltage onto a dip minimum.
//!
//! Signal chain per sample: high-pass the measured `Δf` (ξ1), multiply by the
//! phase-shifted dither and low-pass (ξ2), scale by `K = -2/a_d²` (ξ3).
//! ξ3 tends to `-|G|·h'(V_b)` where `G = G_PLL·G_HP` at the dither frequency,
//! so `-ξ3/|G|` is the local slope estimate.
//!
//! Gain sign convention: ξ3 enters the error junction as the derivative
//! signal, `e_d = 0 - ξ3`, and `V_b,C` integrates `K_ESC·e_d`, which tends to
//! `k·h'`. A negative `k` therefore descends.

use std::f64::consts::TAU;

use nalgebra::Complex;
use thiserror::Error;

use crate::spectrum::{DipSelector, SpectrumParams};

type Complex64 = Complex<f64>;

#[derive(Debug, Error)]
pub enum EscError {
    #[error("invalid ESC parameters: {0}")]
    Invalid(String),
}

/// How the tunable gain `k` maps to `K_ESC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainConvention {
    /// `K_ESC = k / |G|` with a unity-DC PLL model `ω/(s+ω)`.
    Unity,
    /// `K_ESC = k / |G|` with the PLL model `1/(s+ω)`, i.e. `ω_PLL` times
    /// larger than [`GainConvention::Unity`].
    PllUnnormalized,
}

impl GainConvention {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unity" => Some(GainConvention::Unity),
            "pll_unnormalized" | "pll" => Some(GainConvention::PllUnnormalized),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GainConvention::Unity => "unity",
            GainConvention::PllUnnormalized => "pll_unnormalized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EscParams {
    /// Dither amplitude in V.
    pub a_d: f64,
    /// Dither frequency in rad/s.
    pub omega_d: f64,
    pub omega_l: f64,
    pub omega_h: f64,
    pub k: f64,
    pub convention: GainConvention,
    pub dip: DipSelector,
}

impl EscParams {
    /// Default tuning relative to the PLL bandwidth.
    pub fn defaults(dip: DipSelector, omega_pll: f64) -> Self {
        let omega_d = 4.0 * omega_pll;
        EscParams {
            a_d: 1e-3,
            omega_d,
            omega_l: 0.2 * omega_d,
            omega_h: 3.0 * omega_d,
            k: match dip {
                DipSelector::Negative => -5e-5,
                DipSelector::Positive => -6e-5,
            },
            convention: GainConvention::PllUnnormalized,
            dip,
        }
    }

    pub fn validate(&self) -> Result<(), EscError> {
        let ok = [self.a_d, self.omega_d, self.omega_l, self.omega_h]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !ok {
            return Err(EscError::Invalid(
                "a_d and all frequencies must be positive".into(),
            ));
        }
        if !self.k.is_finite() || self.k == 0.0 {
            return Err(EscError::Invalid("k must be finite and nonzero".into()));
        }
        Ok(())
    }
}

fn g_pll(omega_d: f64, omega_pll: Option<f64>) -> Complex64 {
    match omega_pll {
        Some(w) if w.is_finite() => w / Complex64::new(w, omega_d),
        _ => Complex64::new(1.0, 0.0),
    }
}

fn g_hp(omega_d: f64, omega_h: f64) -> Complex64 {
    let s = Complex64::new(0.0, omega_d);
    s / (s + omega_h)
}

/// `arg(G_PLL(iω_d)·G_HP(iω_d))`; `None` or infinite `omega_pll` means no PLL.
pub fn phase_compensation(omega_d: f64, omega_pll: Option<f64>, omega_h: f64) -> f64 {
    (g_pll(omega_d, omega_pll) * g_hp(omega_d, omega_h)).arg()
}

/// `|G_PLL(iω_d)·G_HP(iω_d)|` with a unity-DC PLL.
pub fn chain_gain(omega_d: f64, omega_pll: Option<f64>, omega_h: f64) -> f64 {
    (g_pll(omega_d, omega_pll) * g_hp(omega_d, omega_h)).norm()
}

/// `K_ESC = k / |G_PLL·G_HP|`, unity-DC PLL model.
pub fn compensated_gain(k: f64, omega_d: f64, omega_pll: Option<f64>, omega_h: f64) -> f64 {
    k / chain_gain(omega_d, omega_pll, omega_h)
}

/// Integrator gain for a parameter set, honouring its gain convention.
pub fn effective_gain(p: &EscParams, omega_pll: Option<f64>) -> f64 {
    let base = compensated_gain(p.k, p.omega_d, omega_pll, p.omega_h);
    match (p.convention, omega_pll) {
        (GainConvention::PllUnnormalized, Some(w)) if w.is_finite() => base * w,
        _ => base,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DitherExceedsWidth { a_d: f64, width: f64 },
    DitherBelowRange { ratio: f64 },
    DitherAboveRange { ratio: f64 },
    LowPassOutOfRange { ratio: f64 },
    HighPassTooLow { ratio: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DitherExceedsWidth { a_d, width } => write!(
                f,
                "dither exceeds dip width: a_d = {:.3} mV > w = {:.3} mV",
                a_d * 1e3,
                width * 1e3
            ),
            Violation::DitherBelowRange { ratio } => {
                write!(f, "dither frequency below 2 omega_PLL: omega_d/omega_PLL = {ratio:.3}")
            }
            Violation::DitherAboveRange { ratio } => {
                write!(f, "dither frequency above 10 omega_PLL: omega_d/omega_PLL = {ratio:.3}")
            }
            Violation::LowPassOutOfRange { ratio } => {
                write!(f, "low-pass cutoff outside [0.1, 0.5] omega_d: omega_L/omega_d = {ratio:.3}")
            }
            Violation::HighPassTooLow { ratio } => {
                write!(f, "high-pass cutoff below 0.5 omega_d: omega_H/omega_d = {ratio:.3}")
            }
        }
    }
}

/// Checks the tuning guidelines; an empty list means all hold.
pub fn validate_esc(p: &EscParams, spectrum: &SpectrumParams, omega_pll: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let width = spectrum.width(p.dip);
    if p.a_d > width {
        out.push(Violation::DitherExceedsWidth { a_d: p.a_d, width });
    }
    let r = p.omega_d / omega_pll;
    if r < 2.0 {
        out.push(Violation::DitherBelowRange { ratio: r });
    }
    if r > 10.0 {
        out.push(Violation::DitherAboveRange { ratio: r });
    }
    let r = p.omega_l / p.omega_d;
    if !(0.1..=0.5).contains(&r) {
        out.push(Violation::LowPassOutOfRange { ratio: r });
    }
    let r = p.omega_h / p.omega_d;
    if r < 0.5 {
        out.push(Violation::HighPassTooLow { ratio: r });
    }
    out
}

/// First-order low-pass, pole `exp(-ω·T_s)`, unity DC gain.
#[derive(Debug, Clone)]
pub struct LowPass {
    beta: f64,
    y: f64,
}

impl LowPass {
    pub fn new(omega: f64, t_s: f64) -> Self {
        LowPass {
            beta: (-omega * t_s).exp(),
            y: 0.0,
        }
    }

    pub fn step(&mut self, x: f64) -> f64 {
        self.y = self.beta * self.y + (1.0 - self.beta) * x;
        self.y
    }

    pub fn output(&self) -> f64 {
        self.y
    }
}

/// First-order high-pass, pole `exp(-ω·T_s)`, zero at DC, unity gain at
/// Nyquist. Primed by its first input so a constant signal gives zero output.
#[derive(Debug, Clone)]
pub struct HighPass {
    alpha: f64,
    x_prev: Option<f64>,
    y: f64,
}

impl HighPass {
    pub fn new(omega: f64, t_s: f64) -> Self {
        HighPass {
            alpha: (-omega * t_s).exp(),
            x_prev: None,
            y: 0.0,
        }
    }

    pub fn step(&mut self, x: f64) -> f64 {
        let xp = self.x_prev.unwrap_or(x);
        self.y = 0.5 * (1.0 + self.alpha) * (x - xp) + self.alpha * self.y;
        self.x_prev = Some(x);
        self.y
    }

    pub fn output(&self) -> f64 {
        self.y
    }
}

/// Demodulating slope estimator.
#[derive(Debug, Clone)]
pub struct GradientEstimator {
    hp: HighPass,
    lp: LowPass,
    a_d: f64,
    omega_d: f64,
    phi: f64,
    chain_gain: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
}

impl GradientEstimator {
    pub fn new(p: &EscParams, omega_pll: Option<f64>, t_s: f64) -> Self {
        GradientEstimator {
            hp: HighPass::new(p.omega_h, t_s),
            lp: LowPass::new(p.omega_l, t_s),
            a_d: p.a_d,
            omega_d: p.omega_d,
            phi: phase_compensation(p.omega_d, omega_pll, p.omega_h),
            chain_gain: chain_gain(p.omega_d, omega_pll, p.omega_h),
            xi1: 0.0,
            xi2: 0.0,
            xi3: 0.0,
        }
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn dither(&self, t: f64) -> f64 {
        self.a_d * (self.omega_d * t).sin()
    }

    /// Dither phase in `[0, 2π)`.
    pub fn dither_phase(&self, t: f64) -> f64 {
        (self.omega_d * t).rem_euclid(TAU)
    }

    /// Feeds one measurement taken in response to the dither applied at `t`.
    pub fn step(&mut self, meas: f64, t: f64) -> f64 {
        self.xi1 = self.hp.step(meas);
        let demod = self.a_d * (self.omega_d * t + self.phi).sin();
        self.xi2 = self.lp.step(self.xi1 * demod);
        self.xi3 = -2.0 / (self.a_d * self.a_d) * self.xi2;
        self.xi3
    }

    /// `-ξ3` rescaled by the chain gain: the local slope `dΔf/dV_b`.
    pub fn slope_estimate(&self) -> f64 {
        -self.xi3 / self.chain_gain
    }
}

#[derive(Debug, Clone)]
pub struct Esc {
    pub params: EscParams,
    pub estimator: GradientEstimator,
    pub k_esc: f64,
    pub t_s: f64,
    integrator: f64,
    fault: bool,
}

impl Esc {
    pub fn new(params: EscParams, omega_pll: Option<f64>, t_s: f64, v_b_c0: f64) -> Result<Self, EscError> {
        params.validate()?;
        Ok(Esc {
            estimator: GradientEstimator::new(&params, omega_pll, t_s),
            k_esc: effective_gain(&params, omega_pll),
            params,
            t_s,
            integrator: v_b_c0,
            fault: false,
        })
    }

    pub fn output(&self) -> f64 {
        self.integrator
    }

    pub fn set_output(&mut self, v: f64) {
        self.integrator = v;
    }

    pub fn fault(&self) -> bool {
        self.fault
    }

    pub fn dither(&self, t: f64) -> f64 {
        self.estimator.dither(t)
    }

    /// One controller update. A non-finite measurement freezes the state and
    /// latches the fault flag.
    pub fn step(&mut self, meas: f64, t: f64) -> f64 {
        if !meas.is_finite() {
            self.fault = true;
            return self.integrator;
        }
        let xi3 = self.estimator.step(meas, t);
        let e_d = 0.0 - xi3;
        self.integrator += self.t_s * self.k_esc * e_d;
        self.integrator
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{PllConfig, StaticPlant};

    const T_S: f64 = 0.005;

    #[test]
    fn phase_reference_values() {
        let phi = phase_compensation(40.0, Some(10.0), 120.0);
        assert!((phi.to_degrees() - -4.398705355).abs() < 1e-8);
        let limit = phase_compensation(40.0, Some(10.0), 1e-12);
        assert!((limit - -(4.0f64).atan()).abs() < 1e-10);
        assert!(phase_compensation(7.0, Some(7.0), 7.0).abs() < 1e-15);
    }

    #[test]
    fn gain_reference_values() {
        let g = chain_gain(40.0, Some(10.0), 120.0);
        assert!((g - 0.07669649888).abs() < 1e-10);
        let k = compensated_gain(1.0, 40.0, Some(10.0), 120.0);
        assert!((k - 13.0384048104).abs() < 1e-8);
        assert_eq!(compensated_gain(2.0, 40.0, Some(10.0), 120.0), 2.0 * k);
        assert!((compensated_gain(1.0, 40.0, None, 1e-12) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn defaults_pass_guidelines() {
        for dip in DipSelector::BOTH {
            let p = EscParams::defaults(dip, 10.0);
            assert!(validate_esc(&p, &SpectrumParams::default(), 10.0).is_empty());
        }
    }

    #[test]
    fn each_violation_detected() {
        let s = SpectrumParams::default();
        let base = EscParams::defaults(DipSelector::Negative, 10.0);
        let cases: [(EscParams, fn(&Violation) -> bool); 5] = [
            (EscParams { a_d: 0.03, ..base }, |v| matches!(v, Violation::DitherExceedsWidth { .. })),
            (EscParams { omega_d: 200.0, omega_l: 40.0, omega_h: 600.0, ..base }, |v| {
                matches!(v, Violation::DitherAboveRange { .. })
            }),
            (EscParams { omega_d: 15.0, omega_l: 3.0, omega_h: 45.0, ..base }, |v| {
                matches!(v, Violation::DitherBelowRange { .. })
            }),
            (EscParams { omega_l: 30.0, ..base }, |v| matches!(v, Violation::LowPassOutOfRange { .. })),
            (EscParams { omega_h: 10.0, ..base }, |v| matches!(v, Violation::HighPassTooLow { .. })),
        ];
        for (p, is) in cases {
            let v = validate_esc(&p, &s, 10.0);
            assert_eq!(v.len(), 1, "{v:?}");
            assert!(is(&v[0]), "{v:?}");
        }
    }

    #[test]
    fn high_pass_rejects_constant() {
        let mut hp = HighPass::new(120.0, T_S);
        for _ in 0..100 {
            assert_eq!(hp.step(-4.2), 0.0);
        }
    }

    #[test]
    fn constant_input_leaves_integrator() {
        let p = EscParams::defaults(DipSelector::Negative, 10.0);
        let mut esc = Esc::new(p, Some(10.0), T_S, -1.3).unwrap();
        for k in 0..2000 {
            esc.step(-4.7, k as f64 * T_S);
        }
        assert!((esc.output() - -1.3).abs() < 1e-6);
    }

    fn quadratic(q: f64) -> SpectrumParams {
        SpectrumParams {
            p1: q,
            p2: 0.0,
            p3: 0.0,
            d_neg: 0.0,
            d_pos: 0.0,
            ..SpectrumParams::default()
        }
    }

    /// Parks the bias at `u` and returns the settled raw `-ξ3` and the
    /// compensated slope estimate, both averaged over the final second.
    fn settle(q: f64, u: f64, p: &EscParams, omega_pll: Option<f64>) -> (f64, f64) {
        let pll = PllConfig {
            omega: omega_pll.unwrap_or(f64::INFINITY),
            sigma_n: 0.0,
        };
        let mut plant = StaticPlant::new(quadratic(q), pll, T_S, 0, u);
        let mut est = GradientEstimator::new(p, omega_pll, T_S);
        let n = 4000;
        let (mut raw, mut comp) = (0.0, 0.0);
        for k in 0..n {
            let t = k as f64 * T_S;
            let y = plant.step(u + est.dither(t));
            est.step(y, t);
            if k >= n - 200 {
                raw += -est.xi3 / 200.0;
                comp += est.slope_estimate() / 200.0;
            }
        }
        (raw, comp)
    }

    #[test]
    fn slope_estimate_without_pll() {
        let p = EscParams::defaults(DipSelector::Negative, 10.0);
        // near all-pass high-pass: the raw chain output is the slope itself
        let open = EscParams { omega_h: 1e-3, ..p };
        let u = 0.4;
        for q in [0.5, 1.0, 2.0] {
            let truth = 2.0 * q * u;
            let (raw, _) = settle(q, u, &open, None);
            assert!((raw / truth - 1.0).abs() < 0.1, "q={q} raw={raw}");
            let (_, comp) = settle(q, u, &p, None);
            assert!((comp / truth - 1.0).abs() < 0.1, "q={q} comp={comp}");
        }
    }

    #[test]
    fn slope_estimate_with_pll() {
        let p = EscParams::defaults(DipSelector::Negative, 10.0);
        for q in [0.5, 1.0, 2.0] {
            let (_, comp) = settle(q, -0.3, &p, Some(10.0));
            let truth = -0.6 * q;
            assert!((comp / truth - 1.0).abs() < 0.1, "q={q} comp={comp}");
        }
    }

    #[test]
    fn dither_amplitude_cancels() {
        let p = EscParams::defaults(DipSelector::Negative, 10.0);
        let p2 = EscParams { a_d: 2.0 * p.a_d, ..p };
        let (_, a) = settle(1.0, 0.25, &p, Some(10.0));
        let (_, b) = settle(1.0, 0.25, &p2, Some(10.0));
        assert!((a / b - 1.0).abs() < 1e-3, "{a} vs {b}");
    }

    #[test]
    fn non_finite_measurement_freezes() {
        let p = EscParams::defaults(DipSelector::Negative, 10.0);
        let mut esc = Esc::new(p, Some(10.0), T_S, -1.29).unwrap();
        esc.step(-4.0, 0.0);
        let v = esc.output();
        assert_eq!(esc.step(f64::NAN, T_S), v);
        assert!(esc.fault());
    }

    #[test]
    fn dither_phase_range() {
        let p = EscParams::defaults(DipSelector::Negative, 10.0);
        let est = GradientEstimator::new(&p, Some(10.0), T_S);
        for t in [0.0, 0.1, 1e3, 12345.678] {
            let ph = est.dither_phase(t);
            assert!((0.0..TAU).contains(&ph));
        }
    }
}
