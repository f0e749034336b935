//! Analytic model of the tuning-fork frequency shift `Δf(V_b)`.
//!
//! The spectrum is a capacitance parabola plus two charging dips:
//!
//! ```text
//! Δf(V) = p1·V² + p2·V + p3
//!       + d⁻·exp(-((V - V⁻)/w⁻)²)
//!       + d⁺·exp(-g((V - V⁺)/w⁺)),     g(x) = a1·x² + a2·x⁴ + a3·x⁶
//! ```
//!
//! Volts and hertz throughout.

mod fit;

use std::path::Path;

use thiserror::Error;

use crate::kv::{KvDoc, KvError};
use crate::numeric;

pub use fit::{fit_spectrum, fit_spectrum_with, FitOptions, FitReport};

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("invalid spectrum parameters: {0}")]
    Invalid(String),
    #[error("{0:?} dip has zero depth, no minimum to locate")]
    FlatDip(DipSelector),
    #[error("fit did not converge after {iterations} iterations (residual norm {residual_norm:.3e})")]
    NotConverged {
        best: Box<SpectrumParams>,
        residual_norm: f64,
        iterations: usize,
    },
    #[error("fit needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Kv(#[from] KvError),
}

/// Which of the two charging dips is tracked. Only one can be tracked per scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DipSelector {
    Negative,
    Positive,
}

impl DipSelector {
    pub const BOTH: [DipSelector; 2] = [DipSelector::Negative, DipSelector::Positive];

    /// Direction (+1 right, -1 left) from the dip minimum towards its inner
    /// slope, i.e. towards the parabola vertex.
    pub fn inner_side(self) -> f64 {
        match self {
            DipSelector::Negative => 1.0,
            DipSelector::Positive => -1.0,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            DipSelector::Negative => "neg",
            DipSelector::Positive => "pos",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neg" | "negative" | "-" => Some(DipSelector::Negative),
            "pos" | "positive" | "+" => Some(DipSelector::Positive),
            _ => None,
        }
    }
}

impl std::fmt::Display for DipSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumParams {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub d_neg: f64,
    pub d_pos: f64,
    pub v_neg: f64,
    pub v_pos: f64,
    pub w_neg: f64,
    pub w_pos: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

/// Parameter names in file order. Also the keys of the text format.
pub const FIELD_NAMES: [&str; 12] = [
    "p1", "p2", "p3", "d_neg", "d_pos", "V_neg", "V_pos", "w_neg", "w_pos", "a1", "a2", "a3",
];

impl Default for SpectrumParams {
    /// Fit of a measured spectrum (parabola coefficients, dip depths in Hz,
    /// positions and widths in V).
    fn default() -> Self {
        SpectrumParams {
            p1: -1.3,
            p2: 0.56,
            p3: -0.76,
            d_neg: -1.1,
            d_pos: -4.6,
            v_neg: -1.3,
            v_pos: 4.3,
            w_neg: 0.022,
            w_pos: 0.087,
            a1: 0.70,
            a2: -0.61,
            a3: 1.64,
        }
    }
}

impl SpectrumParams {
    pub fn validate(&self) -> Result<(), SpectrumError> {
        let arr = self.to_array();
        if let Some(i) = arr.iter().position(|v| !v.is_finite()) {
            return Err(SpectrumError::Invalid(format!("{} is not finite", FIELD_NAMES[i])));
        }
        if self.w_neg <= 0.0 || self.w_pos <= 0.0 {
            return Err(SpectrumError::Invalid("dip widths must be positive".into()));
        }
        if self.d_neg > 0.0 || self.d_pos > 0.0 {
            return Err(SpectrumError::Invalid("dip depths must be negative".into()));
        }
        if self.v_neg >= self.v_pos {
            return Err(SpectrumError::Invalid("V_neg must lie below V_pos".into()));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 12] {
        [
            self.p1, self.p2, self.p3, self.d_neg, self.d_pos, self.v_neg, self.v_pos, self.w_neg,
            self.w_pos, self.a1, self.a2, self.a3,
        ]
    }

    pub fn from_array(a: [f64; 12]) -> Self {
        SpectrumParams {
            p1: a[0],
            p2: a[1],
            p3: a[2],
            d_neg: a[3],
            d_pos: a[4],
            v_neg: a[5],
            v_pos: a[6],
            w_neg: a[7],
            w_pos: a[8],
            a1: a[9],
            a2: a[10],
            a3: a[11],
        }
    }

    pub fn parabola(&self, v: f64) -> f64 {
        (self.p1 * v + self.p2) * v + self.p3
    }

    pub fn g(&self, x: f64) -> f64 {
        let x2 = x * x;
        x2 * (self.a1 + x2 * (self.a2 + x2 * self.a3))
    }

    fn g_prime(&self, x: f64) -> f64 {
        let x2 = x * x;
        x * (2.0 * self.a1 + x2 * (4.0 * self.a2 + 6.0 * self.a3 * x2))
    }

    pub fn dip_neg(&self, v: f64) -> f64 {
        let x = (v - self.v_neg) / self.w_neg;
        self.d_neg * (-x * x).exp()
    }

    pub fn dip_pos(&self, v: f64) -> f64 {
        let x = (v - self.v_pos) / self.w_pos;
        self.d_pos * (-self.g(x)).exp()
    }

    pub fn dip(&self, dip: DipSelector, v: f64) -> f64 {
        match dip {
            DipSelector::Negative => self.dip_neg(v),
            DipSelector::Positive => self.dip_pos(v),
        }
    }

    /// `Δf(V_b)`: parabola plus both dips.
    pub fn eval(&self, v: f64) -> f64 {
        self.parabola(v) + self.dip_neg(v) + self.dip_pos(v)
    }

    /// Closed-form `dΔf/dV_b`.
    pub fn derivative(&self, v: f64) -> f64 {
        let xn = (v - self.v_neg) / self.w_neg;
        let xp = (v - self.v_pos) / self.w_pos;
        let para = 2.0 * self.p1 * v + self.p2;
        let neg = self.d_neg * (-xn * xn).exp() * (-2.0 * xn / self.w_neg);
        let pos = self.d_pos * (-self.g(xp)).exp() * (-self.g_prime(xp) / self.w_pos);
        para + neg + pos
    }

    pub fn center(&self, dip: DipSelector) -> f64 {
        match dip {
            DipSelector::Negative => self.v_neg,
            DipSelector::Positive => self.v_pos,
        }
    }

    pub fn width(&self, dip: DipSelector) -> f64 {
        match dip {
            DipSelector::Negative => self.w_neg,
            DipSelector::Positive => self.w_pos,
        }
    }

    pub fn depth(&self, dip: DipSelector) -> f64 {
        match dip {
            DipSelector::Negative => self.d_neg,
            DipSelector::Positive => self.d_pos,
        }
    }

    /// Copy with the selected dip moved to `center`.
    pub fn with_center(&self, dip: DipSelector, center: f64) -> Self {
        let mut p = *self;
        match dip {
            DipSelector::Negative => p.v_neg = center,
            DipSelector::Positive => p.v_pos = center,
        }
        p
    }

    /// Copy with both dip positions replaced.
    pub fn with_centers(&self, v_neg: f64, v_pos: f64) -> Self {
        SpectrumParams { v_neg, v_pos, ..*self }
    }

    /// Copy with both dip depths multiplied by `m`.
    pub fn scale_depths(&self, m: f64) -> Self {
        SpectrumParams {
            d_neg: self.d_neg * m,
            d_pos: self.d_pos * m,
            ..*self
        }
    }

    /// Copy with both dip widths multiplied by `m`.
    pub fn scale_widths(&self, m: f64) -> Self {
        SpectrumParams {
            w_neg: self.w_neg * m,
            w_pos: self.w_pos * m,
            ..*self
        }
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        for (name, value) in FIELD_NAMES.iter().zip(self.to_array()) {
            doc.set(*name, value);
        }
        doc
    }

    /// Reads the twelve parameters from `doc`; key lookup ignores case.
    pub fn from_kv(doc: &KvDoc) -> Result<Self, SpectrumError> {
        let mut arr = [0.0; 12];
        for (slot, name) in arr.iter_mut().zip(FIELD_NAMES) {
            let (key, raw) = doc
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case(name))
                .ok_or_else(|| KvError::Missing(name.to_string()))?;
            *slot = raw.parse().map_err(|_| KvError::Value {
                key: key.to_string(),
                value: raw.to_string(),
                expected: "a number",
            })?;
        }
        let p = Self::from_array(arr);
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, SpectrumError> {
        Self::from_kv(&KvDoc::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SpectrumError> {
        self.to_kv().save(path)?;
        Ok(())
    }
}

/// Location of the selected dip's minimum of the full spectrum, searched in
/// `[V∓ - 2w∓, V∓ + 2w∓]`.
///
/// The parabola slope pulls the minimum slightly off the Gaussian centre; this
/// is the value a perfect minimum tracker settles at.
pub fn true_dip_minimum(params: &SpectrumParams, dip: DipSelector) -> Result<f64, SpectrumError> {
    if params.depth(dip) == 0.0 {
        return Err(SpectrumError::FlatDip(dip));
    }
    let c = params.center(dip);
    let w = params.width(dip);
    let (lo, hi) = (c - 2.0 * w, c + 2.0 * w);
    let (a, b) = numeric::golden_section(lo, hi, 1e-7 * w.max(1e-3), |v| params.eval(v));
    let guess = 0.5 * (a + b);

    // polish on the derivative; widen the bracket until it changes sign
    let mut half = (b - a).max(1e-12);
    while half < 4.0 * w {
        let l = (guess - half).max(lo);
        let r = (guess + half).min(hi);
        if let Some(root) = numeric::bisect(l, r, |v| params.derivative(v)) {
            if params.derivative(l) < 0.0 {
                return Ok(root);
            }
        }
        half *= 2.0;
    }
    // minimum sits on the window edge
    Ok(guess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table1() -> SpectrumParams {
        SpectrumParams::default()
    }

    fn central_diff(p: &SpectrumParams, v: f64) -> f64 {
        let h = 1e-6;
        (p.eval(v + h) - p.eval(v - h)) / (2.0 * h)
    }

    #[test]
    fn eval_reference_points() {
        let p = table1();
        assert_relative_eq!(p.eval(0.0), -0.76, epsilon = 1e-12);
        // parabola -3.685 plus the full negative dip depth
        assert_relative_eq!(p.eval(-1.3), -4.785, epsilon = 1e-12);
        assert_relative_eq!(p.parabola(-1.3), -3.685, epsilon = 1e-12);
    }

    #[test]
    fn zero_depth_reduces_to_parabola() {
        let p = SpectrumParams {
            d_neg: 0.0,
            d_pos: 0.0,
            ..table1()
        };
        for v in [-4.0, -1.3, 0.0, 2.5, 4.3] {
            assert_eq!(p.eval(v), p.p1 * v * v + p.p2 * v + p.p3);
        }
    }

    #[test]
    fn derivative_reference_points() {
        let flat = SpectrumParams {
            d_neg: 0.0,
            d_pos: 0.0,
            ..table1()
        };
        let vertex = -flat.p2 / (2.0 * flat.p1);
        assert!(flat.derivative(vertex).abs() < 1e-15);
        // Gaussian slope vanishes at its centre, leaving 2·p1·V + p2
        assert_relative_eq!(table1().derivative(-1.3), 3.94, epsilon = 1e-12);
    }

    #[test]
    fn derivative_matches_finite_differences_on_grid() {
        let p = table1();
        let mut v = -5.0;
        while v <= 5.0 {
            let fd = central_diff(&p, v);
            let an = p.derivative(v);
            // relative error, with an absolute floor where the slope crosses zero
            let err = (fd - an).abs() / an.abs().max(1e-2);
            assert!(err < 1e-5, "v={v} analytic={an} fd={fd}");
            v += 0.01;
        }
    }

    #[test]
    fn true_minimum_without_parabola_is_center() {
        let p = SpectrumParams {
            p1: 0.0,
            p2: 0.0,
            p3: 0.0,
            ..table1()
        };
        assert_relative_eq!(
            true_dip_minimum(&p, DipSelector::Negative).unwrap(),
            -1.3,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            true_dip_minimum(&p, DipSelector::Positive).unwrap(),
            4.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn true_minimum_table1() {
        // reference roots of dΔf/dV from a 40-digit mpmath evaluation
        let p = table1();
        let neg = true_dip_minimum(&p, DipSelector::Negative).unwrap();
        assert_relative_eq!(neg, -1.300_868_650_032_556_6, epsilon = 1e-10);
        assert!(p.derivative(neg).abs() < 1e-6);
        let pos = true_dip_minimum(&p, DipSelector::Positive).unwrap();
        assert_relative_eq!(pos, 4.313_202_456_642_162, epsilon = 1e-10);
        assert!(p.derivative(pos).abs() < 1e-6);
    }

    #[test]
    fn derivative_changes_sign_at_minimum() {
        let p = table1();
        for dip in DipSelector::BOTH {
            let m = true_dip_minimum(&p, dip).unwrap();
            assert!(p.derivative(m - 1e-6) < 0.0);
            assert!(p.derivative(m + 1e-6) > 0.0);
        }
    }

    #[test]
    fn flat_dip_is_an_error() {
        let p = SpectrumParams {
            d_neg: 0.0,
            ..table1()
        };
        assert!(matches!(
            true_dip_minimum(&p, DipSelector::Negative),
            Err(SpectrumError::FlatDip(DipSelector::Negative))
        ));
    }

    #[test]
    fn g_nonnegative_near_origin() {
        let p = table1();
        let mut x = -3.0;
        while x <= 3.0 {
            assert!(p.g(x) >= 0.0);
            x += 1e-3;
        }
    }

    #[test]
    fn kv_round_trip_and_validation() {
        let p = table1();
        let text = p.to_kv().to_string();
        assert!(text.contains("V_neg = -1.3"));
        let back = SpectrumParams::from_kv(&KvDoc::parse(&text).unwrap()).unwrap();
        assert_eq!(back, p);

        let bad = SpectrumParams {
            w_neg: -0.1,
            ..p
        };
        assert!(bad.validate().is_err());
        let swapped = p.with_centers(4.3, -1.3);
        assert!(swapped.validate().is_err());
    }

    proptest! {
        #[test]
        fn eval_is_sum_of_components(v in -5.0f64..5.0) {
            let p = table1();
            let sum = p.parabola(v) + p.dip_neg(v) + p.dip_pos(v);
            prop_assert_eq!(p.eval(v), sum);
        }

        #[test]
        fn argmin_invariant_under_depth_scaling(m in 0.1f64..10.0) {
            let p = SpectrumParams { p1: 0.0, p2: 0.0, p3: 0.0, ..table1() };
            for dip in DipSelector::BOTH {
                let a = true_dip_minimum(&p, dip).unwrap();
                let b = true_dip_minimum(&p.scale_depths(m), dip).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
