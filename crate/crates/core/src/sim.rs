//! Closed-loop raster scan: plant, controller and feedforward stepped
//! together at the sample time.

use thiserror::Error;

use crate::esc::{effective_gain, phase_compensation, Esc, EscError, EscParams};
use crate::feedforward::{FfConfig, FfError, Feedforward};
use crate::grid::Grid;
use crate::imaging::{assemble_map, BiasCorrection, ImagingError, RecordSample, ScanRecord, TrackingTarget};
use crate::plant::{DipMaps, Plant, PlantError, PllConfig, ScanConfig, ScanDirection, StaticPlant};
use crate::spectrum::{true_dip_minimum, DipSelector, SpectrumError, SpectrumParams};
use crate::stc::{pick_reference, Stc, StcError, StcParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Esc(#[from] EscError),
    #[error(transparent)]
    Stc(#[from] StcError),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Ff(#[from] FfError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// SplitMix64 step; used to derive independent seeds from one master seed.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerConfig {
    Esc(EscParams),
    /// Gain and depth fraction; the reference level is picked at the first pixel.
    Stc { k: f64, rho: f64 },
}

impl ControllerConfig {
    pub fn default_for(kind: ControllerKind, dip: DipSelector, omega_pll: f64) -> Self {
        match kind {
            ControllerKind::Esc => ControllerConfig::Esc(EscParams::defaults(dip, omega_pll)),
            ControllerKind::Stc => ControllerConfig::Stc {
                k: StcParams::default_k(dip),
                rho: StcParams::default_rho(dip),
            },
        }
    }

    pub fn kind(&self) -> ControllerKind {
        match self {
            ControllerConfig::Esc(_) => ControllerKind::Esc,
            ControllerConfig::Stc { .. } => ControllerKind::Stc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Esc,
    Stc,
}

impl ControllerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "esc" => Some(ControllerKind::Esc),
            "stc" => Some(ControllerKind::Stc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Esc => "esc",
            ControllerKind::Stc => "stc",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub spectrum: SpectrumParams,
    pub scan: ScanConfig,
    pub pll: PllConfig,
    pub dip: DipSelector,
    pub controller: ControllerConfig,
    pub ff: FfConfig,
    pub seed: u64,
    /// Half-width of the dip window, in dip widths, used for dip-loss detection.
    pub loss_band_widths: f64,
    /// Time outside the window that counts as losing the dip.
    pub loss_time: f64,
}

impl LoopConfig {
    pub fn new(dip: DipSelector, kind: ControllerKind) -> Self {
        let pll = PllConfig::default();
        LoopConfig {
            spectrum: SpectrumParams::default(),
            scan: ScanConfig::default(),
            pll,
            dip,
            controller: ControllerConfig::default_for(kind, dip, pll.omega),
            ff: FfConfig::default(),
            seed: 0,
            loss_band_widths: 3.0,
            loss_time: 1.0,
        }
    }

    fn omega_pll(&self) -> Option<f64> {
        self.pll.omega.is_finite().then_some(self.pll.omega)
    }
}

enum Controller {
    Esc(Esc),
    Stc(Stc),
}

impl Controller {
    fn output(&self) -> f64 {
        match self {
            Controller::Esc(c) => c.output(),
            Controller::Stc(c) => c.output(),
        }
    }

    fn dither(&self, t: f64) -> f64 {
        match self {
            Controller::Esc(c) => c.dither(t),
            Controller::Stc(_) => 0.0,
        }
    }

    fn step(&mut self, meas: f64, t: f64) -> f64 {
        match self {
            Controller::Esc(c) => c.step(meas, t),
            Controller::Stc(c) => c.step(meas),
        }
    }

    /// Signal the integrator acts on: `e_d` for ESC, `e_f` for STC.
    fn error(&self) -> f64 {
        match self {
            Controller::Esc(c) => -c.estimator.xi3,
            Controller::Stc(c) => c.last_error(),
        }
    }

    fn fault(&self) -> bool {
        match self {
            Controller::Esc(c) => c.fault(),
            Controller::Stc(c) => c.fault(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DipLossFault {
    /// Time the bias left the dip window.
    pub t_start: f64,
    pub pixel: (usize, usize),
}

/// Quantities fixed at initialization, recorded for reproducibility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derived {
    pub v_b_init: f64,
    pub df_ref: Option<f64>,
    pub v_b_at_ref: Option<f64>,
    pub phi: Option<f64>,
    pub k_esc: Option<f64>,
    pub pll_alpha: f64,
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub record: ScanRecord,
    pub faults: Vec<DipLossFault>,
    pub controller_fault: bool,
    pub derived: Derived,
    /// RMS of the controller error signal per scan line.
    pub line_rms_error: Vec<f64>,
}

impl ScanOutcome {
    pub fn mean_line_rms_error(&self) -> f64 {
        self.line_rms_error.iter().sum::<f64>() / self.line_rms_error.len().max(1) as f64
    }
}

/// Runs one dip over the whole raster.
pub fn run_scan(maps: &DipMaps, cfg: &LoopConfig) -> Result<ScanOutcome, SimError> {
    let dip = cfg.dip;
    let (vn0, vp0) = maps.lookup(0.0, 0.0)?;
    let local0 = cfg.spectrum.with_centers(vn0, vp0);
    let omega_pll = cfg.omega_pll();

    let (mut ctrl, derived) = match cfg.controller {
        ControllerConfig::Esc(p) => {
            let v0 = true_dip_minimum(&local0, dip)?;
            let esc = Esc::new(EscParams { dip, ..p }, omega_pll, cfg.scan.t_s, v0)?;
            let derived = Derived {
                v_b_init: v0,
                df_ref: None,
                v_b_at_ref: None,
                phi: Some(phase_compensation(p.omega_d, omega_pll, p.omega_h)),
                k_esc: Some(effective_gain(&p, omega_pll)),
                pll_alpha: (-cfg.pll.omega * cfg.scan.t_s).exp(),
            };
            (Controller::Esc(esc), derived)
        }
        ControllerConfig::Stc { k, rho } => {
            let (df_ref, v_ref) = pick_reference(&local0, dip, rho)?;
            let stc = Stc::new(StcParams { df_ref, k, dip, rho }, cfg.scan.t_s, v_ref);
            let derived = Derived {
                v_b_init: v_ref,
                df_ref: Some(df_ref),
                v_b_at_ref: Some(v_ref),
                phi: None,
                k_esc: None,
                pll_alpha: (-cfg.pll.omega * cfg.scan.t_s).exp(),
            };
            (Controller::Stc(stc), derived)
        }
    };

    let mut plant = Plant::new(cfg.spectrum, maps.clone(), cfg.scan.clone(), cfg.pll, cfg.seed, derived.v_b_init)?;
    let mut ff = Feedforward::new(cfg.ff)?;
    let steps = cfg.scan.steps();
    let t_s = cfg.scan.t_s;
    let w = cfg.spectrum.width(dip);
    let band = cfg.loss_band_widths * w;

    let mut record = ScanRecord {
        samples: Vec::with_capacity(steps),
    };
    let mut faults = Vec::new();
    let mut out_since: Option<(f64, (usize, usize))> = None;
    let mut fault_open = false;
    let mut current: Option<(usize, ScanDirection)> = None;
    let mut line_sq = vec![0.0; cfg.scan.lines];
    let mut line_n = vec![0usize; cfg.scan.lines];

    for k in 0..steps {
        let t = k as f64 * t_s;
        let pos = plant.state().position;
        if current.map(|(p, _)| p) != Some(pos.pass) {
            if let Some((_, dir)) = current {
                ff.end_pass(dir)?;
            }
            ff.start_pass(pos.direction, pos.line, ctrl.output());
            current = Some((pos.pass, pos.direction));
        }
        let v_b_c = ctrl.output();
        let v_b_ff = ff.query(pos.direction, pos.x);
        let v_b = v_b_c + v_b_ff;
        let dither = ctrl.dither(t);
        let meas = plant.step(v_b + dither)?;

        let (ix, iy) = pos.pixel;
        let center = match dip {
            DipSelector::Negative => maps.v_neg.get(ix, iy),
            DipSelector::Positive => maps.v_pos.get(ix, iy),
        };
        if (v_b - center).abs() > band || !v_b.is_finite() {
            let (since, pixel) = *out_since.get_or_insert((t, pos.pixel));
            if !fault_open && t - since > cfg.loss_time {
                faults.push(DipLossFault { t_start: since, pixel });
                fault_open = true;
            }
        } else {
            out_since = None;
            fault_open = false;
        }

        ff.record(pos.direction, pos.x, v_b);
        ctrl.step(meas, t);
        let e = ctrl.error();
        line_sq[pos.line] += e * e;
        line_n[pos.line] += 1;

        record.push(RecordSample {
            t,
            x: pos.x,
            y: pos.y,
            pixel: pos.pixel,
            direction: pos.direction,
            v_b,
            v_b_c,
            v_b_ff,
            dither,
            df_meas: meas,
            fault: fault_open || ctrl.fault(),
        });
    }

    let line_rms_error = line_sq
        .iter()
        .zip(&line_n)
        .map(|(s, &n)| (s / n.max(1) as f64).sqrt())
        .collect();
    Ok(ScanOutcome {
        record,
        faults,
        controller_fault: ctrl.fault(),
        derived,
        line_rms_error,
    })
}

/// Measured dip-position map from a finished scan. With `correct`, each
/// pixel's settled bias is mapped back to the dip centre that yields it.
pub fn measured_map(outcome: &ScanOutcome, cfg: &LoopConfig, correct: bool) -> Result<Grid, SimError> {
    let raw = assemble_map(&outcome.record, &cfg.scan).complete()?;
    if !correct {
        return Ok(raw);
    }
    let target = match outcome.derived.df_ref {
        Some(df) => TrackingTarget::Level(df),
        None => TrackingTarget::Minimum,
    };
    let bc = BiasCorrection {
        params: cfg.spectrum,
        dip: cfg.dip,
        target,
    };
    Ok(bc.apply(&raw)?.0)
}

#[derive(Debug, Clone)]
pub struct RegainResult {
    pub offset: f64,
    pub v_min: f64,
    /// Time after the offset until `|V_b,C - V_min|` stays within the band;
    /// `None` if it never settles in the horizon.
    pub settle_time: Option<f64>,
    pub trace: Vec<(f64, f64)>,
}

/// Static-dip regain experiment for ESC.
#[derive(Debug, Clone)]
pub struct RegainConfig {
    pub spectrum: SpectrumParams,
    pub esc: EscParams,
    pub pll: PllConfig,
    pub t_s: f64,
    pub seed: u64,
    /// Time spent parked on the minimum before the push.
    pub settle: f64,
    /// Step added to the integrator.
    pub offset: f64,
    /// Half-width of the band around the minimum that counts as regained.
    pub band: f64,
    /// Observation time after the push.
    pub horizon: f64,
}

impl RegainConfig {
    /// Noise-free regain with `|k| = 1e-5` after a push of half the dip
    /// width towards the inner slope, 1 mV band.
    pub fn new(spectrum: SpectrumParams, dip: DipSelector) -> Self {
        let pll = PllConfig {
            sigma_n: 0.0,
            ..PllConfig::default()
        };
        let mut esc = EscParams::defaults(dip, pll.omega);
        esc.k = esc.k.signum() * 1e-5;
        RegainConfig {
            spectrum,
            esc,
            pll,
            t_s: 0.005,
            seed: 0,
            settle: 10.0,
            offset: dip.inner_side() * 0.5 * spectrum.width(dip),
            band: 1e-3,
            horizon: 300.0,
        }
    }
}

/// Settles ESC on a parked dip, pushes the integrator by `offset` and
/// measures how long it takes to return within `band` of the minimum.
pub fn esc_regain(cfg: &RegainConfig) -> Result<RegainResult, SimError> {
    let RegainConfig {
        ref spectrum,
        esc: ref params,
        pll,
        t_s,
        seed,
        settle,
        offset,
        band,
        horizon,
    } = *cfg;
    let dip = params.dip;
    let v_min = true_dip_minimum(spectrum, dip)?;
    let omega_pll = pll.omega.is_finite().then_some(pll.omega);
    let mut plant = StaticPlant::new(*spectrum, pll, t_s, seed, v_min);
    let mut esc = Esc::new(*params, omega_pll, t_s, v_min)?;
    let n_settle = (settle / t_s).round() as usize;
    let n_total = n_settle + (horizon / t_s).round() as usize;
    let mut trace = Vec::with_capacity(n_total);
    let mut last_out = None;
    for k in 0..n_total {
        if k == n_settle {
            esc.set_output(esc.output() + offset);
        }
        let t = k as f64 * t_s;
        let meas = plant.step(esc.output() + esc.dither(t));
        esc.step(meas, t);
        trace.push((t, esc.output()));
        if k >= n_settle && (esc.output() - v_min).abs() > band {
            last_out = Some(k);
        }
    }
    let settle_time = match last_out {
        Some(k) if k + 1 >= n_total => None,
        Some(k) => Some((k + 1 - n_settle) as f64 * t_s),
        None => Some(0.0),
    };
    Ok(RegainResult {
        offset,
        v_min,
        settle_time,
        trace,
    })
}
