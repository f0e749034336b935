//! Discrete-time microscope model: raster trajectory, per-pixel dip shifting,
//! first-order PLL and white measurement noise.
//!
//! Positions are in Å, voltages in V, frequency shifts in Hz, time in s.
//! Pixel `i` of a row of `n` pixels is centred at `i·extent/(n-1)`, so the tip
//! path starts on the centre of pixel (0, 0) and ends each pass on the centre of
//! the last pixel of the row.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grid::{Grid, GridError};
use crate::kv::{KvDoc, KvError};
use crate::spectrum::SpectrumParams;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("time {t} s outside scan [0, {total}] s")]
    TimeOutOfRange { t: f64, total: f64 },
    #[error("position ({x}, {y}) Å outside the {ex} x {ey} Å map")]
    OutOfExtent { x: f64, y: f64, ex: f64, ey: f64 },
    #[error("invalid dip maps: {0}")]
    InvalidMaps(String),
    #[error("invalid scan configuration: {0}")]
    InvalidScan(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    Forward,
    Backward,
}

impl ScanDirection {
    pub fn index(self) -> usize {
        match self {
            ScanDirection::Forward => 0,
            ScanDirection::Backward => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanDirection::Forward => "fwd",
            ScanDirection::Backward => "bwd",
        }
    }
}

/// Pixel-centre spacing for `n` pixels across `extent`.
fn spacing(extent: f64, n: usize) -> f64 {
    if n > 1 {
        extent / (n - 1) as f64
    } else {
        f64::INFINITY
    }
}

/// Nearest pixel index along one axis; ties go to the higher index.
fn nearest_index(pos: f64, extent: f64, n: usize) -> Option<usize> {
    let tol = 1e-9 * extent.max(1.0);
    if !(pos >= -tol && pos <= extent + tol) {
        return None;
    }
    if n <= 1 {
        return Some(0);
    }
    let i = (pos / spacing(extent, n)).round();
    Some((i.max(0.0) as usize).min(n - 1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipPosition {
    pub x: f64,
    pub y: f64,
    pub line: usize,
    pub direction: ScanDirection,
    /// Pass counter since scan start (two per line when scanning back and forth).
    pub pass: usize,
    pub pixel: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanConfig {
    /// Total scan time for one dip, `T_scan`.
    pub scan_time_total: f64,
    pub lines: usize,
    pub pixels_per_line: usize,
    /// Scan each line forward then backward; otherwise forward only with an
    /// instantaneous fly-back.
    pub back_and_forth: bool,
    /// Sample time `T_s`.
    pub t_s: f64,
    /// Relative speed of equal-length segments of each pass, in travel order.
    pub speed_profile: Option<Vec<f64>>,
    pub extent_x: f64,
    pub extent_y: f64,
}

/// Nominal tip speed, Å/s.
pub const NOMINAL_SPEED: f64 = 100.0 / 3.0;

impl Default for ScanConfig {
    /// 200 x 200 pixels over 600 Å at 33.3 Å/s, back and forth, 5 ms
    /// samples: 18 s per pass, 2 h per dip.
    fn default() -> Self {
        ScanConfig::at_resolution(200)
    }
}

impl ScanConfig {
    /// `n` lines of `n` pixels over the default 600 Å field at nominal speed.
    pub fn at_resolution(n: usize) -> Self {
        let extent = 600.0;
        let pass_time = extent / NOMINAL_SPEED;
        ScanConfig {
            scan_time_total: pass_time * 2.0 * n as f64,
            lines: n,
            pixels_per_line: n,
            back_and_forth: true,
            t_s: 0.005,
            speed_profile: None,
            extent_x: extent,
            extent_y: extent,
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |m: &str| Err(PlantError::InvalidScan(m.to_string()));
        if !(self.t_s > 0.0 && self.t_s.is_finite()) {
            return bad("sample time must be positive");
        }
        if !(self.scan_time_total > 0.0 && self.scan_time_total.is_finite()) {
            return bad("scan time must be positive");
        }
        if self.lines == 0 || self.pixels_per_line == 0 {
            return bad("need at least one line and one pixel");
        }
        if !(self.extent_x >= 0.0 && self.extent_y >= 0.0) {
            return bad("extents must be non-negative");
        }
        if let Some(p) = &self.speed_profile {
            if p.is_empty() || p.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
                return bad("speed multipliers must be positive");
            }
        }
        Ok(())
    }

    pub fn passes_per_line(&self) -> usize {
        if self.back_and_forth {
            2
        } else {
            1
        }
    }

    pub fn total_passes(&self) -> usize {
        self.lines * self.passes_per_line()
    }

    /// Duration of one pass across a line.
    pub fn pass_time(&self) -> f64 {
        self.scan_time_total / self.total_passes() as f64
    }

    /// Nominal tip speed in Å/s for a uniform profile.
    pub fn speed(&self) -> f64 {
        self.extent_x / self.pass_time()
    }

    pub fn steps(&self) -> usize {
        (self.scan_time_total / self.t_s).round() as usize
    }

    pub fn pixel_count(&self) -> usize {
        self.lines * self.pixels_per_line
    }

    pub fn line_y(&self, line: usize) -> f64 {
        if self.lines > 1 {
            line as f64 * spacing(self.extent_y, self.lines)
        } else {
            0.0
        }
    }

    /// Fraction of the pass length covered after fraction `s` of the pass time.
    fn path_fraction(&self, s: f64) -> f64 {
        let Some(profile) = self.speed_profile.as_deref() else {
            return s;
        };
        let seg_len = 1.0 / profile.len() as f64;
        let total: f64 = profile.iter().map(|m| seg_len / m).sum();
        let mut t_acc = 0.0;
        for (j, m) in profile.iter().enumerate() {
            let dt = seg_len / m / total;
            if s <= t_acc + dt || j + 1 == profile.len() {
                let within = ((s - t_acc) / dt).clamp(0.0, 1.0);
                return (j as f64 + within) * seg_len;
            }
            t_acc += dt;
        }
        1.0
    }

    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        Some((
            nearest_index(x, self.extent_x, self.pixels_per_line)?,
            nearest_index(y, self.extent_y, self.lines)?,
        ))
    }
}

/// Tip position on the raster at time `t`.
pub fn trajectory_position(cfg: &ScanConfig, t: f64) -> Result<TipPosition, PlantError> {
    let total = cfg.scan_time_total;
    let eps = 1e-9 * total;
    if !(t >= -eps && t <= total + eps) {
        return Err(PlantError::TimeOutOfRange { t, total });
    }
    let pass_time = cfg.pass_time();
    let n_pass = cfg.total_passes();
    let mut pass = (t.max(0.0) / pass_time).floor() as usize;
    let mut s = t.max(0.0) / pass_time - pass as f64;
    if pass >= n_pass {
        pass = n_pass - 1;
        s = 1.0;
    }
    let line = pass / cfg.passes_per_line();
    let direction = if cfg.back_and_forth && pass % 2 == 1 {
        ScanDirection::Backward
    } else {
        ScanDirection::Forward
    };
    let frac = cfg.path_fraction(s);
    let x = match direction {
        ScanDirection::Forward => frac * cfg.extent_x,
        ScanDirection::Backward => (1.0 - frac) * cfg.extent_x,
    };
    let y = cfg.line_y(line);
    let pixel = cfg
        .pixel_of(x, y)
        .expect("trajectory stays inside the scan extent");
    Ok(TipPosition {
        x,
        y,
        line,
        direction,
        pass,
        pixel,
    })
}

/// Ground-truth dip positions per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DipMaps {
    pub extent_x: f64,
    pub extent_y: f64,
    pub v_neg: Grid,
    pub v_pos: Grid,
}

impl DipMaps {
    pub fn new(v_neg: Grid, v_pos: Grid, extent_x: f64, extent_y: f64) -> Result<Self, PlantError> {
        v_neg.same_shape(&v_pos)?;
        if v_neg
            .data()
            .iter()
            .chain(v_pos.data())
            .any(|v| !v.is_finite())
        {
            return Err(PlantError::InvalidMaps("non-finite value".into()));
        }
        if v_neg.data().iter().zip(v_pos.data()).any(|(n, p)| n >= p) {
            return Err(PlantError::InvalidMaps("V_neg must lie below V_pos everywhere".into()));
        }
        Ok(DipMaps {
            extent_x,
            extent_y,
            v_neg,
            v_pos,
        })
    }

    pub fn constant(width: usize, height: usize, extent_x: f64, extent_y: f64, v_neg: f64, v_pos: f64) -> Self {
        DipMaps::new(
            Grid::filled(width, height, v_neg),
            Grid::filled(width, height, v_pos),
            extent_x,
            extent_y,
        )
        .expect("constant maps are valid when v_neg < v_pos")
    }

    pub fn width(&self) -> usize {
        self.v_neg.width()
    }

    pub fn height(&self) -> usize {
        self.v_neg.height()
    }

    pub fn pixel_of(&self, x: f64, y: f64) -> Result<(usize, usize), PlantError> {
        let out = || PlantError::OutOfExtent {
            x,
            y,
            ex: self.extent_x,
            ey: self.extent_y,
        };
        Ok((
            nearest_index(x, self.extent_x, self.width()).ok_or_else(out)?,
            nearest_index(y, self.extent_y, self.height()).ok_or_else(out)?,
        ))
    }

    /// Nearest-pixel `(V⁻, V⁺)` at position `(x, y)`.
    pub fn lookup(&self, x: f64, y: f64) -> Result<(f64, f64), PlantError> {
        let (ix, iy) = self.pixel_of(x, y)?;
        Ok((self.v_neg.get(ix, iy), self.v_pos.get(ix, iy)))
    }

    pub fn save(&self, dir: &Path) -> Result<(), PlantError> {
        std::fs::create_dir_all(dir).map_err(GridError::from)?;
        let mut header = KvDoc::new();
        header.set("width", self.width());
        header.set("height", self.height());
        header.set("extent_x", self.extent_x);
        header.set("extent_y", self.extent_y);
        header.save(&dir.join("header.txt"))?;
        self.v_neg.save(&dir.join("v_neg.txt"))?;
        self.v_pos.save(&dir.join("v_pos.txt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PlantError> {
        let header = KvDoc::load(&dir.join("header.txt"))?;
        let v_neg = Grid::load(&dir.join("v_neg.txt"))?;
        let v_pos = Grid::load(&dir.join("v_pos.txt"))?;
        let width = header.usize_or("width", v_neg.width())?;
        let height = header.usize_or("height", v_neg.height())?;
        if width != v_neg.width() || height != v_neg.height() {
            return Err(PlantError::InvalidMaps(format!(
                "header says {width}x{height}, matrix is {}x{}",
                v_neg.width(),
                v_neg.height()
            )));
        }
        let ex = header
            .f64("extent_x")?
            .ok_or_else(|| KvError::Missing("extent_x".into()))?;
        let ey = header
            .f64("extent_y")?
            .ok_or_else(|| KvError::Missing("extent_y".into()))?;
        DipMaps::new(v_neg, v_pos, ex, ey)
    }
}

/// First-order PLL `ω/(s+ω)` discretized exactly: `y⁺ = α·y + (1-α)·u`.
#[derive(Debug, Clone)]
pub struct Pll {
    alpha: f64,
    y: f64,
}

impl Pll {
    /// `omega = ∞` gives a memoryless pass-through.
    pub fn new(omega: f64, t_s: f64, y0: f64) -> Self {
        Pll {
            alpha: (-omega * t_s).exp(),
            y: y0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn output(&self) -> f64 {
        self.y
    }

    pub fn reset(&mut self, y: f64) {
        self.y = y;
    }

    pub fn step(&mut self, u: f64) -> f64 {
        self.y = self.alpha * self.y + (1.0 - self.alpha) * u;
        self.y
    }
}

/// Seeded white Gaussian noise.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    dist: Option<Normal<f64>>,
}

impl NoiseSource {
    pub fn new(sigma: f64, seed: u64) -> Self {
        NoiseSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma")),
        }
    }

    pub fn sample(&mut self) -> f64 {
        match &self.dist {
            Some(d) => d.sample(&mut self.rng),
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PllConfig {
    /// PLL bandwidth `ω_PLL` in rad/s.
    pub omega: f64,
    /// Output noise standard deviation `σ_n` in Hz.
    pub sigma_n: f64,
}

impl Default for PllConfig {
    fn default() -> Self {
        PllConfig {
            omega: 10.0,
            sigma_n: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantState {
    pub step: u64,
    pub t: f64,
    pub position: TipPosition,
    pub pll: Pll,
    pub noise: NoiseSource,
}

/// The scanned microscope: bias voltage in, noisy `Δf` out.
#[derive(Debug, Clone)]
pub struct Plant {
    params: SpectrumParams,
    maps: DipMaps,
    scan: ScanConfig,
    state: PlantState,
}

impl Plant {
    /// Starts at `t = 0` on pixel (0, 0) with the PLL settled at the static
    /// spectrum value for `v_b0`.
    pub fn new(
        params: SpectrumParams,
        maps: DipMaps,
        scan: ScanConfig,
        pll: PllConfig,
        seed: u64,
        v_b0: f64,
    ) -> Result<Self, PlantError> {
        scan.validate()?;
        if maps.width() != scan.pixels_per_line || maps.height() != scan.lines {
            return Err(PlantError::InvalidScan(format!(
                "scan is {}x{} pixels but maps are {}x{}",
                scan.pixels_per_line,
                scan.lines,
                maps.width(),
                maps.height()
            )));
        }
        let position = trajectory_position(&scan, 0.0)?;
        let mut plant = Plant {
            params,
            maps,
            state: PlantState {
                step: 0,
                t: 0.0,
                position,
                pll: Pll::new(pll.omega, scan.t_s, 0.0),
                noise: NoiseSource::new(pll.sigma_n, seed),
            },
            scan,
        };
        let y0 = plant.static_spectrum(v_b0)?;
        plant.state.pll.reset(y0);
        Ok(plant)
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn scan(&self) -> &ScanConfig {
        &self.scan
    }

    pub fn maps(&self) -> &DipMaps {
        &self.maps
    }

    pub fn params(&self) -> &SpectrumParams {
        &self.params
    }

    pub fn is_finished(&self) -> bool {
        self.state.step as usize >= self.scan.steps()
    }

    /// Spectrum at the current tip position, dips placed per pixel.
    pub fn local_params(&self) -> Result<SpectrumParams, PlantError> {
        let p = &self.state.position;
        let (vn, vp) = self.maps.lookup(p.x, p.y)?;
        Ok(self.params.with_centers(vn, vp))
    }

    fn static_spectrum(&self, v_b: f64) -> Result<f64, PlantError> {
        Ok(self.local_params()?.eval(v_b))
    }

    /// Position of the next sample, without advancing.
    pub fn next_position(&self) -> Result<TipPosition, PlantError> {
        trajectory_position(&self.scan, (self.state.step + 1) as f64 * self.scan.t_s)
    }

    /// Advances one sample: move the tip, place the dips, evaluate the
    /// spectrum at `v_b_mod`, filter through the PLL and add noise.
    pub fn step(&mut self, v_b_mod: f64) -> Result<f64, PlantError> {
        let step = self.state.step + 1;
        let t = step as f64 * self.scan.t_s;
        self.state.position = trajectory_position(&self.scan, t)?;
        self.state.step = step;
        self.state.t = t;
        let df = self.static_spectrum(v_b_mod)?;
        let y = self.state.pll.step(df);
        Ok(y + self.state.noise.sample())
    }
}

/// Plant with the tip parked: fixed spectrum, same PLL and noise model.
#[derive(Debug, Clone)]
pub struct StaticPlant {
    pub params: SpectrumParams,
    pub pll: Pll,
    pub noise: NoiseSource,
    pub t_s: f64,
    pub t: f64,
}

impl StaticPlant {
    pub fn new(params: SpectrumParams, pll: PllConfig, t_s: f64, seed: u64, v_b0: f64) -> Self {
        StaticPlant {
            params,
            pll: Pll::new(pll.omega, t_s, params.eval(v_b0)),
            noise: NoiseSource::new(pll.sigma_n, seed),
            t_s,
            t: 0.0,
        }
    }

    pub fn step(&mut self, v_b_mod: f64) -> f64 {
        self.t += self.t_s;
        let y = self.pll.step(self.params.eval(v_b_mod));
        y + self.noise.sample()
    }
}
