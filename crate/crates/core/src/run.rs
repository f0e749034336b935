//! Run configuration, two-dip imaging runs, sweeps and the artifact files
//! they leave behind.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use thiserror::Error;

use crate::esc::{effective_gain, EscParams, GainConvention};
use crate::feedforward::{Baseline, FfConfig};
use crate::grid::{Grid, GridError};
use crate::imaging::{compute_phi_star, score, ImagingError, ScanRecord, Score};
use crate::kv::{KvDoc, KvError};
use crate::plant::{DipMaps, PlantError, PllConfig, ScanConfig};
use crate::samplegen::{gen_potential, potential_to_dipmaps, SampleError, SampleSpec};
use crate::sim::{
    derive_seed, esc_regain, measured_map, run_scan, ControllerConfig, ControllerKind, LoopConfig, RegainConfig,
    ScanOutcome, SimError,
};
use crate::spectrum::{DipSelector, SpectrumError, SpectrumParams, FIELD_NAMES};

/// Seconds a grid spectroscopy measurement needs per dip and pixel.
pub const SPECTROSCOPY_SECONDS_PER_PIXEL: f64 = 3.0;

/// Error tolerance used for the "pixels within" figure, as a fraction of the
/// reference peak-to-peak.
pub const WITHIN_FRACTION: f64 = 0.025;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("seed is required (config key `seed` or --seed)")]
    MissingSeed,
    #[error("sweep has no axis")]
    EmptySweep,
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn bad<T>(msg: impl Into<String>) -> Result<T, RunError> {
    Err(RunError::Config(msg.into()))
}

pub fn dip_index(dip: DipSelector) -> usize {
    match dip {
        DipSelector::Negative => 0,
        DipSelector::Positive => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    Synthetic(SampleSpec),
    /// Dip maps saved by [`DipMaps::save`], with an optional ground-truth Φ* grid.
    Maps { dir: PathBuf, reference: Option<PathBuf> },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepAxes {
    /// Multipliers on the base scan time.
    pub scan_time_factors: Vec<f64>,
    pub ff: Vec<bool>,
    pub controllers: Vec<ControllerKind>,
    /// Depth multipliers for the ESC regain experiment.
    pub depth_scales: Vec<f64>,
    /// Width multipliers for the ESC regain experiment.
    pub width_scales: Vec<f64>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.scan_time_factors.is_empty()
            && self.ff.is_empty()
            && self.controllers.is_empty()
            && self.depth_scales.is_empty()
            && self.width_scales.is_empty()
    }

    fn has_image_axis(&self) -> bool {
        !(self.scan_time_factors.is_empty() && self.ff.is_empty() && self.controllers.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sample: SampleSource,
    pub spectrum: SpectrumParams,
    pub scan: ScanConfig,
    pub pll: PllConfig,
    pub controller: ControllerKind,
    pub dips: Vec<DipSelector>,
    /// Indexed negative, positive.
    pub esc: [EscParams; 2],
    /// `(K_STC, ρ)`, indexed negative, positive.
    pub stc: [(f64, f64); 2],
    pub ff: FfConfig,
    pub seed: u64,
    pub loss_band_widths: f64,
    pub loss_time: f64,
    /// Keep every n-th sample in `record.csv`; 0 skips the file.
    pub record_every: usize,
    pub sweep: SweepAxes,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        let pll = PllConfig::default();
        RunConfig {
            sample: SampleSource::Synthetic(SampleSpec::default()),
            spectrum: SpectrumParams::default(),
            scan: ScanConfig::default(),
            pll,
            controller: ControllerKind::Esc,
            dips: DipSelector::BOTH.to_vec(),
            esc: DipSelector::BOTH.map(|d| EscParams::defaults(d, pll.omega)),
            stc: DipSelector::BOTH.map(|d| (crate::stc::StcParams::default_k(d), crate::stc::StcParams::default_rho(d))),
            ff: FfConfig::default(),
            seed,
            loss_band_widths: 3.0,
            loss_time: 1.0,
            record_every: 10,
            sweep: SweepAxes::default(),
        }
    }

    /// `n x n` sample and raster over the default field at nominal speed.
    pub fn at_resolution(n: usize, seed: u64) -> Self {
        RunConfig {
            sample: SampleSource::Synthetic(SampleSpec::at_resolution(n)),
            scan: ScanConfig::at_resolution(n),
            ..RunConfig::new(seed)
        }
    }

    /// Builds a config from dotted keys. `seed` overrides the `seed` key; one
    /// of the two must be present.
    pub fn from_kv(doc: &KvDoc, seed: Option<u64>) -> Result<Self, RunError> {
        let seed = match seed {
            Some(s) => s,
            None => match doc.get("seed") {
                Some(v) => v.parse().map_err(|_| RunError::Config(format!("seed: cannot parse {v:?}")))?,
                None => return Err(RunError::MissingSeed),
            },
        };
        let base = match doc.usize_or("resolution", 0)? {
            0 => RunConfig::new(seed),
            n => RunConfig::at_resolution(n, seed),
        };
        let mut cfg = base;

        let sample = doc.section("sample.");
        cfg.sample = match sample.get("maps") {
            Some(dir) => SampleSource::Maps {
                dir: PathBuf::from(dir),
                reference: sample.get("reference").map(PathBuf::from),
            },
            None if sample.keys().next().is_some() => {
                let user_blobs = sample.keys().any(|k| k.starts_with("blob."));
                let user_extent = sample.get("extent").is_some();
                let mut merged = KvDoc::new();
                if let (SampleSource::Synthetic(base), None) = (&cfg.sample, sample.get("preset")) {
                    for (k, v) in base.to_kv().iter() {
                        let shadowed = (user_blobs && k.starts_with("blob."))
                            || (user_extent && k.starts_with("extent_"));
                        if !shadowed {
                            merged.set(k, v);
                        }
                    }
                }
                for (k, v) in sample.iter() {
                    merged.set(k, v);
                }
                SampleSource::Synthetic(SampleSpec::from_kv(&merged)?)
            }
            None => cfg.sample,
        };

        cfg.spectrum = {
            let mut d = cfg.spectrum.to_kv();
            for (k, v) in doc.section("spectrum.").iter() {
                let name = FIELD_NAMES.iter().find(|n| n.eq_ignore_ascii_case(k)).copied();
                match name {
                    Some(n) => d.set(n, v),
                    None => return bad(format!("unknown spectrum parameter {k:?}")),
                }
            }
            SpectrumParams::from_kv(&d)?
        };

        let plant = doc.section("plant.");
        cfg.pll.omega = plant.f64_or("omega_pll", cfg.pll.omega)?;
        cfg.pll.sigma_n = plant.f64_or("sigma_n", cfg.pll.sigma_n)?;
        cfg.esc = DipSelector::BOTH.map(|d| EscParams::defaults(d, cfg.pll.omega));

        let scan = doc.section("scan.");
        let s = &mut cfg.scan;
        s.lines = scan.usize_or("lines", s.lines)?;
        s.pixels_per_line = scan.usize_or("pixels_per_line", s.pixels_per_line)?;
        let extent = scan.f64("extent")?;
        s.extent_x = scan.f64_or("extent_x", extent.unwrap_or(s.extent_x))?;
        s.extent_y = scan.f64_or("extent_y", extent.unwrap_or(s.extent_y))?;
        s.t_s = scan.f64_or("t_s", s.t_s)?;
        s.back_and_forth = scan.bool_or("back_and_forth", s.back_and_forth)?;
        if let Some(p) = scan.f64_list("speed_profile")? {
            s.speed_profile = Some(p);
        }
        // explicit scan_time wins; otherwise a geometry change keeps the nominal speed
        if let Some(v) = scan.f64("speed")? {
            s.scan_time_total = s.extent_x / v * s.total_passes() as f64;
        } else if ["lines", "pixels_per_line", "extent", "extent_x", "back_and_forth"]
            .iter()
            .any(|k| scan.get(k).is_some())
        {
            s.scan_time_total = s.extent_x / crate::plant::NOMINAL_SPEED * s.total_passes() as f64;
        }
        s.scan_time_total = scan.f64_or("scan_time", s.scan_time_total)?;
        s.validate()?;

        if let Some(c) = doc.get("controller") {
            cfg.controller = ControllerKind::parse(c).ok_or_else(|| RunError::Config(format!("unknown controller {c:?}")))?;
        }
        if let Some(d) = doc.get("dip") {
            cfg.dips = parse_dips(d)?;
        }

        let esc = doc.section("esc.");
        let convention = match esc.get("convention") {
            Some(c) => GainConvention::parse(c).ok_or_else(|| RunError::Config(format!("unknown convention {c:?}")))?,
            None => GainConvention::PllUnnormalized,
        };
        let esc_dips = match esc.get("dip") {
            Some(d) => parse_dips(d)?,
            None => DipSelector::BOTH.to_vec(),
        };
        for dip in DipSelector::BOTH {
            let p = &mut cfg.esc[dip_index(dip)];
            p.a_d = esc.f64_or("a_d", p.a_d)?;
            let omega_d_rel = esc.f64_or("omega_d_rel", p.omega_d / cfg.pll.omega)?;
            p.omega_d = esc.f64_or("omega_d", omega_d_rel * cfg.pll.omega)?;
            let omega_l_rel = either(&esc, "omega_l_rel", "omega_L_rel")?.unwrap_or(0.2);
            p.omega_l = esc.f64_or("omega_l", omega_l_rel * p.omega_d)?;
            let omega_h_rel = either(&esc, "omega_h_rel", "omega_H_rel")?.unwrap_or(3.0);
            p.omega_h = esc.f64_or("omega_h", omega_h_rel * p.omega_d)?;
            if esc_dips.contains(&dip) {
                p.k = esc.f64_or("k", p.k)?;
            }
            p.k = esc.f64_or(&format!("k_{}", dip.short_name()), p.k)?;
            p.convention = convention;
            p.validate().map_err(|e| RunError::Config(e.to_string()))?;
        }

        let stc = doc.section("stc.");
        let stc_dips = match stc.get("dip") {
            Some(d) => parse_dips(d)?,
            None => DipSelector::BOTH.to_vec(),
        };
        for dip in DipSelector::BOTH {
            let (k, rho) = &mut cfg.stc[dip_index(dip)];
            if stc_dips.contains(&dip) {
                *k = either(&stc, "k", "K")?.unwrap_or(*k);
                *rho = stc.f64_or("rho", *rho)?;
            }
            *k = stc.f64_or(&format!("k_{}", dip.short_name()), *k)?;
            *rho = stc.f64_or(&format!("rho_{}", dip.short_name()), *rho)?;
        }

        let ff = doc.section("ff.");
        if !ff.bool_or("enabled", true)? {
            cfg.ff.enabled_after_lines = None;
        } else {
            let after = ff.usize_or("enabled_after_lines", 1)?;
            cfg.ff.enabled_after_lines = Some(ff.usize_or("after_lines", after)?);
        }
        let window = ff.usize_or("window_n", cfg.ff.window_n)?;
        cfg.ff.window_n = ff.usize_or("window", window)?;
        if let Some(b) = ff.get("baseline") {
            cfg.ff.baseline = Baseline::parse(b).ok_or_else(|| RunError::Config(format!("unknown baseline {b:?}")))?;
        }
        if cfg.ff.window_n == 0 {
            return bad("ff.window must be at least 1");
        }

        let fault = doc.section("fault.");
        cfg.loss_band_widths = fault.f64_or("band_widths", cfg.loss_band_widths)?;
        cfg.loss_time = fault.f64_or("time", cfg.loss_time)?;
        cfg.record_every = doc.usize_or("output.record_every", cfg.record_every)?;

        let sweep = doc.section("sweep.");
        let list = |k: &str| sweep.f64_list(k).map(Option::unwrap_or_default);
        cfg.sweep.scan_time_factors = list("scan_time_factors")?;
        let base_time = cfg.scan.scan_time_total;
        cfg.sweep.scan_time_factors.extend(list("scan_times")?.into_iter().map(|t| t / base_time));
        cfg.sweep.depth_scales = list("depth_scales")?;
        cfg.sweep.width_scales = list("width_scales")?;
        if let Some(v) = sweep.get("ff") {
            cfg.sweep.ff = v
                .split(',')
                .map(|s| parse_on_off(s.trim()))
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = sweep.get("controllers") {
            cfg.sweep.controllers = v
                .split(',')
                .map(|s| ControllerKind::parse(s.trim()).ok_or_else(|| RunError::Config(format!("unknown controller {s:?}"))))
                .collect::<Result<_, _>>()?;
        }
        Ok(cfg)
    }

    /// Fully resolved config; reading it back with [`from_kv`](Self::from_kv)
    /// reproduces `self`.
    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("seed", self.seed);
        d.set("controller", self.controller.name());
        d.set(
            "dip",
            self.dips.iter().map(|d| d.short_name()).collect::<Vec<_>>().join(","),
        );
        match &self.sample {
            SampleSource::Synthetic(s) => {
                for (k, v) in s.to_kv().iter() {
                    d.set(format!("sample.{k}"), v);
                }
            }
            SampleSource::Maps { dir, reference } => {
                d.set("sample.maps", dir.display());
                if let Some(r) = reference {
                    d.set("sample.reference", r.display());
                }
            }
        }
        for (k, v) in self.spectrum.to_kv().iter() {
            d.set(format!("spectrum.{k}"), v);
        }
        d.set("plant.omega_pll", self.pll.omega);
        d.set("plant.sigma_n", self.pll.sigma_n);
        let s = &self.scan;
        d.set("scan.lines", s.lines);
        d.set("scan.pixels_per_line", s.pixels_per_line);
        d.set("scan.extent_x", s.extent_x);
        d.set("scan.extent_y", s.extent_y);
        d.set("scan.t_s", s.t_s);
        d.set("scan.back_and_forth", if s.back_and_forth { "on" } else { "off" });
        if let Some(p) = &s.speed_profile {
            d.set("scan.speed_profile", join(p));
        }
        d.set("scan.scan_time", s.scan_time_total);
        let e = &self.esc[0];
        d.set("esc.a_d", e.a_d);
        d.set("esc.omega_d", e.omega_d);
        d.set("esc.omega_l", e.omega_l);
        d.set("esc.omega_h", e.omega_h);
        d.set("esc.convention", e.convention.name());
        for dip in DipSelector::BOTH {
            d.set(format!("esc.k_{}", dip.short_name()), self.esc[dip_index(dip)].k);
        }
        for dip in DipSelector::BOTH {
            let (k, rho) = self.stc[dip_index(dip)];
            d.set(format!("stc.k_{}", dip.short_name()), k);
            d.set(format!("stc.rho_{}", dip.short_name()), rho);
        }
        match self.ff.enabled_after_lines {
            Some(n) => {
                d.set("ff.enabled", "on");
                d.set("ff.after_lines", n);
            }
            None => d.set("ff.enabled", "off"),
        }
        d.set("ff.window", self.ff.window_n);
        d.set("ff.baseline", self.ff.baseline.name());
        d.set("fault.band_widths", self.loss_band_widths);
        d.set("fault.time", self.loss_time);
        d.set("output.record_every", self.record_every);
        let sw = &self.sweep;
        if !sw.scan_time_factors.is_empty() {
            d.set("sweep.scan_time_factors", join(&sw.scan_time_factors));
        }
        if !sw.ff.is_empty() {
            d.set(
                "sweep.ff",
                sw.ff.iter().map(|&b| if b { "on" } else { "off" }).collect::<Vec<_>>().join(","),
            );
        }
        if !sw.controllers.is_empty() {
            d.set(
                "sweep.controllers",
                sw.controllers.iter().map(|c| c.name()).collect::<Vec<_>>().join(","),
            );
        }
        if !sw.depth_scales.is_empty() {
            d.set("sweep.depth_scales", join(&sw.depth_scales));
        }
        if !sw.width_scales.is_empty() {
            d.set("sweep.width_scales", join(&sw.width_scales));
        }
        d
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.scan.validate()?;
        if self.dips.is_empty() {
            return bad("no dip selected");
        }
        if !(self.loss_band_widths > 0.0 && self.loss_time > 0.0) {
            return bad("fault band and time must be positive");
        }
        Ok(())
    }

    pub fn loop_config(&self, dip: DipSelector, kind: ControllerKind) -> LoopConfig {
        let i = dip_index(dip);
        let controller = match kind {
            ControllerKind::Esc => ControllerConfig::Esc(self.esc[i]),
            ControllerKind::Stc => ControllerConfig::Stc {
                k: self.stc[i].0,
                rho: self.stc[i].1,
            },
        };
        LoopConfig {
            spectrum: self.spectrum,
            scan: self.scan.clone(),
            pll: self.pll,
            dip,
            controller,
            ff: self.ff,
            seed: derive_seed(self.seed, 1 + i as u64),
            loss_band_widths: self.loss_band_widths,
            loss_time: self.loss_time,
        }
    }

    /// Dip maps to scan and, when known, the ground-truth Φ*.
    pub fn load_sample(&self) -> Result<(DipMaps, Option<Grid>), RunError> {
        match &self.sample {
            SampleSource::Synthetic(spec) => {
                let phi = gen_potential(spec, derive_seed(self.seed, 0))?;
                let maps = potential_to_dipmaps(&phi, spec)?;
                Ok((maps, Some(phi)))
            }
            SampleSource::Maps { dir, reference } => {
                let maps = DipMaps::load(dir)?;
                let phi = reference.as_deref().map(Grid::load).transpose()?;
                Ok((maps, phi))
            }
        }
    }

    fn reference_levels(&self) -> (f64, f64) {
        match &self.sample {
            SampleSource::Synthetic(s) => (s.v_neg0, s.delta_v0),
            SampleSource::Maps { .. } => (self.spectrum.v_neg, self.spectrum.v_pos - self.spectrum.v_neg),
        }
    }
}

fn either(doc: &KvDoc, a: &str, b: &str) -> Result<Option<f64>, KvError> {
    Ok(doc.f64(a)?.or(doc.f64(b)?))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_on_off(s: &str) -> Result<bool, RunError> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => bad(format!("expected on/off, got {s:?}")),
    }
}

/// `neg`, `pos` or `both` (also a comma list).
pub fn parse_dips(s: &str) -> Result<Vec<DipSelector>, RunError> {
    if s.trim() == "both" {
        return Ok(DipSelector::BOTH.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let d = DipSelector::parse(part).ok_or_else(|| RunError::Config(format!("unknown dip {part:?}")))?;
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out.sort_by_key(|d| dip_index(*d));
    Ok(out)
}

/// Throughput of continuous scanning against grid spectroscopy for both dips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub pixels: usize,
    pub spectroscopy_s: f64,
    pub scan_s: f64,
}

impl Throughput {
    pub fn of(scan: &ScanConfig) -> Self {
        let pixels = scan.pixel_count();
        Throughput {
            pixels,
            spectroscopy_s: 2.0 * SPECTROSCOPY_SECONDS_PER_PIXEL * pixels as f64,
            scan_s: 2.0 * scan.scan_time_total,
        }
    }

    pub fn factor(&self) -> f64 {
        self.spectroscopy_s / self.scan_s
    }

    /// Continuous-scan pixels per second.
    pub fn pixel_rate(&self) -> f64 {
        self.pixels as f64 / self.scan_s
    }
}

#[derive(Debug, Clone)]
pub struct DipRun {
    pub dip: DipSelector,
    pub loop_config: LoopConfig,
    pub outcome: ScanOutcome,
    /// Bias-corrected dip-position map.
    pub map: Grid,
    /// Score of `map` against the true dip positions.
    pub map_score: Score,
}

#[derive(Debug, Clone)]
pub struct ImageRun {
    pub controller: ControllerKind,
    pub dips: Vec<DipRun>,
    pub truth: Option<Grid>,
    /// Present when both dips were scanned.
    pub phi: Option<Grid>,
    pub phi_score: Option<Score>,
}

impl ImageRun {
    pub fn fault_count(&self) -> usize {
        self.dips.iter().map(|d| d.outcome.faults.len()).sum()
    }

    pub fn dip(&self, dip: DipSelector) -> Option<&DipRun> {
        self.dips.iter().find(|d| d.dip == dip)
    }

    /// Fraction of Φ* pixels whose error is within [`WITHIN_FRACTION`] of the
    /// reference peak-to-peak.
    pub fn phi_within(&self) -> Option<f64> {
        let (s, t) = (self.phi_score.as_ref()?, self.truth.as_ref()?);
        Some(s.fraction_within(WITHIN_FRACTION * t.peak_to_peak()))
    }
}

/// Scans every configured dip (in parallel) and combines the maps into Φ*.
pub fn run_image(cfg: &RunConfig) -> Result<ImageRun, RunError> {
    cfg.validate()?;
    let (maps, truth) = cfg.load_sample()?;
    let dips = cfg
        .dips
        .par_iter()
        .map(|&dip| run_dip(cfg, &maps, dip))
        .collect::<Result<Vec<_>, _>>()?;
    let (phi, phi_score) = match (dips.iter().find(|d| d.dip == DipSelector::Negative), dips.iter().find(|d| d.dip == DipSelector::Positive)) {
        (Some(n), Some(p)) => {
            let (v0, dv0) = cfg.reference_levels();
            let phi = compute_phi_star(&n.map, &p.map, v0, dv0)?;
            let s = truth.as_ref().map(|t| score(&phi, t)).transpose()?;
            (Some(phi), s)
        }
        _ => (None, None),
    };
    Ok(ImageRun {
        controller: cfg.controller,
        dips,
        truth,
        phi,
        phi_score,
    })
}

fn run_dip(cfg: &RunConfig, maps: &DipMaps, dip: DipSelector) -> Result<DipRun, RunError> {
    let lc = cfg.loop_config(dip, cfg.controller);
    let outcome = run_scan(maps, &lc)?;
    let map = measured_map(&outcome, &lc, true)?;
    let truth = match dip {
        DipSelector::Negative => &maps.v_neg,
        DipSelector::Positive => &maps.v_pos,
    };
    let map_score = score(&map, truth)?;
    Ok(DipRun {
        dip,
        loop_config: lc,
        outcome,
        map,
        map_score,
    })
}

pub const RECORD_CSV: &str = "record.csv";
pub const PHI_STAR_TXT: &str = "phi_star.txt";
pub const PHI_STAR_PGM: &str = "phi_star.pgm";
pub const METRICS_TXT: &str = "metrics.txt";
pub const MANIFEST_TXT: &str = "manifest.txt";

pub fn map_file(dip: DipSelector) -> String {
    format!("map_{}.txt", dip.short_name())
}

/// Writes the artifacts of `run` into `out` and returns the file names.
pub fn write_image_run(cfg: &RunConfig, run: &ImageRun, out: &Path, wall: Duration) -> Result<Vec<String>, RunError> {
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    if cfg.record_every > 0 {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join(RECORD_CSV))?);
        writeln!(w, "dip,{}", ScanRecord::CSV_HEADER)?;
        for d in &run.dips {
            d.outcome.record.write_rows(&mut w, Some(d.dip.short_name()), cfg.record_every)?;
        }
        w.flush()?;
        files.push(RECORD_CSV.to_string());
    }
    for d in &run.dips {
        d.map.save(&out.join(map_file(d.dip)))?;
        files.push(map_file(d.dip));
    }
    if let Some(phi) = &run.phi {
        phi.save(&out.join(PHI_STAR_TXT))?;
        phi.save_pgm(&out.join(PHI_STAR_PGM))?;
        files.push(PHI_STAR_TXT.into());
        files.push(PHI_STAR_PGM.into());
    }
    if let (Some(t), Some(s)) = (&run.truth, &run.phi_score) {
        t.save(&out.join("phi_true.txt"))?;
        s.error_map.save(&out.join("error_map.txt"))?;
        files.push("phi_true.txt".into());
        files.push("error_map.txt".into());
    }
    metrics(cfg, run).save(&out.join(METRICS_TXT))?;
    files.push(METRICS_TXT.into());
    files.push(MANIFEST_TXT.into());
    manifest(cfg, run, &files, wall).save(&out.join(MANIFEST_TXT))?;
    Ok(files)
}

pub fn metrics(cfg: &RunConfig, run: &ImageRun) -> KvDoc {
    let mut m = KvDoc::new();
    m.set("controller", run.controller.name());
    m.set("faults", run.fault_count());
    for d in &run.dips {
        let p = d.dip.short_name();
        m.set(format!("{p}.faults"), d.outcome.faults.len());
        m.set(format!("{p}.map_rmse_mv"), d.map_score.rmse_mv);
        m.set(format!("{p}.map_max_abs_error_mv"), d.map_score.max_abs_error * 1e3);
        m.set(format!("{p}.mean_line_rms_error"), d.outcome.mean_line_rms_error());
    }
    if let Some(s) = &run.phi_score {
        for (k, v) in s.to_kv().iter() {
            m.set(format!("phi.{k}"), v);
        }
    }
    if let Some(f) = run.phi_within() {
        m.set("phi.within_2p5_percent", f);
    }
    let tp = Throughput::of(&cfg.scan);
    m.set("throughput.factor", tp.factor());
    m
}

pub fn manifest(cfg: &RunConfig, run: &ImageRun, files: &[String], wall: Duration) -> KvDoc {
    let mut m = cfg.to_kv();
    m.set("version", env!("CARGO_PKG_VERSION"));
    for d in &run.dips {
        let p = format!("derived.{}", d.dip.short_name());
        let dv = &d.outcome.derived;
        m.set(format!("{p}.v_b_init"), dv.v_b_init);
        if let Some(v) = dv.df_ref {
            m.set(format!("{p}.df_ref"), v);
        }
        if let Some(v) = dv.v_b_at_ref {
            m.set(format!("{p}.v_b_at_ref"), v);
        }
        if let Some(v) = dv.phi {
            m.set(format!("{p}.phi"), v);
        }
        if let Some(v) = dv.k_esc {
            m.set(format!("{p}.k_esc"), v);
        }
        m.set(format!("{p}.pll_alpha"), dv.pll_alpha);
        m.set(format!("{p}.seed"), d.loop_config.seed);
    }
    m.set("files", files.join(","));
    m.set("wall_time_s", wall.as_secs_f64());
    m
}

/// One sweep variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    /// `image` or `regain`.
    pub experiment: &'static str,
    pub controller: ControllerKind,
    pub dip: String,
    pub scan_time: f64,
    pub ff: bool,
    pub depth_scale: f64,
    pub width_scale: f64,
    pub mse: Option<f64>,
    pub rmse_mv: Option<f64>,
    pub psnr_db: Option<f64>,
    pub within: Option<f64>,
    pub faults: Option<usize>,
    pub regain_s: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "index,experiment,controller,dip,scan_time_s,ff,depth_scale,width_scale,mse_v2,rmse_mv,psnr_db,within_2p5,faults,regain_s,error";

    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.index,
            self.experiment,
            self.controller.name(),
            self.dip,
            self.scan_time,
            if self.ff { "on" } else { "off" },
            self.depth_scale,
            self.width_scale,
            o(self.mse),
            o(self.rmse_mv),
            o(self.psnr_db),
            o(self.within),
            self.faults.map(|f| f.to_string()).unwrap_or_default(),
            o(self.regain_s),
            self.error.as_deref().unwrap_or("").replace(',', ";"),
        )
    }
}

/// Runs every variant of the sweep axes. Image variants take the cartesian
/// product of scan-time factors, FF settings and controllers; regain variants
/// run the ESC regain experiment per depth and width scale. Variant failures
/// are recorded in their row.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>, RunError> {
    let axes = &cfg.sweep;
    if axes.is_empty() {
        return Err(RunError::EmptySweep);
    }
    let dips = cfg.dips.iter().map(|d| d.short_name()).collect::<Vec<_>>().join("+");
    let blank = SweepRow {
        index: 0,
        experiment: "image",
        controller: cfg.controller,
        dip: dips,
        scan_time: cfg.scan.scan_time_total,
        ff: cfg.ff.is_enabled(),
        depth_scale: 1.0,
        width_scale: 1.0,
        mse: None,
        rmse_mv: None,
        psnr_db: None,
        within: None,
        faults: None,
        regain_s: None,
        error: None,
    };

    let mut rows = Vec::new();
    if axes.has_image_axis() {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let ffs = if axes.ff.is_empty() { vec![cfg.ff.is_enabled()] } else { axes.ff.clone() };
        let ctrls = if axes.controllers.is_empty() { vec![cfg.controller] } else { axes.controllers.clone() };
        for f in or(&axes.scan_time_factors, 1.0) {
            for &ff in &ffs {
                for &c in &ctrls {
                    rows.push(SweepRow {
                        scan_time: cfg.scan.scan_time_total * f,
                        ff,
                        controller: c,
                        ..blank.clone()
                    });
                }
            }
        }
    }
    for dip in &cfg.dips {
        for &m in &axes.depth_scales {
            rows.push(SweepRow {
                experiment: "regain",
                controller: ControllerKind::Esc,
                dip: dip.short_name().into(),
                depth_scale: m,
                ..blank.clone()
            });
        }
        for &m in &axes.width_scales {
            rows.push(SweepRow {
                experiment: "regain",
                controller: ControllerKind::Esc,
                dip: dip.short_name().into(),
                width_scale: m,
                ..blank.clone()
            });
        }
    }
    for (i, r) in rows.iter_mut().enumerate() {
        r.index = i;
    }

    Ok(rows
        .into_par_iter()
        .map(|mut row| {
            let seed = derive_seed(cfg.seed, 1000 + row.index as u64);
            let res = if row.experiment == "image" {
                sweep_image(cfg, &mut row, seed)
            } else {
                sweep_regain(cfg, &mut row, seed)
            };
            if let Err(e) = res {
                row.error = Some(e.to_string());
            }
            row
        })
        .collect())
}

fn sweep_image(cfg: &RunConfig, row: &mut SweepRow, seed: u64) -> Result<(), RunError> {
    let mut v = cfg.clone();
    v.seed = seed;
    v.scan.scan_time_total = row.scan_time;
    v.controller = row.controller;
    if !row.ff {
        v.ff.enabled_after_lines = None;
    } else if v.ff.enabled_after_lines.is_none() {
        v.ff.enabled_after_lines = Some(1);
    }
    let run = run_image_with_sample_seed(&v, derive_seed(cfg.seed, 0))?;
    row.faults = Some(run.fault_count());
    if let Some(s) = &run.phi_score {
        row.mse = Some(s.mse);
        row.rmse_mv = Some(s.rmse_mv);
        row.psnr_db = Some(s.psnr_db);
        row.within = run.phi_within();
    } else if let [d] = run.dips.as_slice() {
        row.mse = Some(d.map_score.mse);
        row.rmse_mv = Some(d.map_score.rmse_mv);
        row.psnr_db = Some(d.map_score.psnr_db);
    }
    Ok(())
}

/// [`run_image`] with the synthetic sample drawn from `sample_seed` rather than
/// from the run seed, so sweep variants share one sample.
fn run_image_with_sample_seed(cfg: &RunConfig, sample_seed: u64) -> Result<ImageRun, RunError> {
    match &cfg.sample {
        SampleSource::Synthetic(spec) => {
            cfg.validate()?;
            let truth = gen_potential(spec, sample_seed)?;
            let maps = potential_to_dipmaps(&truth, spec)?;
            let dips = cfg
                .dips
                .par_iter()
                .map(|&dip| run_dip(cfg, &maps, dip))
                .collect::<Result<Vec<_>, _>>()?;
            let (n, p) = (
                dips.iter().find(|d| d.dip == DipSelector::Negative),
                dips.iter().find(|d| d.dip == DipSelector::Positive),
            );
            let (phi, phi_score) = match (n, p) {
                (Some(n), Some(p)) => {
                    let phi = compute_phi_star(&n.map, &p.map, spec.v_neg0, spec.delta_v0)?;
                    let s = score(&phi, &truth)?;
                    (Some(phi), Some(s))
                }
                _ => (None, None),
            };
            Ok(ImageRun {
                controller: cfg.controller,
                dips,
                truth: Some(truth),
                phi,
                phi_score,
            })
        }
        SampleSource::Maps { .. } => run_image(cfg),
    }
}

fn sweep_regain(cfg: &RunConfig, row: &mut SweepRow, seed: u64) -> Result<(), RunError> {
    let dip = DipSelector::parse(&row.dip).ok_or_else(|| RunError::Config(format!("bad dip {}", row.dip)))?;
    let spectrum = cfg.spectrum.scale_depths(row.depth_scale).scale_widths(row.width_scale);
    let mut rc = RegainConfig::new(spectrum, dip);
    rc.t_s = cfg.scan.t_s;
    rc.pll.omega = cfg.pll.omega;
    rc.seed = seed;
    let r = esc_regain(&rc)?;
    row.regain_s = r.settle_time;
    if r.settle_time.is_none() {
        row.error = Some(format!("not regained within {} s", rc.horizon));
    }
    Ok(())
}

/// Writes `sweep.csv` and `summary.txt`.
pub fn write_sweep(cfg: &RunConfig, rows: &[SweepRow], out: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(out)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("sweep.csv"))?);
    writeln!(w, "{}", SweepRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    summary(cfg, rows).save(&out.join("summary.txt"))?;
    Ok(())
}

pub fn summary(cfg: &RunConfig, rows: &[SweepRow]) -> KvDoc {
    let mut s = KvDoc::new();
    s.set("variants", rows.len());
    s.set("failed_variants", rows.iter().filter(|r| r.error.is_some()).count());
    s.set("variants_with_faults", rows.iter().filter(|r| r.faults.is_some_and(|f| f > 0)).count());
    let tp = Throughput::of(&cfg.scan);
    s.set("throughput.pixels", tp.pixels);
    s.set("throughput.spectroscopy_s", tp.spectroscopy_s);
    s.set("throughput.scan_s", tp.scan_s);
    s.set("throughput.pixel_rate_per_s", tp.pixel_rate());
    s.set("throughput.factor", tp.factor());
    s.set("throughput.effective_gain_neg", effective_gain(&cfg.esc[0], Some(cfg.pll.omega)));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::at_resolution(8, seed);
        cfg.scan.extent_x = 24.0;
        cfg.scan.extent_y = 24.0;
        cfg.scan.scan_time_total = 5.0 * 24.0 / crate::plant::NOMINAL_SPEED * 16.0;
        if let SampleSource::Synthetic(s) = &mut cfg.sample {
            s.extent_x = 24.0;
            s.extent_y = 24.0;
            s.blobs = vec![crate::samplegen::Blob {
                cx: 12.0,
                cy: 12.0,
                sx: 10.0,
                sy: 10.0,
                amplitude_mv: 20.0,
            }];
            s.random_blobs = 0;
            s.total_variation_mv = Some(20.0);
        }
        cfg.ff.window_n = 20;
        cfg
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(RunConfig::from_kv(&KvDoc::new(), None), Err(RunError::MissingSeed)));
        assert_eq!(RunConfig::from_kv(&KvDoc::new(), Some(4)).unwrap().seed, 4);
        let doc = KvDoc::parse("seed = 9\n").unwrap();
        assert_eq!(RunConfig::from_kv(&doc, None).unwrap().seed, 9);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = tiny(3);
        cfg.controller = ControllerKind::Stc;
        cfg.dips = vec![DipSelector::Positive];
        cfg.ff = FfConfig::disabled();
        cfg.scan.speed_profile = Some(vec![1.0, 2.0]);
        cfg.esc[1].k = -7e-5;
        cfg.stc[0].1 = 0.5;
        cfg.sweep.scan_time_factors = vec![1.0, 1.5];
        cfg.sweep.ff = vec![true, false];
        cfg.sweep.controllers = vec![ControllerKind::Esc];
        cfg.sweep.depth_scales = vec![1.0, 2.0];
        let back = RunConfig::from_kv(&cfg.to_kv(), None).unwrap();
        assert_eq!(back, cfg);
        let d = RunConfig::new(1);
        assert_eq!(RunConfig::from_kv(&d.to_kv(), None).unwrap(), d);
    }

    #[test]
    fn dotted_overrides() {
        let doc = KvDoc::parse(
            "seed = 1\nresolution = 16\ncontroller = stc\ndip = pos\nsample.random_blobs = 0\nscan.speed = 10\nplant.sigma_n = 0\nesc.k_neg = -1e-5\nff.enabled = off\nsweep.ff = on,off\n",
        )
        .unwrap();
        let c = RunConfig::from_kv(&doc, None).unwrap();
        assert_eq!(c.controller, ControllerKind::Stc);
        assert_eq!(c.dips, vec![DipSelector::Positive]);
        assert_eq!(c.scan.lines, 16);
        assert!((c.scan.speed() - 10.0).abs() < 1e-9);
        assert_eq!(c.pll.sigma_n, 0.0);
        assert_eq!(c.esc[0].k, -1e-5);
        assert!(!c.ff.is_enabled());
        assert_eq!(c.sweep.ff, vec![true, false]);
        match c.sample {
            SampleSource::Synthetic(s) => {
                assert_eq!(s.random_blobs, 0);
                assert_eq!((s.width, s.blobs.len()), (16, 4));
            }
            _ => panic!("expected synthetic sample"),
        }
        assert!(RunConfig::from_kv(&KvDoc::parse("seed = 1\ndip = up\n").unwrap(), None).is_err());
    }

    #[test]
    fn relative_and_per_dip_keys() {
        let doc = KvDoc::parse(
            "seed = 1\nplant.omega_pll = 20\nesc.omega_d_rel = 5\nesc.omega_L_rel = 0.1\nesc.k = -2e-5\nesc.dip = pos\nstc.K = 0.01\nstc.rho = 0.5\nstc.dip = neg\nff.enabled_after_lines = 3\nff.window_n = 50\nsweep.scan_times = 3600,7200\n",
        )
        .unwrap();
        let c = RunConfig::from_kv(&doc, None).unwrap();
        let (n, p) = (&c.esc[0], &c.esc[1]);
        assert_eq!((n.omega_d, n.omega_l, n.omega_h), (100.0, 10.0, 300.0));
        assert_eq!((n.k, p.k), (-5e-5, -2e-5));
        assert_eq!(c.stc[0], (0.01, 0.5));
        assert_eq!(c.stc[1], (crate::stc::StcParams::default_k(DipSelector::Positive), 0.59));
        assert_eq!((c.ff.enabled_after_lines, c.ff.window_n), (Some(3), 50));
        assert_eq!(c.sweep.scan_time_factors, vec![0.5, 1.0]);
    }

    #[test]
    fn throughput_of_default_raster() {
        let tp = Throughput::of(&ScanConfig::default());
        assert_eq!(tp.pixels, 40_000);
        assert!((tp.spectroscopy_s / 3600.0 - 66.666_666_666).abs() < 1e-6);
        assert!((tp.scan_s - 14_400.0).abs() < 1e-6);
        assert!((tp.factor() - 50.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn tiny_image_run_and_files() {
        let cfg = tiny(5);
        let run = run_image(&cfg).unwrap();
        assert_eq!(run.fault_count(), 0);
        let s = run.phi_score.as_ref().unwrap();
        assert!(s.rmse_mv < 5.0, "{}", s.rmse_mv);
        let dir = tempfile::tempdir().unwrap();
        let files = write_image_run(&cfg, &run, dir.path(), Duration::ZERO).unwrap();
        for f in ["record.csv", "map_neg.txt", "map_pos.txt", "phi_star.txt", "phi_star.pgm", "metrics.txt", "manifest.txt"] {
            assert!(files.iter().any(|x| x == f), "{f}");
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let m = KvDoc::load(&dir.path().join("manifest.txt")).unwrap();
        let again = RunConfig::from_kv(&m, None).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn empty_sweep_is_an_error() {
        assert!(matches!(run_sweep(&tiny(1)), Err(RunError::EmptySweep)));
    }

    #[test]
    fn sweep_rows() {
        let mut cfg = tiny(2);
        cfg.sweep.scan_time_factors = vec![1.0, 2.0];
        cfg.sweep.depth_scales = vec![1.0, 2.0];
        cfg.dips = DipSelector::BOTH.to_vec();
        let rows = run_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 2 + 4);
        assert!(rows.iter().all(|r| r.error.is_none()), "{rows:?}");
        assert_eq!(rows[1].scan_time, 2.0 * cfg.scan.scan_time_total);
        assert!(rows[..2].iter().all(|r| r.mse.is_some() && r.faults == Some(0)));
        let neg: Vec<_> = rows.iter().filter(|r| r.experiment == "regain" && r.dip == "neg").collect();
        assert!(neg[1].regain_s.unwrap() < neg[0].regain_s.unwrap());
        let csv = rows[0].to_csv();
        assert_eq!(csv.split(',').count(), SweepRow::CSV_HEADER.split(',').count());
    }
}
