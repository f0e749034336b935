//! Scan records, per-pixel map assembly, the potential formula and image
//! scoring.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::grid::{Grid, GridError};
use crate::kv::KvDoc;
use crate::plant::{ScanConfig, ScanDirection};
use crate::spectrum::{true_dip_minimum, DipSelector, SpectrumParams};
use crate::stc::{level_crossing, StcError};

/// PSNR reported for a perfect match.
pub const PSNR_SATURATED: f64 = 999.0;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("{} pixel(s) without samples, first {:?}", .0.len(), .0.first())]
    Coverage(Vec<(usize, usize)>),
    #[error("reference offset delta_v0 must be nonzero")]
    ZeroDeltaV,
    #[error("non-finite pixel at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("bias correction did not converge for V_b = {0} V")]
    Correction(f64),
    #[error(transparent)]
    Stc(#[from] StcError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub pixel: (usize, usize),
    pub direction: ScanDirection,
    /// `V_b,C + V_b,FF`, without dither.
    pub v_b: f64,
    pub v_b_c: f64,
    pub v_b_ff: f64,
    pub dither: f64,
    pub df_meas: f64,
    pub fault: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ScanRecord {
    pub samples: Vec<RecordSample>,
}

impl ScanRecord {
    pub const CSV_HEADER: &'static str = "t,x,y,ix,iy,dir,v_b,v_b_c,v_b_ff,dither,df_meas,fault";

    pub fn push(&mut self, s: RecordSample) {
        self.samples.push(s);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        self.write_rows(w, None, 1)
    }

    /// Writes every `every`-th sample as a CSV row, optionally prefixed by a
    /// `tag` column; no header.
    pub fn write_rows(&self, w: &mut impl std::io::Write, tag: Option<&str>, every: usize) -> std::io::Result<()> {
        let mut line = String::with_capacity(160);
        for s in self.samples.iter().step_by(every.max(1)) {
            line.clear();
            if let Some(tag) = tag {
                line.push_str(tag);
                line.push(',');
            }
            let _ = writeln!(
                line,
                "{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{}",
                s.t,
                s.x,
                s.y,
                s.pixel.0,
                s.pixel.1,
                s.direction.name(),
                s.v_b,
                s.v_b_c,
                s.v_b_ff,
                s.dither,
                s.df_meas,
                u8::from(s.fault)
            );
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), ImagingError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Per-pixel mean of a record, with the pixels that saw no samples.
#[derive(Debug, Clone)]
pub struct AssembledMap {
    /// NaN where no sample landed.
    pub map: Grid,
    pub counts: Vec<usize>,
    pub missing: Vec<(usize, usize)>,
}

impl AssembledMap {
    pub fn complete(self) -> Result<Grid, ImagingError> {
        if self.missing.is_empty() {
            Ok(self.map)
        } else {
            Err(ImagingError::Coverage(self.missing))
        }
    }
}

/// Mean `V_b` per pixel over both scan directions.
pub fn assemble_map(rec: &ScanRecord, cfg: &ScanConfig) -> AssembledMap {
    assemble_with(rec, cfg, |s| s.v_b)
}

pub fn assemble_with(rec: &ScanRecord, cfg: &ScanConfig, f: impl Fn(&RecordSample) -> f64) -> AssembledMap {
    let (w, h) = (cfg.pixels_per_line, cfg.lines);
    let mut sum = vec![0.0; w * h];
    let mut counts = vec![0usize; w * h];
    for s in &rec.samples {
        let (ix, iy) = s.pixel;
        if ix < w && iy < h {
            sum[iy * w + ix] += f(s);
            counts[iy * w + ix] += 1;
        }
    }
    let mut missing = Vec::new();
    let data = sum
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (s, &c))| {
            if c == 0 {
                missing.push((i % w, i / w));
                f64::NAN
            } else {
                s / c as f64
            }
        })
        .collect();
    AssembledMap {
        map: Grid::from_vec(w, h, data).expect("sized from config"),
        counts,
        missing,
    }
}

pub fn phi_star(v_neg: f64, v_pos: f64, v_neg0: f64, delta_v0: f64) -> f64 {
    v_neg0 * (v_pos - v_neg) / delta_v0 - v_neg
}

/// Φ* per pixel from the two dip maps.
pub fn compute_phi_star(v_neg: &Grid, v_pos: &Grid, v_neg0: f64, delta_v0: f64) -> Result<Grid, ImagingError> {
    if delta_v0 == 0.0 {
        return Err(ImagingError::ZeroDeltaV);
    }
    let g = v_neg.zip_map(v_pos, |n, p| phi_star(n, p, v_neg0, delta_v0))?;
    for iy in 0..g.height() {
        for ix in 0..g.width() {
            if !g.get(ix, iy).is_finite() {
                return Err(ImagingError::NonFinite(ix, iy));
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct Score {
    /// Mean squared error in V².
    pub mse: f64,
    /// Root mean squared error in mV.
    pub rmse_mv: f64,
    /// dB relative to the reference peak-to-peak; [`PSNR_SATURATED`] when exact.
    pub psnr_db: f64,
    /// `image - reference`, V.
    pub error_map: Grid,
    pub max_abs_error: f64,
}

impl Score {
    /// Fraction of pixels with `|error| <= tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        let d = self.error_map.data();
        d.iter().filter(|e| e.abs() <= tol).count() as f64 / d.len() as f64
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("mse_v2", format!("{:e}", self.mse));
        doc.set("rmse_mv", self.rmse_mv);
        doc.set("psnr_db", self.psnr_db);
        doc.set("max_abs_error_mv", self.max_abs_error * 1e3);
        doc
    }
}

pub fn score(image: &Grid, reference: &Grid) -> Result<Score, ImagingError> {
    let error_map = image.zip_map(reference, |a, b| a - b)?;
    let n = error_map.data().len() as f64;
    let mse = error_map.data().iter().map(|e| e * e).sum::<f64>() / n;
    let r = reference.peak_to_peak();
    let psnr_db = if mse == 0.0 {
        PSNR_SATURATED
    } else {
        10.0 * (r * r / mse).log10()
    };
    let max_abs_error = error_map.data().iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Ok(Score {
        mse,
        rmse_mv: mse.sqrt() * 1e3,
        psnr_db,
        error_map,
        max_abs_error,
    })
}

/// Where a converged controller sits relative to a dip centred at `V∓`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrackingTarget {
    /// Minimum of the full spectrum (ESC).
    Minimum,
    /// Inner-slope crossing of a fixed level in Hz (STC).
    Level(f64),
}

/// Maps a settled bias back to the dip centre that produces it.
#[derive(Debug, Clone, Copy)]
pub struct BiasCorrection {
    pub params: SpectrumParams,
    pub dip: DipSelector,
    pub target: TrackingTarget,
}

impl BiasCorrection {
    /// Settled bias for a dip centred at `center`.
    pub fn tracked_point(&self, center: f64) -> Result<f64, ImagingError> {
        let p = self.params.with_center(self.dip, center);
        Ok(match self.target {
            TrackingTarget::Minimum => true_dip_minimum(&p, self.dip).map_err(StcError::from)?,
            TrackingTarget::Level(df) => level_crossing(&p, self.dip, df)?,
        })
    }

    /// Inverse of [`tracked_point`](Self::tracked_point) by fixed-point iteration.
    pub fn center_for(&self, v_b: f64) -> Result<f64, ImagingError> {
        let mut c = v_b;
        for _ in 0..100 {
            let r = v_b - self.tracked_point(c)?;
            c += r;
            if r.abs() < 1e-13 {
                return Ok(c);
            }
        }
        Err(ImagingError::Correction(v_b))
    }

    /// Offset between the tracked point and the centre of the unshifted dip.
    pub fn nominal_offset(&self) -> Result<f64, ImagingError> {
        let c = self.params.center(self.dip);
        Ok(self.tracked_point(c)? - c)
    }

    /// Corrects every pixel. Pixels whose bias cannot be inverted (the loop
    /// was off the dip) get the nominal offset removed instead; their count is
    /// returned alongside the map.
    pub fn apply(&self, map: &Grid) -> Result<(Grid, usize), ImagingError> {
        let offset = self.nominal_offset()?;
        let mut fallbacks = 0;
        let out = map.map(|v| match self.center_for(v) {
            Ok(c) => c,
            Err(_) => {
                fallbacks += 1;
                v - offset
            }
        });
        Ok((out, fallbacks))
    }
}
