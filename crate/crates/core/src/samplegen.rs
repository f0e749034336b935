//! Synthetic ground-truth potential surfaces and the dip maps they imply.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::Grid;
use crate::kv::{KvDoc, KvError};
use crate::plant::{DipMaps, PlantError};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sample has no features (no blobs, no random blobs, no ramp)")]
    Empty,
    #[error("generated surface is flat; cannot rescale to a total variation")]
    Flat,
    #[error("invalid sample spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

/// Elliptical Gaussian bump. Positions and widths in Å, amplitude in mV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sx: f64,
    pub sy: f64,
    pub amplitude_mv: f64,
}

impl Blob {
    pub fn value_mv(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.cx) / self.sx;
        let v = (y - self.cy) / self.sy;
        self.amplitude_mv * (-0.5 * (u * u + v * v)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DipMapMode {
    /// All of Φ* goes into `V⁻`; `V⁺ - V⁻ = ΔV₀` everywhere.
    ShiftNegOnly,
    /// Fraction `f` of Φ* is carried by the dip spacing `ΔV`.
    Split(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub width: usize,
    pub height: usize,
    pub extent_x: f64,
    pub extent_y: f64,
    pub blobs: Vec<Blob>,
    /// Extra blobs drawn from the seed.
    pub random_blobs: usize,
    /// Linear ramp `(d/dx, d/dy)` in mV/Å.
    pub ramp_mv_per_a: Option<(f64, f64)>,
    pub v_neg0: f64,
    pub delta_v0: f64,
    /// Target peak-to-peak Φ* in mV; `None` keeps raw amplitudes.
    pub total_variation_mv: Option<f64>,
    pub mode: DipMapMode,
}

impl Default for SampleSpec {
    /// 200 x 200 pixels over 600 Å: a broad raised island, three molecule-like
    /// depressions and two seeded random features, 190.5 mV peak to peak.
    fn default() -> Self {
        let b = |cx, cy, sx, sy, amplitude_mv| Blob {
            cx,
            cy,
            sx,
            sy,
            amplitude_mv,
        };
        SampleSpec {
            width: 200,
            height: 200,
            extent_x: 600.0,
            extent_y: 600.0,
            blobs: vec![
                b(375.0, 345.0, 140.0, 110.0, 60.0),
                b(172.0, 188.0, 44.0, 44.0, -45.0),
                b(188.0, 438.0, 38.0, 50.0, -40.0),
                b(469.0, 140.0, 50.0, 38.0, -35.0),
            ],
            random_blobs: 2,
            ramp_mv_per_a: None,
            v_neg0: -1.3,
            delta_v0: 5.6,
            total_variation_mv: Some(190.5),
            mode: DipMapMode::ShiftNegOnly,
        }
    }
}

impl SampleSpec {
    /// Default sample sampled on an `n x n` grid over the same field.
    pub fn at_resolution(n: usize) -> Self {
        SampleSpec {
            width: n,
            height: n,
            ..SampleSpec::default()
        }
    }

    /// Potential rising steeply along x, with a slope that grows with y so
    /// the first lines are gentle.
    pub fn steep_ramp() -> Self {
        SampleSpec {
            blobs: vec![Blob {
                cx: 300.0,
                cy: 812.0,
                sx: 125.0,
                sy: 281.0,
                amplitude_mv: 1.0,
            }],
            random_blobs: 0,
            ..SampleSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::Invalid(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be at least 1 x 1");
        }
        if !(self.extent_x >= 0.0 && self.extent_y >= 0.0) {
            return bad("extents must be non-negative");
        }
        if !(self.delta_v0 > 0.0) {
            return bad("delta_v0 must be positive");
        }
        if !self.v_neg0.is_finite() || self.v_neg0 == 0.0 {
            return bad("v_neg0 must be finite and nonzero");
        }
        if self
            .blobs
            .iter()
            .any(|b| !(b.sx > 0.0 && b.sy > 0.0) || !b.amplitude_mv.is_finite())
        {
            return bad("blob widths must be positive");
        }
        if let Some(t) = self.total_variation_mv {
            if !(t > 0.0 && t.is_finite()) {
                return bad("total variation must be positive");
            }
        }
        if let DipMapMode::Split(f) = self.mode {
            if !(0.0..=1.0).contains(&f) {
                return bad("split fraction must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn pixel_xy(&self, ix: usize, iy: usize) -> (f64, f64) {
        let at = |i: usize, n: usize, e: f64| if n > 1 { i as f64 * e / (n - 1) as f64 } else { 0.0 };
        (at(ix, self.width, self.extent_x), at(iy, self.height, self.extent_y))
    }

    /// Reads `width`, `height`, `extent` (or `extent_x`/`extent_y`),
    /// `blob.<name> = cx,cy,sx,sy,amp_mV`, `random_blobs`, `ramp = gx,gy`,
    /// `v_neg0`, `delta_v0`, `total_variation_mv` (`none` disables),
    /// `mode` (`shift_neg_only` | `split`), `split_fraction` and `preset`.
    pub fn from_kv(doc: &KvDoc) -> Result<Self, SampleError> {
        let mut s = match doc.get("preset") {
            None | Some("default") => SampleSpec::default(),
            Some("steep_ramp") => SampleSpec::steep_ramp(),
            Some(other) => return Err(SampleError::Invalid(format!("unknown preset {other:?}"))),
        };
        s.width = doc.usize_or("width", s.width)?;
        s.height = doc.usize_or("height", s.height)?;
        let extent = doc.f64("extent")?;
        s.extent_x = doc.f64_or("extent_x", extent.unwrap_or(s.extent_x))?;
        s.extent_y = doc.f64_or("extent_y", extent.unwrap_or(s.extent_y))?;
        let blob_doc = doc.section("blob.");
        if blob_doc.keys().next().is_some() || doc.bool_or("clear_blobs", false)? {
            s.blobs.clear();
        }
        for key in blob_doc.keys() {
            let v = blob_doc.f64_list(key)?.unwrap_or_default();
            if v.len() != 5 {
                return Err(SampleError::Invalid(format!(
                    "blob.{key}: expected cx,cy,sx,sy,amplitude_mv"
                )));
            }
            s.blobs.push(Blob {
                cx: v[0],
                cy: v[1],
                sx: v[2],
                sy: v[3],
                amplitude_mv: v[4],
            });
        }
        s.random_blobs = doc.usize_or("random_blobs", s.random_blobs)?;
        if let Some(r) = doc.f64_list("ramp")? {
            if r.len() != 2 {
                return Err(SampleError::Invalid("ramp: expected gx,gy".into()));
            }
            s.ramp_mv_per_a = Some((r[0], r[1]));
        }
        s.v_neg0 = doc.f64_or("v_neg0", s.v_neg0)?;
        s.delta_v0 = doc.f64_or("delta_v0", s.delta_v0)?;
        match doc.get("total_variation_mv") {
            Some("none") => s.total_variation_mv = None,
            Some(_) => s.total_variation_mv = doc.f64("total_variation_mv")?,
            None => {}
        }
        match doc.get("mode") {
            None | Some("shift_neg_only") => {}
            Some("split") => {
                s.mode = DipMapMode::Split(doc.f64_or("split_fraction", 0.5)?)
            }
            Some(other) => return Err(SampleError::Invalid(format!("unknown mode {other:?}"))),
        }
        s.validate()?;
        Ok(s)
    }

    /// Fully resolved form; `from_kv` reads it back unchanged.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("width", self.width);
        doc.set("height", self.height);
        doc.set("extent_x", self.extent_x);
        doc.set("extent_y", self.extent_y);
        doc.set("clear_blobs", "on");
        for (i, b) in self.blobs.iter().enumerate() {
            doc.set(
                format!("blob.b{i}"),
                format!("{},{},{},{},{}", b.cx, b.cy, b.sx, b.sy, b.amplitude_mv),
            );
        }
        doc.set("random_blobs", self.random_blobs);
        if let Some((gx, gy)) = self.ramp_mv_per_a {
            doc.set("ramp", format!("{gx},{gy}"));
        }
        doc.set("v_neg0", self.v_neg0);
        doc.set("delta_v0", self.delta_v0);
        match self.total_variation_mv {
            Some(t) => doc.set("total_variation_mv", t),
            None => doc.set("total_variation_mv", "none"),
        }
        match self.mode {
            DipMapMode::ShiftNegOnly => doc.set("mode", "shift_neg_only"),
            DipMapMode::Split(f) => {
                doc.set("mode", "split");
                doc.set("split_fraction", f);
            }
        }
        doc
    }
}

fn random_blob(rng: &mut ChaCha8Rng, spec: &SampleSpec) -> Blob {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    Blob {
        cx: rng.random_range(0.0..=spec.extent_x),
        cy: rng.random_range(0.0..=spec.extent_y),
        sx: spec.extent_x * rng.random_range(0.05..0.13),
        sy: spec.extent_y * rng.random_range(0.05..0.13),
        amplitude_mv: sign * rng.random_range(15.0..40.0),
    }
}

/// Φ* in volts: blobs plus ramp, scaled to the total-variation target.
pub fn gen_potential(spec: &SampleSpec, seed: u64) -> Result<Grid, SampleError> {
    spec.validate()?;
    if spec.blobs.is_empty() && spec.random_blobs == 0 && spec.ramp_mv_per_a.is_none() {
        return Err(SampleError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs = spec.blobs.clone();
    blobs.extend((0..spec.random_blobs).map(|_| random_blob(&mut rng, spec)));
    let (gx, gy) = spec.ramp_mv_per_a.unwrap_or((0.0, 0.0));
    let raw_mv = Grid::from_fn(spec.width, spec.height, |ix, iy| {
        let (x, y) = spec.pixel_xy(ix, iy);
        gx * x + gy * y + blobs.iter().map(|b| b.value_mv(x, y)).sum::<f64>()
    });
    let scale = match spec.total_variation_mv {
        None => 1.0,
        Some(target) => {
            let ptp = raw_mv.peak_to_peak();
            if !(ptp > 0.0) {
                return Err(SampleError::Flat);
            }
            target / ptp
        }
    };
    Ok(raw_mv.map(|v| v * scale * 1e-3))
}

/// Inverts the potential formula pixelwise into `(V⁻, V⁺)` maps.
pub fn potential_to_dipmaps(phi: &Grid, spec: &SampleSpec) -> Result<DipMaps, SampleError> {
    if !(spec.delta_v0 > 0.0) {
        return Err(SampleError::Invalid("delta_v0 must be positive".into()));
    }
    let f = match spec.mode {
        DipMapMode::ShiftNegOnly => 0.0,
        DipMapMode::Split(f) => f,
    };
    let (v0, dv0) = (spec.v_neg0, spec.delta_v0);
    let v_neg = phi.map(|p| v0 - (1.0 - f) * p);
    let v_pos = phi.map(|p| {
        let v_neg = v0 - (1.0 - f) * p;
        let dv = if f == 0.0 { dv0 } else { dv0 * (v0 + f * p) / v0 };
        v_neg + dv
    });
    Ok(DipMaps::new(v_neg, v_pos, spec.extent_x, spec.extent_y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::compute_phi_star;
    use proptest::prelude::*;

    fn one_blob() -> SampleSpec {
        SampleSpec {
            width: 33,
            height: 33,
            extent_x: 64.0,
            extent_y: 64.0,
            blobs: vec![Blob {
                cx: 32.0,
                cy: 32.0,
                sx: 8.0,
                sy: 8.0,
                amplitude_mv: 100.0,
            }],
            random_blobs: 0,
            total_variation_mv: None,
            ..SampleSpec::default()
        }
    }

    #[test]
    fn single_blob_peak() {
        let g = gen_potential(&one_blob(), 0).unwrap();
        assert!((g.get(16, 16) - 0.1).abs() < 1e-15);
        assert_eq!(g.max(), g.get(16, 16));
    }

    #[test]
    fn rescaled_total_variation() {
        let mut spec = one_blob();
        spec.blobs = vec![
            Blob { cx: 10.0, cy: 10.0, sx: 4.0, sy: 4.0, amplitude_mv: 50.0 },
            Blob { cx: 54.0, cy: 54.0, sx: 4.0, sy: 4.0, amplitude_mv: -50.0 },
        ];
        spec.total_variation_mv = Some(190.5);
        let g = gen_potential(&spec, 0).unwrap();
        assert!((g.peak_to_peak() - 0.1905).abs() < 1e-12);
    }

    #[test]
    fn default_sample_is_seeded() {
        let spec = SampleSpec::default();
        let a = gen_potential(&spec, 5).unwrap();
        assert_eq!(a, gen_potential(&spec, 5).unwrap());
        assert_ne!(a, gen_potential(&spec, 6).unwrap());
        assert!((a.peak_to_peak() - 0.1905).abs() < 1e-12);
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = SampleSpec {
            blobs: vec![],
            random_blobs: 0,
            ..SampleSpec::default()
        };
        assert!(matches!(gen_potential(&spec, 0), Err(SampleError::Empty)));
    }

    #[test]
    fn zero_potential_maps_to_references() {
        let spec = SampleSpec::default();
        let maps = potential_to_dipmaps(&Grid::filled(3, 3, 0.0), &spec).unwrap();
        assert!(maps.v_neg.data().iter().all(|&v| v == -1.3));
        assert!(maps.v_pos.data().iter().all(|&v| v == -1.3 + 5.6));
    }

    #[test]
    fn single_pixel_inversion() {
        let spec = SampleSpec::default();
        let maps = potential_to_dipmaps(&Grid::filled(1, 1, 0.03839), &spec).unwrap();
        assert!((maps.v_neg.get(0, 0) - -1.33839).abs() < 1e-15);
    }

    #[test]
    fn kv_overrides() {
        let doc = KvDoc::parse(
            "width = 8\nheight = 4\nextent = 21\nblob.a = 1,2,3,4,5\nramp = 0.1,0\nmode = split\nsplit_fraction = 0.25\ntotal_variation_mv = none\n",
        )
        .unwrap();
        let s = SampleSpec::from_kv(&doc).unwrap();
        assert_eq!((s.width, s.height, s.extent_x, s.extent_y), (8, 4, 21.0, 21.0));
        assert_eq!(s.blobs.len(), 1);
        assert_eq!(s.ramp_mv_per_a, Some((0.1, 0.0)));
        assert_eq!(s.mode, DipMapMode::Split(0.25));
        assert_eq!(s.total_variation_mv, None);
    }

    #[test]
    fn kv_round_trip() {
        let mut spec = SampleSpec::steep_ramp();
        spec.ramp_mv_per_a = Some((0.25, -1.0 / 3.0));
        spec.mode = DipMapMode::Split(0.3);
        spec.total_variation_mv = None;
        assert_eq!(SampleSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        let spec = SampleSpec::default();
        assert_eq!(SampleSpec::from_kv(&spec.to_kv()).unwrap(), spec);
    }

    proptest! {
        #[test]
        fn round_trip_both_modes(
            vals in proptest::collection::vec(-0.2f64..0.2, 20),
            f in 0.0f64..1.0,
            split in any::<bool>(),
        ) {
            let phi = Grid::from_vec(5, 4, vals).unwrap();
            let spec = SampleSpec {
                mode: if split { DipMapMode::Split(f) } else { DipMapMode::ShiftNegOnly },
                ..SampleSpec::default()
            };
            let maps = potential_to_dipmaps(&phi, &spec).unwrap();
            let back = compute_phi_star(&maps.v_neg, &maps.v_pos, spec.v_neg0, spec.delta_v0).unwrap();
            for (a, b) in back.data().iter().zip(phi.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            if !split {
                for (n, p) in maps.v_neg.data().iter().zip(maps.v_pos.data()) {
                    prop_assert!((p - n - 5.6).abs() < 1e-12);
                }
            }
        }
    }
}
