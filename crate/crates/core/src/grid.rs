//! Row-major 2-D grids and their text/PGM encodings.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("row {row}: expected {expected} values, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {col}: cannot parse {text:?}")]
    Parse { row: usize, col: usize, text: String },
    #[error("empty matrix")]
    Empty,
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `height` rows of `width` values; row `iy` is scan line `iy`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for iy in 0..height {
            for ix in 0..width {
                data.push(f(ix, iy));
            }
        }
        Grid { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != width * height {
            return Err(GridError::Shape(width, height, data.len(), 1));
        }
        Ok(Grid { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        self.data[iy * self.width + ix] = v;
    }

    pub fn same_shape(&self, other: &Grid) -> Result<(), GridError> {
        if self.width != other.width || self.height != other.height {
            return Err(GridError::Shape(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid, GridError> {
        self.same_shape(other)?;
        Ok(Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn peak_to_peak(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Comma-separated text, one row per line, shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 24);
        for row in self.data.chunks(self.width.max(1)) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, GridError> {
        let mut data = Vec::new();
        let mut width = 0;
        let mut height = 0;
        for (row, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut count = 0;
            for (col, field) in line.split(',').enumerate() {
                let field = field.trim();
                let v = field.parse::<f64>().map_err(|_| GridError::Parse {
                    row,
                    col,
                    text: field.to_string(),
                })?;
                data.push(v);
                count += 1;
            }
            if height == 0 {
                width = count;
            } else if count != width {
                return Err(GridError::Ragged {
                    row,
                    expected: width,
                    found: count,
                });
            }
            height += 1;
        }
        if height == 0 {
            return Err(GridError::Empty);
        }
        Ok(Grid { width, height, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Binary 8-bit portable graymap, min-max normalized, row 0 at the top.
    pub fn to_pgm(&self) -> Vec<u8> {
        let lo = self.min();
        let span = self.max() - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| {
            if span > 0.0 && v.is_finite() {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), GridError> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}
