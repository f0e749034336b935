//! Previous-line feedforward: replay the bias recorded on the last pass in
//! the same direction, mean-filtered and indexed by tip x-position.

use thiserror::Error;

use crate::plant::ScanDirection;

#[derive(Debug, Error, PartialEq)]
pub enum FfError {
    #[error("cannot advance a line buffer with no recorded samples")]
    EmptyLine,
    #[error("filter window must hold at least one sample")]
    Window,
}

/// What the replayed bias is expressed relative to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Controller output captured once, when feedforward switches on.
    OnEnable,
    /// Controller output captured at the start of every pass, so feedback
    /// only carries the change relative to the previous line.
    PerPass,
}

impl Baseline {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "enable" | "on_enable" => Some(Baseline::OnEnable),
            "pass" | "per_pass" | "line" => Some(Baseline::PerPass),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::OnEnable => "on_enable",
            Baseline::PerPass => "per_pass",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfConfig {
    /// Lines that must be complete before feedforward engages; `None` disables it.
    pub enabled_after_lines: Option<usize>,
    pub window_n: usize,
    pub baseline: Baseline,
}

impl Default for FfConfig {
    fn default() -> Self {
        FfConfig {
            enabled_after_lines: Some(1),
            window_n: 400,
            baseline: Baseline::OnEnable,
        }
    }
}

impl FfConfig {
    pub fn disabled() -> Self {
        FfConfig {
            enabled_after_lines: None,
            ..FfConfig::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled_after_lines.is_some()
    }
}

/// `(x, V_b)` samples of the line being scanned and of the previous one.
#[derive(Debug, Clone, Default)]
pub struct LineBuffer {
    prev: Vec<(f64, f64)>,
    curr: Vec<(f64, f64)>,
    line_index: usize,
}

impl LineBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, x: f64, v_b: f64) {
        self.curr.push((x, v_b));
    }

    pub fn advance(&mut self) -> Result<(), FfError> {
        if self.curr.is_empty() {
            return Err(FfError::EmptyLine);
        }
        self.prev = std::mem::take(&mut self.curr);
        self.line_index += 1;
        Ok(())
    }

    pub fn prev_line(&self) -> &[(f64, f64)] {
        &self.prev
    }

    pub fn curr_line(&self) -> &[(f64, f64)] {
        &self.curr
    }

    pub fn line_index(&self) -> usize {
        self.line_index
    }

    /// Index of the previous-line sample nearest to `x`.
    pub fn nearest(&self, x: f64) -> Option<usize> {
        let p = &self.prev;
        if p.is_empty() {
            return None;
        }
        let ascending = p[0].0 <= p[p.len() - 1].0;
        let i = if ascending {
            p.partition_point(|s| s.0 < x)
        } else {
            p.partition_point(|s| s.0 > x)
        };
        Some(match i {
            0 => 0,
            i if i == p.len() => p.len() - 1,
            i => {
                if (p[i].0 - x).abs() < (p[i - 1].0 - x).abs() {
                    i
                } else {
                    i - 1
                }
            }
        })
    }

    /// Mean of the `n` previous-line samples centred on the nearest one,
    /// indices clamped to the line ends.
    pub fn window_mean(&self, x: f64, n: usize) -> Option<f64> {
        let i = self.nearest(x)? as isize;
        let n = n.max(1) as isize;
        let start = i - (n - 1) / 2;
        let last = self.prev.len() as isize - 1;
        let sum: f64 = (start..start + n)
            .map(|j| self.prev[j.clamp(0, last) as usize].1)
            .sum();
        Some(sum / n as f64)
    }
}

/// Feedforward generator for a back-and-forth raster, one buffer per
/// direction.
#[derive(Debug, Clone)]
pub struct Feedforward {
    pub config: FfConfig,
    buffers: [LineBuffer; 2],
    active: bool,
    baseline: f64,
}

impl Feedforward {
    pub fn new(config: FfConfig) -> Result<Self, FfError> {
        if config.window_n == 0 {
            return Err(FfError::Window);
        }
        Ok(Feedforward {
            config,
            buffers: [LineBuffer::new(), LineBuffer::new()],
            active: false,
            baseline: 0.0,
        })
    }

    pub fn buffer(&self, dir: ScanDirection) -> &LineBuffer {
        &self.buffers[dir.index()]
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// Called when a pass in direction `dir` begins, after `lines_done`
    /// complete lines, with the controller output `v_b_c` at that instant.
    pub fn start_pass(&mut self, dir: ScanDirection, lines_done: usize, v_b_c: f64) {
        let Some(after) = self.config.enabled_after_lines else {
            return;
        };
        let ready = lines_done >= after.max(1) && !self.buffers[dir.index()].prev.is_empty();
        if !ready {
            return;
        }
        match self.config.baseline {
            Baseline::OnEnable => {
                if !self.active {
                    self.baseline = v_b_c;
                }
            }
            Baseline::PerPass => self.baseline = v_b_c,
        }
        self.active = true;
    }

    /// Closes the pass in direction `dir`.
    pub fn end_pass(&mut self, dir: ScanDirection) -> Result<(), FfError> {
        if !self.config.is_enabled() {
            return Ok(());
        }
        self.buffers[dir.index()].advance()
    }

    pub fn record(&mut self, dir: ScanDirection, x: f64, v_b: f64) {
        if self.config.is_enabled() {
            self.buffers[dir.index()].record(x, v_b);
        }
    }

    /// `V_b,FF` at position `x`; exactly zero while inactive.
    pub fn query(&self, dir: ScanDirection, x: f64) -> f64 {
        if !self.active {
            return 0.0;
        }
        match self.buffers[dir.index()].window_mean(x, self.config.window_n) {
            Some(m) => m - self.baseline,
            None => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn buffer_with(samples: &[(f64, f64)]) -> LineBuffer {
        let mut b = LineBuffer::new();
        for &(x, v) in samples {
            b.record(x, v);
        }
        b.advance().unwrap();
        b
    }

    #[test]
    fn record_and_advance() {
        let mut b = LineBuffer::new();
        assert_eq!(b.advance(), Err(FfError::EmptyLine));
        b.record(0.0, 1.0);
        assert_eq!(b.curr_line().len(), 1);
        b.advance().unwrap();
        b.record(0.0, 2.0);
        b.record(1.0, 2.0);
        b.advance().unwrap();
        assert_eq!(b.prev_line(), &[(0.0, 2.0), (1.0, 2.0)]);
        assert_eq!(b.line_index(), 2);
        assert!(b.curr_line().is_empty());
    }

    #[test]
    fn large_buffer_keeps_everything() {
        let mut b = LineBuffer::new();
        for i in 0..10_000 {
            b.record(i as f64, i as f64);
        }
        b.advance().unwrap();
        assert_eq!(b.prev_line().len(), 10_000);
    }

    #[test]
    fn window_means() {
        let b = buffer_with(&[(0.0, 0.0), (1.0, 1e-3), (2.0, 2e-3), (3.0, 3e-3), (4.0, 0.0)]);
        assert_eq!(b.window_mean(2.1, 1), Some(2e-3));
        assert!((b.window_mean(2.0, 3).unwrap() - 2e-3).abs() < 1e-18);
        // clamped at the left end: samples 0, 0, 1
        assert!((b.window_mean(0.0, 3).unwrap() - 1e-3 / 3.0).abs() < 1e-18);
    }

    #[test]
    fn descending_positions() {
        let b = buffer_with(&[(4.0, 4.0), (3.0, 3.0), (2.0, 2.0), (1.0, 1.0)]);
        assert_eq!(b.window_mean(2.9, 1), Some(3.0));
        assert_eq!(b.window_mean(-5.0, 1), Some(1.0));
        assert_eq!(b.window_mean(9.0, 1), Some(4.0));
    }

    #[test]
    fn disabled_is_exactly_zero() {
        let mut ff = Feedforward::new(FfConfig::disabled()).unwrap();
        ff.record(ScanDirection::Forward, 0.0, -1.3);
        ff.end_pass(ScanDirection::Forward).unwrap();
        ff.start_pass(ScanDirection::Forward, 5, -1.3);
        assert_eq!(ff.query(ScanDirection::Forward, 0.0).to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn engages_after_first_line() {
        let mut ff = Feedforward::new(FfConfig { window_n: 1, ..FfConfig::default() }).unwrap();
        let dir = ScanDirection::Forward;
        ff.start_pass(dir, 0, -1.3);
        ff.record(dir, 0.0, -1.30);
        ff.record(dir, 1.0, -1.32);
        assert_eq!(ff.query(dir, 1.0), 0.0);
        ff.end_pass(dir).unwrap();
        ff.start_pass(dir, 1, -1.31);
        assert!(ff.is_active());
        assert!((ff.query(dir, 1.0) - (-1.32 - -1.31)).abs() < 1e-15);
        // the other direction has no data yet
        assert_eq!(ff.query(ScanDirection::Backward, 1.0), 0.0);
    }

    #[test]
    fn baseline_modes() {
        for (mode, want) in [(Baseline::OnEnable, -1.31), (Baseline::PerPass, -1.2)] {
            let cfg = FfConfig { window_n: 1, baseline: mode, ..FfConfig::default() };
            let mut ff = Feedforward::new(cfg).unwrap();
            let dir = ScanDirection::Forward;
            ff.record(dir, 0.0, -1.3);
            ff.end_pass(dir).unwrap();
            ff.start_pass(dir, 1, -1.31);
            ff.record(dir, 0.0, -1.3);
            ff.end_pass(dir).unwrap();
            ff.start_pass(dir, 2, -1.2);
            assert_eq!(ff.baseline(), want, "{mode:?}");
        }
    }

    proptest! {
        #[test]
        fn constant_line_replays_constant(c in -2.0f64..5.0, n in 1usize..40, x in -10.0f64..110.0) {
            let samples: Vec<_> = (0..50).map(|i| (2.0 * i as f64, c)).collect();
            let b = buffer_with(&samples);
            prop_assert!((b.window_mean(x, n).unwrap() - c).abs() < 1e-12);
        }

        #[test]
        fn bounded_by_window(vals in proptest::collection::vec(-1.0f64..1.0, 2..60), n in 1usize..15, x in 0.0f64..60.0) {
            let samples: Vec<_> = vals.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
            let b = buffer_with(&samples);
            let m = b.window_mean(x, n).unwrap();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            // piecewise constant: nudging x without changing the nearest sample keeps the value
            let i = b.nearest(x).unwrap() as f64;
            prop_assert_eq!(b.window_mean(i + 0.1, n), b.window_mean(i - 0.1, n));
        }
    }
}
