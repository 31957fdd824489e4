//! Perfect-test oracles and the exhaustive sliding-window baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::scales::{ScaleIntervals, SizeGrid};
use crate::scene::Target;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleStats {
    pub evaluations: u64,
    pub positives: u64,
}

/// A classifier answering whether a target of side `size` is centered at
/// pixel `(x, y)`. Every call counts as one evaluation.
pub trait Oracle {
    fn evaluate(&mut self, x: u32, y: u32, size: f64) -> bool;
    fn stats(&self) -> OracleStats;
}

/// Answers from known target positions: a hit needs the center within
/// `size / 4` of a target's center on both axes and the queried size in the
/// target's interval.
#[derive(Debug, Clone)]
pub struct GroundTruthOracle {
    targets: Vec<Target>,
    intervals: ScaleIntervals,
    stats: OracleStats,
}

impl GroundTruthOracle {
    pub fn new(targets: Vec<Target>, intervals: ScaleIntervals) -> Self {
        Self { targets, intervals, stats: OracleStats::default() }
    }

    /// The target a query would hit, without counting an evaluation.
    pub fn matching_target(&self, x: u32, y: u32, size: f64) -> Option<&Target> {
        let s = self.intervals.interval_of(size)?;
        self.targets.iter().find(|t| {
            let tol = t.size / 4.0;
            (x as f64 - t.x as f64).abs() <= tol
                && (y as f64 - t.y as f64).abs() <= tol
                && self.intervals.interval_of(t.size) == Some(s)
        })
    }
}

impl Oracle for GroundTruthOracle {
    fn evaluate(&mut self, x: u32, y: u32, size: f64) -> bool {
        self.stats.evaluations += 1;
        let hit = self.matching_target(x, y, size).is_some();
        self.stats.positives += hit as u64;
        hit
    }

    fn stats(&self) -> OracleStats {
        self.stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowHit {
    pub x: u32,
    pub y: u32,
    pub size: f64,
    /// 1-based scale interval of `size`.
    pub s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowResult {
    pub detection: Option<WindowHit>,
    /// Evaluations spent by this scan alone.
    pub stats: OracleStats,
}

/// Raster scan over every pixel from a seeded random start, wrapping around;
/// each pixel is tested at every grid size in ascending order. Stops at the
/// first positive.
pub fn sliding_window(width: u32, height: u32, grid: &SizeGrid, oracle: &mut dyn Oracle, seed: u64) -> SlidingWindowResult {
    let before = oracle.stats();
    let n = width as u64 * height as u64;
    let start = if n == 0 { 0 } else { rng::stream(seed, &[0x5357]).random_range(0..n) };
    let mut detection = None;
    'scan: for p in 0..n {
        let idx = (start + p) % n;
        let (x, y) = ((idx % width as u64) as u32, (idx / width as u64) as u32);
        for (size, s) in grid.iter() {
            if oracle.evaluate(x, y, size) {
                detection = Some(WindowHit { x, y, size, s });
                break 'scan;
            }
        }
    }
    let after = oracle.stats();
    let stats = OracleStats { evaluations: after.evaluations - before.evaluations, positives: after.positives - before.positives };
    SlidingWindowResult { detection, stats }
}
