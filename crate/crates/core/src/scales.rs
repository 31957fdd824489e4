//! Target size intervals and the discrete size grid tested by the classifier.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Reference image the default intervals are expressed against.
const REFERENCE_WIDTH: f64 = 896.0;
const REFERENCE_HEIGHT: f64 = 592.0;
const REFERENCE_INTERVALS: [(f64, f64); 4] = [(100.0, 150.0), (150.0, 200.0), (200.0, 250.0), (250.0, 300.0)];

/// Multiplicative step of the size grid.
pub const SIZE_STEP: f64 = 1.1;

/// Ascending, non-overlapping pixel-size ranges; scale `s` (1-based) is the
/// `s`-th interval. Intervals are half-open except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct ScaleIntervals(Vec<(f64, f64)>);

impl TryFrom<Vec<(f64, f64)>> for ScaleIntervals {
    type Error = crate::Error;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        ScaleIntervals::new(v)
    }
}

impl From<ScaleIntervals> for Vec<(f64, f64)> {
    fn from(s: ScaleIntervals) -> Self {
        s.0
    }
}

impl ScaleIntervals {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        if intervals.is_empty() {
            return invalid("at least one scale interval is required");
        }
        for (i, &(lo, hi)) in intervals.iter().enumerate() {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return invalid(format!("scale interval {} = [{lo}, {hi}] is not a positive ascending range", i + 1));
            }
            if i > 0 && lo < intervals[i - 1].1 {
                return invalid(format!("scale intervals {} and {} overlap", i, i + 1));
            }
        }
        Ok(Self(intervals))
    }

    /// The four reference intervals `[100,150] ... [250,300]`.
    pub fn reference() -> Self {
        Self(REFERENCE_INTERVALS.to_vec())
    }

    /// Reference intervals scaled by `min(width / 896, height / 592)`.
    pub fn for_image(width: u32, height: u32) -> Self {
        let f = (width as f64 / REFERENCE_WIDTH).min(height as f64 / REFERENCE_HEIGHT);
        Self(REFERENCE_INTERVALS.iter().map(|&(lo, hi)| (lo * f, hi * f)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bounds(&self, s: usize) -> (f64, f64) {
        self.0[s - 1]
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn min_size(&self) -> f64 {
        self.0[0].0
    }

    pub fn max_size(&self) -> f64 {
        self.0[self.0.len() - 1].1
    }

    /// 1-based interval containing `size`.
    pub fn interval_of(&self, size: f64) -> Option<usize> {
        let last = self.0.len() - 1;
        self.0.iter().enumerate().find_map(|(i, &(lo, hi))| {
            let inside = size >= lo && (size < hi || (i == last && size <= hi));
            inside.then_some(i + 1)
        })
    }
}

/// Sizes tested by the classifier: multiplicative 10% steps from the smallest
/// size, with the largest size appended, each tagged with its interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeGrid {
    sizes: Vec<f64>,
    interval: Vec<usize>,
}

impl SizeGrid {
    pub fn new(intervals: &ScaleIntervals) -> Self {
        let lo = intervals.min_size();
        let hi = intervals.max_size();
        let mut sizes = Vec::new();
        let mut k = 0i32;
        loop {
            let z = lo * SIZE_STEP.powi(k);
            if z >= hi * (1.0 - 1e-12) {
                break;
            }
            sizes.push(z);
            k += 1;
        }
        sizes.push(hi);
        let mut data: Vec<(f64, usize)> = sizes.into_iter().filter_map(|z| intervals.interval_of(z).map(|s| (z, s))).collect();
        data.dedup_by(|a, b| a.0 == b.0);
        Self { sizes: data.iter().map(|d| d.0).collect(), interval: data.iter().map(|d| d.1).collect() }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    /// `(size, interval)` pairs in ascending size order.
    pub fn iter(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.sizes.iter().copied().zip(self.interval.iter().copied())
    }

    /// Sizes belonging to interval `s`, ascending.
    pub fn sizes_in(&self, s: usize) -> impl Iterator<Item = f64> + '_ {
        self.iter().filter(move |&(_, i)| i == s).map(|(z, _)| z)
    }
}
