//! Evaluation-count comparison of Active Testing against the sliding window.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, Outcome};
use crate::error::{Error, Result};
use crate::features::IntegralSet;
use crate::oracle::{sliding_window, GroundTruthOracle};
use crate::posterior::Pose;
use crate::rng;
use crate::scales::ScaleIntervals;
use crate::scene::Target;

#[derive(Debug, Clone)]
pub struct BenchScene {
    pub id: String,
    pub integrals: IntegralSet,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "AT")]
    ActiveTesting,
    #[serde(rename = "SW")]
    SlidingWindow,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::ActiveTesting => "AT",
            Method::SlidingWindow => "SW",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scene_id: String,
    pub method: Method,
    pub detected: bool,
    pub correct: bool,
    pub oracle_evals: u64,
    pub soft_evals: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub scenes: usize,
    pub detected: usize,
    pub correct: usize,
    pub mean_oracle_evals: f64,
    pub median_oracle_evals: f64,
    pub mean_soft_evals: f64,
    /// Mean of oracle evaluations over the exhaustive evaluation count.
    pub mean_pose_fraction: f64,
}

/// Counts of AT oracle evaluations in bins `[0, 1)`, `[1, 2)`, `[2, 4)`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: Vec<u64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub scenes: usize,
    /// Evaluations an exhaustive scan spends per scene (pixels x grid sizes).
    pub pose_space: u64,
    pub active_testing: MethodSummary,
    pub sliding_window: MethodSummary,
    /// `AT mean / SW mean`, absent for an empty or zero-cost set.
    pub eval_ratio: Option<f64>,
    pub at_histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: BenchSummary,
}

pub const CSV_HEADER: &str = "scene_id,method,detected,correct,oracle_evals,soft_evals,wall_ms";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.scene_id,
                r.method.label(),
                r.detected,
                r.correct,
                r.oracle_evals,
                r.soft_evals,
                r.wall_ms
            );
        }
        out
    }

    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

/// Whether a reported pose lies inside a planted box with the right interval.
pub fn pose_matches(targets: &[Target], intervals: &ScaleIntervals, width: u32, height: u32, x: u32, y: u32, s: usize) -> bool {
    targets.iter().any(|t| t.bbox(width, height).contains(x, y) && intervals.interval_of(t.size) == Some(s))
}

fn median(mut v: Vec<u64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn summarize(rows: &[&BenchRow], pose_space: u64) -> MethodSummary {
    let n = rows.len();
    let mean = |f: &dyn Fn(&BenchRow) -> f64| if n == 0 { 0.0 } else { rows.iter().map(|r| f(r)).sum::<f64>() / n as f64 };
    MethodSummary {
        scenes: n,
        detected: rows.iter().filter(|r| r.detected).count(),
        correct: rows.iter().filter(|r| r.correct).count(),
        mean_oracle_evals: mean(&|r| r.oracle_evals as f64),
        median_oracle_evals: median(rows.iter().map(|r| r.oracle_evals).collect()),
        mean_soft_evals: mean(&|r| r.soft_evals as f64),
        mean_pose_fraction: if pose_space == 0 { 0.0 } else { mean(&|r| r.oracle_evals as f64 / pose_space as f64) },
    }
}

fn histogram(values: impl Iterator<Item = u64>) -> Histogram {
    let mut counts: Vec<u64> = Vec::new();
    for v in values {
        let b = if v == 0 { 0 } else { 64 - v.leading_zeros() as usize };
        if counts.len() <= b {
            counts.resize(b + 1, 0);
        }
        counts[b] += 1;
    }
    let lower = (0..counts.len()).map(|b| if b == 0 { 0 } else { 1u64 << (b - 1) }).collect();
    Histogram { lower, counts }
}

/// Runs AT and SW with separate oracles on every scene. `wall_ms` is only
/// measured when `timing` is set so that reports are reproducible.
pub fn bench_compare(scenes: &[BenchScene], engine: &Engine<'_>, seed: u64, timing: bool) -> Result<BenchReport> {
    let lat = engine.lattice();
    let (w, h) = (lat.width(), lat.height());
    let grid = engine.grid();
    let intervals = engine.intervals();
    let pose_space = lat.area() * grid.len() as u64;
    let mut rows = Vec::with_capacity(2 * scenes.len());
    for (n, sc) in scenes.iter().enumerate() {
        if sc.integrals.width() != w || sc.integrals.height() != h {
            return Err(Error::Mismatch(format!(
                "scene {} is {}x{}, models expect {w}x{h}",
                sc.id,
                sc.integrals.width(),
                sc.integrals.height()
            )));
        }
        let clock = Instant::now();
        let mut oracle = GroundTruthOracle::new(sc.targets.clone(), intervals.clone());
        let res = engine.run_single(&sc.integrals, &mut oracle)?;
        let ms = if timing { clock.elapsed().as_millis() as u64 } else { 0 };
        let (detected, correct) = match (res.outcome, res.pose) {
            (Outcome::Detected, Pose::At { x, y, s }) => (true, pose_matches(&sc.targets, intervals, w, h, x, y, s)),
            _ => (false, false),
        };
        rows.push(BenchRow {
            scene_id: sc.id.clone(),
            method: Method::ActiveTesting,
            detected,
            correct,
            oracle_evals: res.oracle_evals,
            soft_evals: res.soft_evals,
            wall_ms: ms,
        });

        let clock = Instant::now();
        let mut oracle = GroundTruthOracle::new(sc.targets.clone(), intervals.clone());
        let sw = sliding_window(w, h, grid, &mut oracle, rng::derive_seed(seed, &[n as u64]));
        let ms = if timing { clock.elapsed().as_millis() as u64 } else { 0 };
        let correct = sw.detection.is_some_and(|d| pose_matches(&sc.targets, intervals, w, h, d.x, d.y, d.s));
        rows.push(BenchRow {
            scene_id: sc.id.clone(),
            method: Method::SlidingWindow,
            detected: sw.detection.is_some(),
            correct,
            oracle_evals: sw.stats.evaluations,
            soft_evals: 0,
            wall_ms: ms,
        });
    }
    let at: Vec<&BenchRow> = rows.iter().filter(|r| r.method == Method::ActiveTesting).collect();
    let sw: Vec<&BenchRow> = rows.iter().filter(|r| r.method == Method::SlidingWindow).collect();
    let at_summary = summarize(&at, pose_space);
    let sw_summary = summarize(&sw, pose_space);
    let eval_ratio = (sw_summary.mean_oracle_evals > 0.0).then(|| at_summary.mean_oracle_evals / sw_summary.mean_oracle_evals);
    let summary = BenchSummary {
        scenes: scenes.len(),
        pose_space,
        at_histogram: histogram(at.iter().map(|r| r.oracle_evals)),
        active_testing: at_summary,
        sliding_window: sw_summary,
        eval_ratio,
    };
    Ok(BenchReport { rows, summary })
}
