#![allow(dead_code)]

use active_testing::beta::BetaModel;
use active_testing::engine::{Engine, QueryId, SearchConfig, SearchState, TIE_TOLERANCE};
use active_testing::features::{detect_edges, IntegralSet, K_SOFT};
use active_testing::lattice::{Lattice, Rect};
use active_testing::models::{DistanceTable, ModelSet};
use active_testing::rng;
use active_testing::scales::ScaleIntervals;
use active_testing::scene::{synth_scene, SceneSpec, Target};
use rand::Rng;

/// Dense reference posterior: one mass per `(pixel, scale)` plus absent,
/// updated by direct multiplication and renormalization.
#[derive(Debug, Clone)]
pub struct FlatPosterior {
    pub width: u32,
    pub height: u32,
    pub scales: usize,
    pub absent: f64,
    pub mass: Vec<f64>,
}

impl FlatPosterior {
    pub fn new(width: u32, height: u32, scales: usize, prior_absent: f64) -> Self {
        let n = width as usize * height as usize * scales;
        Self { width, height, scales, absent: prior_absent, mass: vec![(1.0 - prior_absent) / n as f64; n] }
    }

    fn idx(&self, x: u32, y: u32, s: usize) -> usize {
        (y as usize * self.width as usize + x as usize) * self.scales + (s - 1)
    }

    pub fn get(&self, x: u32, y: u32, s: usize) -> f64 {
        self.mass[self.idx(x, y, s)]
    }

    /// Poses centered in `rect` at scale `s` gain `ratios[s - 1]`.
    pub fn update(&mut self, rect: &Rect, ratios: &[f64]) {
        for y in rect.y0..rect.y1() {
            for x in rect.x0..rect.x1() {
                for s in 1..=self.scales {
                    let i = self.idx(x, y, s);
                    self.mass[i] *= ratios[s - 1];
                }
            }
        }
        let z = self.absent + self.mass.iter().sum::<f64>();
        self.absent /= z;
        self.mass.iter_mut().for_each(|m| *m /= z);
    }

    pub fn exclude(&mut self, x: u32, y: u32, s: usize) {
        let i = self.idx(x, y, s);
        self.mass[i] = 0.0;
        let z = self.absent + self.mass.iter().sum::<f64>();
        self.absent /= z;
        self.mass.iter_mut().for_each(|m| *m /= z);
    }
}

/// Gini score computed straight from the table entries.
pub fn gini_direct(table: &DistanceTable, k: usize, level: u32, masses: &[f64]) -> f64 {
    let mut u = vec![(1.0 - masses.iter().sum::<f64>()).max(0.0)];
    u.extend_from_slice(masses);
    let mut total = 0.0;
    for s in 0..u.len() {
        for m in s + 1..u.len() {
            total += u[s] * u[m] * table.get(k, level, s, m).unwrap();
        }
    }
    total
}

/// Exhaustive argmax over the instantiated subtree, with the documented tie
/// rule. `None` when every candidate was asked.
pub fn exhaustive_best(engine: &Engine<'_>, table: &DistanceTable, state: &SearchState) -> Option<(QueryId, f64)> {
    let depth = engine.lattice().depth();
    let k_soft = engine.k_soft();
    let m = engine.scales();
    let d_star = (1..=k_soft)
        .flat_map(|k| (0..=m).flat_map(move |s| (s + 1..=m).map(move |t| (k, s, t))))
        .map(|(k, s, t)| table.get(k, depth, s, t).unwrap())
        .fold(0.0, f64::max);
    let tau = state.posterior.tau();
    let mut all: Vec<(QueryId, f64)> = Vec::new();
    state.posterior.walk(|cell, masses, childless| {
        for k in 1..=k_soft {
            let q = QueryId { level: cell.level(), index: cell.index(), k };
            if !state.asked().contains(&q) {
                all.push((q, gini_direct(table, k, cell.level(), masses)));
            }
        }
        if childless && cell.level() == depth && masses.iter().sum::<f64>() > tau {
            for (s, &u) in masses.iter().enumerate() {
                let q = QueryId { level: cell.level(), index: cell.index(), k: k_soft + s + 1 };
                if !state.asked().contains(&q) {
                    all.push((q, u * (1.0 - u) * d_star));
                }
            }
        }
        true
    });
    let best = all.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    all.into_iter().filter(|c| c.1 >= best - TIE_TOLERANCE * best.abs()).min_by_key(|c| c.0)
}

/// Random small search problem: image, targets, models and a table whose
/// entries are quantized so that exact ties occur.
pub struct Instance {
    pub lattice: Lattice,
    pub intervals: ScaleIntervals,
    pub models: ModelSet,
    pub table: DistanceTable,
    pub integrals: IntegralSet,
    pub targets: Vec<Target>,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng::stream(seed, &[0x1457]);
    let w = r.random_range(2..=16u32);
    let h = r.random_range(2..=16u32);
    let m = r.random_range(1..=2usize);
    let intervals = if m == 1 { ScaleIntervals::new(vec![(2.0, 4.0)]) } else { ScaleIntervals::new(vec![(2.0, 3.0), (3.0, 5.0)]) }.unwrap();
    let lattice = Lattice::new(w, h).unwrap();
    let depth = lattice.depth();
    let mut mr = rng::stream(seed, &[0x1458]);
    let models = ModelSet::from_fn(K_SOFT, depth, m, |_, _, _| BetaModel::new(mr.random_range(0.8..6.0), mr.random_range(0.8..6.0))).unwrap();
    let mut tr = rng::stream(seed, &[0x1459]);
    let table = DistanceTable::from_fn(K_SOFT, depth, m, seed, |_, _, _, _| Ok(tr.random_range(0..8u32) as f64 * 0.25)).unwrap();
    let targets = if r.random_bool(0.7) {
        let size = intervals.bounds(m).0;
        vec![Target::new(r.random_range(0..w), r.random_range(0..h), size)]
    } else {
        vec![]
    };
    let spec = SceneSpec { width: w, height: h, targets: targets.clone(), texture: 0.1, target_density: 0.8, clutter: 0, seed };
    let (img, _) = synth_scene(&spec).unwrap();
    Instance { lattice, intervals, models, table, integrals: detect_edges(&img, 32), targets }
}

impl Instance {
    pub fn config(&self, tau: f64) -> SearchConfig {
        SearchConfig { scale_intervals: Some(self.intervals.clone()), tau, mass_termination: false, ..SearchConfig::default() }
    }
}
