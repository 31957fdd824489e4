//! The Active Testing loop: choose the query with the largest Gini-index
//! information gain over the instantiated subtree, observe it, update the
//! posterior, and stop once the perfect classifier fires, the mass leaves the
//! image, or the evaluation budget runs out.
//!
//! Soft families are `k = 1..=K_soft`; the perfect test for scale interval `s`
//! is family `K_soft + s` and is only posed at frontier leaves.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::beta::{ratio_unchecked, CLAMP};
use crate::error::{invalid, Error, Result};
use crate::features::{soft_families, IntegralSet, QueryFamily, DEFAULT_EDGE_THRESHOLD};
use crate::lattice::{Cell, CellId, Lattice, Rect};
use crate::models::{DistanceTable, ModelSet, DEFAULT_MC_SAMPLES};
use crate::oracle::Oracle;
use crate::posterior::{Pose, Posterior, DEFAULT_TAU};
use crate::scales::{ScaleIntervals, SizeGrid};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_GAMMA: u64 = 500_000;
pub const DEFAULT_MC_SEED: u64 = 0x5eed;

/// Lower bound on soft likelihood ratios, so that soft evidence alone never
/// rules a pose out.
pub const RATIO_FLOOR: f64 = 1e-6;

/// Scores within this relative distance of the best count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Pixel-size ranges of the scales; defaults to the reference intervals
    /// scaled to the image.
    pub scale_intervals: Option<ScaleIntervals>,
    pub tau: f64,
    pub epsilon: f64,
    /// Budget of perfect-classifier evaluations.
    pub gamma: u64,
    /// Expected targets per pixel (multi-target prior).
    pub lambda: f64,
    pub mc_seed: u64,
    pub mc_samples: usize,
    pub edge_threshold: i32,
    pub max_steps: Option<u64>,
    /// Stop when the absent value holds more than `1 - epsilon`, and put a
    /// pose holding that much straight to its perfect test.
    pub mass_termination: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            scale_intervals: None,
            tau: DEFAULT_TAU,
            epsilon: DEFAULT_EPSILON,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            mc_seed: DEFAULT_MC_SEED,
            mc_samples: DEFAULT_MC_SAMPLES,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            max_steps: None,
            mass_termination: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return invalid(format!("tau = {} must lie in [0, 1)", self.tau));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return invalid(format!("epsilon = {} must lie in (0, 1)", self.epsilon));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda = {} must be non-negative", self.lambda));
        }
        if self.mc_samples < 1000 {
            return invalid(format!("mc_samples = {} is below 1000", self.mc_samples));
        }
        Ok(())
    }

    pub fn intervals_for(&self, width: u32, height: u32) -> ScaleIntervals {
        self.scale_intervals.clone().unwrap_or_else(|| ScaleIntervals::for_image(width, height))
    }
}

/// Query `X^k_{i,j}`. Field order gives the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueryId {
    pub level: u32,
    pub index: u64,
    pub k: usize,
}

impl QueryId {
    pub fn cell(&self) -> CellId {
        CellId { level: self.level, index: self.index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub query: QueryId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub query: QueryId,
    pub x: f64,
    pub z: f64,
    pub oracle_evals: u64,
    pub soft_evals: u64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {} {}",
            self.t, self.query.k, self.query.level, self.query.index, self.x, self.z, self.oracle_evals, self.soft_evals
        )
    }
}

/// Already-posed queries, one bitmask over `k` per cell.
#[derive(Debug, Clone, Default)]
pub struct AskedSet {
    cells: HashMap<CellId, Vec<u64>>,
    len: usize,
}

impl AskedSet {
    /// Returns false if the query was already present.
    pub fn insert(&mut self, q: QueryId) -> bool {
        let words = self.cells.entry(q.cell()).or_default();
        let (w, b) = (q.k / 64, q.k % 64);
        if words.len() <= w {
            words.resize(w + 1, 0);
        }
        let fresh = words[w] & (1 << b) == 0;
        words[w] |= 1 << b;
        self.len += fresh as usize;
        fresh
    }

    pub fn contains(&self, q: &QueryId) -> bool {
        self.cell(q.cell()).contains(q.k)
    }

    pub fn cell(&self, id: CellId) -> CellAsked<'_> {
        CellAsked(self.cells.get(&id).map_or(&[], |v| v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.cells.clear();
        self.len = 0;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CellAsked<'a>(&'a [u64]);

impl CellAsked<'_> {
    pub fn contains(&self, k: usize) -> bool {
        self.0.get(k / 64).is_some_and(|w| w & (1 << (k % 64)) != 0)
    }
}

#[derive(Debug, Clone)]
pub struct SearchState {
    pub posterior: Posterior,
    asked: AskedSet,
    pub oracle_evals: u64,
    pub soft_evals: u64,
    pub steps: u64,
    /// Pixels not covered by an earlier detection.
    pub unobserved: u64,
    pub trace: Vec<TraceRecord>,
}

impl SearchState {
    pub fn asked(&self) -> &AskedSet {
        &self.asked
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub pose: Pose,
    pub size: f64,
    #[serde(rename = "box")]
    pub bbox: Rect,
    /// Posterior mass of the pose just before the confirming test.
    pub confidence: f64,
    pub oracle_evals: u64,
    pub soft_evals: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue,
    Detected(Detection),
    PoolExhausted,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Detected,
    NoTarget,
    BudgetExhausted,
    StepLimit,
    PoolExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub outcome: Outcome,
    pub pose: Pose,
    #[serde(rename = "box")]
    pub bbox: Option<Rect>,
    pub confidence: f64,
    pub oracle_evals: u64,
    pub soft_evals: u64,
    pub steps: u64,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiResult {
    /// How the final round ended.
    pub outcome: Outcome,
    pub detections: Vec<Detection>,
    pub oracle_evals: u64,
    pub soft_evals: u64,
    pub steps: u64,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

/// `sum_{s<m} u_s u_m d(s, m)` with `u_0 = 1 - sum_s u_s`.
fn gini_mi(masses: &[f64], pairs: &[f64]) -> f64 {
    let u0 = (1.0 - masses.iter().sum::<f64>()).max(0.0);
    let u = |s: usize| if s == 0 { u0 } else { masses[s - 1] };
    let m = masses.len();
    let mut acc = 0.0;
    let mut p = 0;
    for s in 0..=m {
        for t in s + 1..=m {
            acc += u(s) * u(t) * pairs[p];
            p += 1;
        }
    }
    acc
}

/// Gini-index information gain of soft family `k` at an instantiated cell.
pub fn mutual_information(posterior: &Posterior, cell: CellId, k: usize, table: &DistanceTable) -> Result<f64> {
    let masses = posterior
        .cell_masses(cell)
        .ok_or_else(|| Error::InvalidArgument(format!("cell ({}, {}) is not instantiated", cell.level, cell.index)))?;
    let pairs = table.pairs(k, cell.level).ok_or(Error::ModelCoverage { k, i: cell.level })?;
    if table.scales() != masses.len() {
        return Err(Error::Mismatch(format!("table has {} scales, posterior {}", table.scales(), masses.len())));
    }
    Ok(gini_mi(masses, pairs))
}

/// Score of the perfect test for one pose holding mass `u`.
pub fn perfect_score(u: f64, d_star: f64) -> f64 {
    u * (1.0 - u) * d_star
}

/// Whether `score` ties with or beats `best` under the relative tolerance.
pub fn within_tie(score: f64, best: f64) -> bool {
    score >= best - TIE_TOLERANCE * best.abs()
}

/// Search driver holding the trained models and derived constants.
#[derive(Debug, Clone)]
pub struct Engine<'m> {
    config: SearchConfig,
    lattice: Lattice,
    intervals: ScaleIntervals,
    grid: SizeGrid,
    families: Vec<QueryFamily>,
    models: &'m ModelSet,
    table: &'m DistanceTable,
    level_max: Vec<f64>,
    /// Largest distance per `(k, level)`, indexed `(k - 1) * D + level - 1`.
    family_max: Vec<f64>,
    d_star: f64,
}

impl<'m> Engine<'m> {
    pub fn new(config: SearchConfig, lattice: Lattice, models: &'m ModelSet, table: &'m DistanceTable) -> Result<Self> {
        config.validate()?;
        let intervals = config.intervals_for(lattice.width(), lattice.height());
        let m = intervals.len();
        if models.scales() != m || table.scales() != m {
            return Err(Error::Mismatch(format!(
                "config has {m} scale intervals, models {} and distance table {}",
                models.scales(),
                table.scales()
            )));
        }
        if models.depth() != lattice.depth() || table.depth() != lattice.depth() {
            return Err(Error::Mismatch(format!(
                "image needs depth {}, models have {} and distance table {}",
                lattice.depth(),
                models.depth(),
                table.depth()
            )));
        }
        let all = soft_families();
        if models.k_soft() != table.k_soft() || models.k_soft() == 0 || models.k_soft() > all.len() {
            return Err(Error::Mismatch(format!(
                "models cover {} soft families, distance table {}; expected 1..={}",
                models.k_soft(),
                table.k_soft(),
                all.len()
            )));
        }
        let families = all[..models.k_soft()].to_vec();
        let level_max: Vec<f64> = (1..=lattice.depth()).map(|i| table.level_max(i)).collect();
        let family_max: Vec<f64> = (1..=models.k_soft())
            .flat_map(|k| (1..=lattice.depth()).map(move |i| (k, i)))
            .map(|(k, i)| table.pairs(k, i).expect("table dimensions checked").iter().copied().fold(0.0, f64::max))
            .collect();
        let d_star = level_max[lattice.depth() as usize - 1];
        let grid = SizeGrid::new(&intervals);
        for s in 1..=m {
            if grid.sizes_in(s).next().is_none() {
                return invalid(format!("scale interval {s} contains no grid size"));
            }
        }
        Ok(Self { config, lattice, intervals, grid, families, models, table, level_max, family_max, d_star })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn intervals(&self) -> &ScaleIntervals {
        &self.intervals
    }

    pub fn grid(&self) -> &SizeGrid {
        &self.grid
    }

    pub fn families(&self) -> &[QueryFamily] {
        &self.families
    }

    /// Perfect-separation distance used to score perfect tests.
    pub fn d_star(&self) -> f64 {
        self.d_star
    }

    pub fn scales(&self) -> usize {
        self.intervals.len()
    }

    pub fn k_soft(&self) -> usize {
        self.families.len()
    }

    pub fn new_state(&self, prior_absent: f64) -> Result<SearchState> {
        let posterior = Posterior::new(self.lattice, prior_absent, self.scales(), self.config.tau)?;
        Ok(SearchState {
            posterior,
            asked: AskedSet::default(),
            oracle_evals: 0,
            soft_evals: 0,
            steps: 0,
            unobserved: self.lattice.area(),
            trace: Vec::new(),
        })
    }

    /// Perfect tests are candidates at frontier leaves only.
    fn perfect_candidates(&self, cell: &Cell, masses: &[f64], childless: bool, tau: f64) -> bool {
        childless && cell.level() == self.lattice.depth() && masses.iter().sum::<f64>() > tau
    }

    /// Score of any query over the current posterior, without the asked check.
    pub fn score(&self, state: &SearchState, q: &QueryId) -> Result<f64> {
        let masses = state
            .posterior
            .cell_masses(q.cell())
            .ok_or_else(|| Error::InvalidArgument(format!("cell ({}, {}) is not instantiated", q.level, q.index)))?;
        if q.k <= self.k_soft() {
            mutual_information(&state.posterior, q.cell(), q.k, self.table)
        } else {
            let s = q.k - self.k_soft();
            if s > self.scales() {
                return invalid(format!("family {} does not exist", q.k));
            }
            Ok(perfect_score(masses[s - 1], self.d_star))
        }
    }

    /// Highest-scoring unasked query, ties going to the lowest
    /// `(level, index, k)`. `None` when every candidate was asked.
    ///
    /// Soft scores are bounded by `sum_{s<m} u_s u_m` times the largest
    /// distance, so cells are visited by decreasing bound and the scan stops
    /// once no bound can reach the best score.
    pub fn select_query(&self, state: &SearchState) -> Option<Selection> {
        let post = &state.posterior;
        let tau = post.tau();
        let k_soft = self.k_soft();
        let m = self.scales();
        let depth = self.lattice.depth() as usize;
        let mut best = f64::NEG_INFINITY;
        let mut pool: Vec<Selection> = Vec::new();
        let offer = |sel: Selection, best: &mut f64, pool: &mut Vec<Selection>| {
            if sel.score > *best {
                *best = sel.score;
            }
            if within_tie(sel.score, *best) {
                pool.push(sel);
            }
        };
        let reachable = |bound: f64, best: f64| best == f64::NEG_INFINITY || within_tie(bound * (1.0 + 1e-12), best);

        // (bound, gini mass, cell) with masses stored flat alongside
        let mut cells: Vec<(f64, f64, Cell)> = Vec::with_capacity(post.len());
        let mut flat: Vec<f64> = Vec::with_capacity(post.len() * m);
        let mut dormant: Vec<usize> = Vec::new();
        post.walk(|cell, masses, childless| {
            if self.perfect_candidates(cell, masses, childless, tau) {
                let asked = state.asked.cell(cell.id);
                for (s, &u) in masses.iter().enumerate() {
                    let k = k_soft + s + 1;
                    if !asked.contains(k) {
                        let query = QueryId { level: cell.level(), index: cell.index(), k };
                        offer(Selection { query, score: perfect_score(u, self.d_star) }, &mut best, &mut pool);
                    }
                }
            }
            let u0 = (1.0 - masses.iter().sum::<f64>()).max(0.0);
            let (g, _) = masses.iter().fold((0.0, u0), |(g, prefix), &u| (g + u * prefix, prefix + u));
            cells.push((g * self.level_max[cell.level() as usize - 1], g, *cell));
            flat.extend_from_slice(masses);
            if childless && cell.level() < self.lattice.depth() {
                dormant.push(cells.len() - 1);
            }
            true
        });
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_unstable_by(|&a, &b| cells[b].0.total_cmp(&cells[a].0).then(cells[a].2.id.cmp(&cells[b].2.id)));
        for n in order {
            let (bound, g, cell) = cells[n];
            if !reachable(bound, best) {
                break;
            }
            let masses = &flat[n * m..(n + 1) * m];
            let asked = state.asked.cell(cell.id);
            let level = cell.level();
            for k in 1..=k_soft {
                if asked.contains(k) || !reachable(g * self.family_max[(k - 1) * depth + level as usize - 1], best) {
                    continue;
                }
                let pairs = self.table.pairs(k, level).expect("engine checked table coverage");
                let query = QueryId { level, index: cell.index(), k };
                offer(Selection { query, score: gini_mi(masses, pairs) }, &mut best, &mut pool);
            }
        }
        if pool.is_empty() {
            return self.select_below_frontier(state, dormant.into_iter().map(|n| (cells[n].2, flat[n * m..(n + 1) * m].to_vec())).collect());
        }
        pool.into_iter().filter(|s| within_tie(s.score, best)).min_by_key(|s| s.query)
    }

    /// Fallback once every query over the instantiated subtree was asked:
    /// queries one level below the childless cells, scored with the implicit
    /// uniform masses there, descending further while a level has none left.
    fn select_below_frontier(&self, state: &SearchState, mut layer: Vec<(Cell, Vec<f64>)>) -> Option<Selection> {
        let post = &state.posterior;
        let m = self.scales();
        while !layer.is_empty() {
            let mut next = Vec::new();
            let mut pool: Vec<Selection> = Vec::new();
            for (parent, pm) in &layer {
                let live: Vec<u64> = (1..=m).map(|s| post.live_poses(&parent.rect, s)).collect();
                for (_, child) in parent.children() {
                    let masses: Vec<f64> = (0..m)
                        .map(|s| if live[s] == 0 { 0.0 } else { pm[s] * post.live_poses(&child.rect, s + 1) as f64 / live[s] as f64 })
                        .collect();
                    let asked = state.asked.cell(child.id);
                    for k in (1..=self.k_soft()).filter(|&k| !asked.contains(k)) {
                        let pairs = self.table.pairs(k, child.level()).expect("engine checked table coverage");
                        let query = QueryId { level: child.level(), index: child.index(), k };
                        pool.push(Selection { query, score: gini_mi(&masses, pairs) });
                    }
                    if child.level() < self.lattice.depth() {
                        next.push((child, masses));
                    }
                }
            }
            if !pool.is_empty() {
                let best = pool.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
                return pool.into_iter().filter(|s| within_tie(s.score, best)).min_by_key(|s| s.query);
            }
            layer = next;
        }
        None
    }

    /// One iteration: select, observe, update. A pose holding more than
    /// `1 - epsilon` is put to its perfect test instead of a selected query
    /// when mass termination is on.
    pub fn step(&self, state: &mut SearchState, integrals: &IntegralSet, oracle: &mut dyn Oracle) -> Result<StepOutcome> {
        if self.config.mass_termination && state.posterior.present_mass() > 1.0 - self.config.epsilon {
            if let Some((x, y, s, m)) = state.posterior.max_pose() {
                if m > 1.0 - self.config.epsilon {
                    let leaf = self.lattice.leaf_at(x, y).expect("live poses lie in the image");
                    return self.perfect_test(state, leaf, s, oracle);
                }
            }
        }
        let Some(sel) = self.select_query(state) else {
            return Ok(StepOutcome::PoolExhausted);
        };
        let q = sel.query;
        let cell = self.lattice.cell(q.cell()).expect("selected cells exist");
        if q.k > self.k_soft() {
            return self.perfect_test(state, cell, q.k - self.k_soft(), oracle);
        }
        let family = &self.families[q.k - 1];
        let x = integrals.query_value(family, &cell)?.clamp(CLAMP, 1.0 - CLAMP);
        let models = self.models.level_models(q.k, q.level);
        let ratios: Vec<f64> = models[1..].iter().map(|fg| ratio_unchecked(fg, &models[0], x).max(RATIO_FLOOR)).collect();
        let z = state.posterior.apply_update(q.cell(), &ratios)?;
        state.asked.insert(q);
        state.soft_evals += 1;
        self.record(state, q, x, z);
        Ok(StepOutcome::Continue)
    }

    /// Oracle calls at a leaf over the sizes of interval `s`, ascending, up to
    /// the first positive. A full negative rules the pose out.
    fn perfect_test(&self, state: &mut SearchState, leaf: Cell, s: usize, oracle: &mut dyn Oracle) -> Result<StepOutcome> {
        let q = QueryId { level: leaf.level(), index: leaf.index(), k: self.k_soft() + s };
        let (px, py) = (leaf.rect.x0, leaf.rect.y0);
        let confidence = state.posterior.pose_mass(px, py, s);
        for size in self.grid.sizes_in(s) {
            if state.oracle_evals >= self.config.gamma {
                return Ok(StepOutcome::BudgetExhausted);
            }
            state.oracle_evals += 1;
            if oracle.evaluate(px, py, size) {
                state.asked.insert(q);
                self.record(state, q, 1.0, 1.0);
                let bbox = Rect::centered_box(px, py, size, self.lattice.width(), self.lattice.height());
                return Ok(StepOutcome::Detected(Detection {
                    pose: Pose::At { x: px, y: py, s },
                    size,
                    bbox,
                    confidence,
                    oracle_evals: state.oracle_evals,
                    soft_evals: state.soft_evals,
                }));
            }
        }
        let z = state.posterior.exclude_pose(px, py, s)?;
        state.asked.insert(q);
        self.record(state, q, 0.0, z);
        Ok(StepOutcome::Continue)
    }

    fn record(&self, state: &mut SearchState, query: QueryId, x: f64, z: f64) {
        state.steps += 1;
        state.trace.push(TraceRecord {
            t: state.steps,
            query,
            x,
            z,
            oracle_evals: state.oracle_evals,
            soft_evals: state.soft_evals,
        });
    }

    fn limit_reached(&self, state: &SearchState) -> Option<Outcome> {
        if state.oracle_evals >= self.config.gamma {
            return Some(Outcome::BudgetExhausted);
        }
        match self.config.max_steps {
            Some(n) if state.steps >= n => Some(Outcome::StepLimit),
            _ => None,
        }
    }

    fn map_result(&self, outcome: Outcome, state: SearchState) -> SearchResult {
        let (pose, confidence) = state.posterior.map_estimate();
        let bbox = match pose {
            Pose::At { x, y, s } => {
                let size = self.grid.sizes_in(s).next().expect("every interval has a size");
                Some(Rect::centered_box(x, y, size, self.lattice.width(), self.lattice.height()))
            }
            Pose::Absent => None,
        };
        SearchResult {
            outcome,
            pose,
            bbox,
            confidence,
            oracle_evals: state.oracle_evals,
            soft_evals: state.soft_evals,
            steps: state.steps,
            trace: state.trace,
        }
    }

    /// Single-target search from an even prior on presence.
    pub fn run_single(&self, integrals: &IntegralSet, oracle: &mut dyn Oracle) -> Result<SearchResult> {
        self.check_integrals(integrals)?;
        let mut state = self.new_state(0.5)?;
        let one = 1.0 - self.config.epsilon;
        loop {
            if self.config.mass_termination && state.posterior.absent_mass() > one {
                return Ok(self.map_result(Outcome::NoTarget, state));
            }
            if let Some(outcome) = self.limit_reached(&state) {
                return Ok(self.map_result(outcome, state));
            }
            match self.step(&mut state, integrals, oracle)? {
                StepOutcome::Continue => {}
                StepOutcome::Detected(d) => {
                    return Ok(SearchResult {
                        outcome: Outcome::Detected,
                        pose: d.pose,
                        bbox: Some(d.bbox),
                        confidence: d.confidence,
                        oracle_evals: state.oracle_evals,
                        soft_evals: state.soft_evals,
                        steps: state.steps,
                        trace: state.trace,
                    })
                }
                StepOutcome::PoolExhausted => return Ok(self.map_result(Outcome::PoolExhausted, state)),
                StepOutcome::BudgetExhausted => return Ok(self.map_result(Outcome::BudgetExhausted, state)),
            }
        }
    }

    /// Repeated search with a Poisson prior on the number of remaining
    /// targets. After each detection the box's edges are erased, its poses
    /// ruled out, and the posterior reset to uniform; the search ends once the
    /// image holds less than `epsilon` mass.
    pub fn run_multi(&self, integrals: &IntegralSet, oracle: &mut dyn Oracle) -> Result<MultiResult> {
        self.check_integrals(integrals)?;
        if self.config.lambda <= 0.0 {
            return invalid("multi-target search needs lambda > 0");
        }
        let (w, h) = (self.lattice.width(), self.lattice.height());
        let mut ints = integrals.clone();
        let mut covered = vec![false; w as usize * h as usize];
        let mut state = self.new_state(self.multi_prior(self.lattice.area()))?;
        let mut detections = Vec::new();
        let outcome = loop {
            if state.posterior.present_mass() < self.config.epsilon {
                break Outcome::NoTarget;
            }
            if let Some(o) = self.limit_reached(&state) {
                break o;
            }
            match self.step(&mut state, &ints, oracle)? {
                StepOutcome::Continue => {}
                StepOutcome::Detected(d) => {
                    let (excluded, erased) = self.suppression(&d);
                    ints = ints.erase_edges(&erased);
                    state.posterior.exclude_region(&excluded);
                    let b = excluded;
                    for y in b.y0..b.y1() {
                        for x in b.x0..b.x1() {
                            let c = &mut covered[y as usize * w as usize + x as usize];
                            if !*c {
                                *c = true;
                                state.unobserved -= 1;
                            }
                        }
                    }
                    detections.push(d);
                    state.asked.clear();
                    if state.unobserved == 0 {
                        break Outcome::NoTarget;
                    }
                    state.posterior.reset_uniform(self.multi_prior(state.unobserved))?;
                }
                StepOutcome::PoolExhausted => break Outcome::PoolExhausted,
                StepOutcome::BudgetExhausted => break Outcome::BudgetExhausted,
            }
        };
        Ok(MultiResult {
            outcome,
            detections,
            oracle_evals: state.oracle_evals,
            soft_evals: state.soft_evals,
            steps: state.steps,
            trace: state.trace,
        })
    }

    /// Poisson probability `exp(-lambda Q)` that `unobserved` pixels hold no target.
    pub fn multi_prior(&self, unobserved: u64) -> f64 {
        (-self.config.lambda * unobserved as f64).exp()
    }

    /// Regions cleared after a multi-target detection. A target of interval
    /// `s` answers positive up to a quarter of its size from its center, so
    /// any pose confirming the same target lies within half the interval's
    /// largest size of the detection, and its edges within three quarters.
    fn suppression(&self, d: &Detection) -> (Rect, Rect) {
        let (w, h) = (self.lattice.width(), self.lattice.height());
        match d.pose {
            Pose::At { x, y, s } => {
                let hi = self.intervals.bounds(s).1;
                (Rect::centered_box(x, y, hi + 1.0, w, h), Rect::centered_box(x, y, 1.5 * hi + 1.0, w, h))
            }
            Pose::Absent => (d.bbox, d.bbox),
        }
    }

    fn check_integrals(&self, integrals: &IntegralSet) -> Result<()> {
        if integrals.width() != self.lattice.width() || integrals.height() != self.lattice.height() {
            return Err(Error::Mismatch(format!(
                "image is {}x{}, engine lattice {}x{}",
                integrals.width(),
                integrals.height(),
                self.lattice.width(),
                self.lattice.height()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beta::BetaModel;
    use crate::oracle::{GroundTruthOracle, OracleStats};
    use crate::scene::Target;

    fn setup(w: u32, m: usize, k_soft: usize, dist: impl Fn(usize, u32, usize, usize) -> f64) -> (Lattice, ModelSet, DistanceTable, SearchConfig) {
        let lat = Lattice::new(w, w).unwrap();
        let models = ModelSet::uniform(k_soft, lat.depth(), m, BetaModel::new(2.0, 2.0).unwrap());
        let table = DistanceTable::from_fn(k_soft, lat.depth(), m, 0, |k, i, s, t| Ok(dist(k, i, s, t))).unwrap();
        let iv: Vec<(f64, f64)> = (0..m).map(|s| (2.0 + 2.0 * s as f64, 4.0 + 2.0 * s as f64)).collect();
        let config = SearchConfig { scale_intervals: Some(ScaleIntervals::new(iv).unwrap()), ..Default::default() };
        (lat, models, table, config)
    }

    #[test]
    fn mi_examples() {
        let lat = Lattice::new(4, 4).unwrap();
        let post = Posterior::new(lat, 0.5, 1, 0.001).unwrap();
        let table = DistanceTable::from_fn(1, lat.depth(), 1, 0, |_, _, _, _| Ok(0.4)).unwrap();
        // root holds 0.5 of the mass at the single scale
        let mi = mutual_information(&post, CellId::ROOT, 1, &table).unwrap();
        assert!((mi - 0.1).abs() < 1e-15);
        let zero = DistanceTable::from_fn(1, lat.depth(), 1, 0, |_, _, _, _| Ok(0.0)).unwrap();
        assert_eq!(mutual_information(&post, CellId::ROOT, 1, &zero).unwrap(), 0.0);
        assert!(matches!(mutual_information(&post, CellId::ROOT, 2, &table), Err(Error::ModelCoverage { k: 2, i: 1 })));
        let empty = Posterior::new(lat, 0.0, 1, 0.001).unwrap();
        let mut e = empty.clone();
        e.apply_update(CellId::ROOT.child(0), &[0.0]).unwrap();
        assert_eq!(mutual_information(&e, CellId::ROOT.child(0), 1, &table).unwrap(), 0.0);
    }

    #[test]
    fn informative_root_family_wins() {
        let (lat, models, table, config) = setup(8, 2, 4, |k, i, _, _| if k == 3 && i == 1 { 1.0 } else { 0.0 });
        let engine = Engine::new(config, lat, &models, &table).unwrap();
        let mut state = engine.new_state(0.5).unwrap();
        let sel = engine.select_query(&state).unwrap();
        assert_eq!(sel.query, QueryId { level: 1, index: 1, k: 3 });
        state.asked.insert(sel.query);
        // every remaining score is zero; the lowest key wins
        assert_eq!(engine.select_query(&state).unwrap().query, QueryId { level: 1, index: 1, k: 1 });
    }

    #[test]
    fn concentrated_leaf_gets_perfect_test() {
        let (lat, models, table, config) = setup(4, 2, 2, |_, _, s, t| if (s, t) == (0, 1) { 1.0 } else { 0.0 });
        let engine = Engine::new(config, lat, &models, &table).unwrap();
        let mut state = engine.new_state(0.0).unwrap();
        let leaf = lat.leaf_at(2, 1).unwrap();
        state.posterior.apply_update(leaf.id, &[1000.0, 1.0]).unwrap();
        assert!(state.posterior.pose_mass(2, 1, 1) > 0.9);
        let sel = engine.select_query(&state).unwrap();
        assert_eq!(sel.query, QueryId { level: leaf.level(), index: leaf.index(), k: 3 });
        let u = state.posterior.pose_mass(2, 1, 1);
        assert!((sel.score - u * (1.0 - u)).abs() < 1e-15);
    }

    #[test]
    fn zero_budget_stops_immediately() {
        let (lat, models, table, mut config) = setup(8, 1, 2, |_, _, _, _| 0.5);
        config.gamma = 0;
        let engine = Engine::new(config, lat, &models, &table).unwrap();
        let ints = IntegralSet::from_labels(8, 8, vec![0; 64]);
        let mut o = GroundTruthOracle::new(vec![], engine.intervals().clone());
        let res = engine.run_single(&ints, &mut o).unwrap();
        assert_eq!(res.outcome, Outcome::BudgetExhausted);
        assert_eq!(res.steps, 0);
        assert_eq!(o.stats(), OracleStats::default());
    }

    #[test]
    fn uninformative_soft_query_leaves_posterior() {
        let (lat, models, table, config) = setup(8, 1, 2, |k, _, _, _| if k == 1 { 0.5 } else { 0.0 });
        let engine = Engine::new(config, lat, &models, &table).unwrap();
        let mut state = engine.new_state(0.5).unwrap();
        let ints = IntegralSet::from_labels(8, 8, vec![1; 64]);
        let mut o = GroundTruthOracle::new(vec![], engine.intervals().clone());
        let before = state.posterior.dump();
        assert_eq!(engine.step(&mut state, &ints, &mut o).unwrap(), StepOutcome::Continue);
        assert_eq!(state.trace.len(), 1);
        assert_eq!(state.trace[0].z, 1.0);
        assert_eq!(state.soft_evals, 1);
        // the only change is the instantiated root children
        let root_before = before.lines().next().unwrap().to_string();
        assert_eq!(state.posterior.dump().lines().next().unwrap(), root_before);
    }

    #[test]
    fn perfect_test_outcomes() {
        let (lat, models, table, config) = setup(4, 1, 1, |_, _, _, _| 0.5);
        let engine = Engine::new(config, lat, &models, &table).unwrap();
        let ints = IntegralSet::from_labels(4, 4, vec![0; 16]);
        let leaf = lat.leaf_at(1, 2).unwrap();

        let mut state = engine.new_state(0.0).unwrap();
        state.posterior.apply_update(leaf.id, &[1e4]).unwrap();
        // with one scale the leaf soft query ties the perfect test and wins on k
        state.asked.insert(QueryId { level: leaf.level(), index: leaf.index(), k: 1 });
        let mut miss = GroundTruthOracle::new(vec![], engine.intervals().clone());
        assert_eq!(engine.step(&mut state, &ints, &mut miss).unwrap(), StepOutcome::Continue);
        assert_eq!(state.posterior.pose_mass(1, 2, 1), 0.0);
        assert!(state.oracle_evals >= 1);
        assert_eq!(state.oracle_evals, miss.stats().evaluations);

        let mut state = engine.new_state(0.0).unwrap();
        state.posterior.apply_update(leaf.id, &[1e4]).unwrap();
        // with one scale the leaf soft query ties the perfect test and wins on k
        state.asked.insert(QueryId { level: leaf.level(), index: leaf.index(), k: 1 });
        let mut hit = GroundTruthOracle::new(vec![Target::new(1, 2, 2.5)], engine.intervals().clone());
        match engine.step(&mut state, &ints, &mut hit).unwrap() {
            StepOutcome::Detected(d) => {
                assert_eq!(d.pose, Pose::At { x: 1, y: 2, s: 1 });
                assert!(d.bbox.contains(1, 2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_models_rejected() {
        let (lat, models, table, config) = setup(8, 2, 2, |_, _, _, _| 0.5);
        let other = Lattice::new(16, 16).unwrap();
        assert!(matches!(Engine::new(config.clone(), other, &models, &table), Err(Error::Mismatch(_))));
        let one = SearchConfig { scale_intervals: Some(ScaleIntervals::new(vec![(2.0, 4.0)]).unwrap()), ..config };
        assert!(matches!(Engine::new(one, lat, &models, &table), Err(Error::Mismatch(_))));
    }

    #[test]
    fn poisson_prior_for_one_target_per_hundred_square() {
        let (lat, models, table, config) = setup(16, 1, 1, |_, _, _, _| 1.0);
        let engine = Engine::new(SearchConfig { lambda: 1e-4, ..config }, lat, &models, &table).unwrap();
        assert!((engine.multi_prior(100 * 100) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((engine.multi_prior(100 * 100) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn trace_line_format() {
        let r = TraceRecord { t: 3, query: QueryId { level: 2, index: 4, k: 7 }, x: 0.25, z: 1.5, oracle_evals: 0, soft_evals: 3 };
        assert_eq!(r.to_string(), "3 7 2 4 0.25 1.5 0 3");
    }
}
