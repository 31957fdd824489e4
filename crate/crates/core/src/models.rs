//! Response model set, the L2 distance look-up table, and the model file.
//!
//! One Beta density exists per soft family `k`, lattice level `i` and scale
//! `s`, where `s = 0` is the background response (target center outside the
//! queried cell).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::beta::{self, BetaModel};
use crate::error::{Error, Result};
use crate::rng;

pub const MODEL_FILE_VERSION: u32 = 1;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    scales: usize,
    depth: u32,
    k_soft: usize,
    models: Vec<BetaModel>,
}

impl ModelSet {
    /// Builds a complete set from a lookup; fails on the first missing triple.
    pub fn from_fn<F>(k_soft: usize, depth: u32, scales: usize, mut get: F) -> Result<Self>
    where
        F: FnMut(usize, u32, usize) -> Result<BetaModel>,
    {
        let mut models = Vec::with_capacity(k_soft * depth as usize * (scales + 1));
        for k in 1..=k_soft {
            for i in 1..=depth {
                for s in 0..=scales {
                    models.push(get(k, i, s)?);
                }
            }
        }
        Ok(Self { scales, depth, k_soft, models })
    }

    /// Every triple uses the same density.
    pub fn uniform(k_soft: usize, depth: u32, scales: usize, model: BetaModel) -> Self {
        Self { scales, depth, k_soft, models: vec![model; k_soft * depth as usize * (scales + 1)] }
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn k_soft(&self) -> usize {
        self.k_soft
    }

    fn slot(&self, k: usize, i: u32, s: usize) -> usize {
        ((k - 1) * self.depth as usize + (i as usize - 1)) * (self.scales + 1) + s
    }

    /// `f_s^k(.; i)`; `s = 0` is the background density.
    pub fn get(&self, k: usize, i: u32, s: usize) -> &BetaModel {
        &self.models[self.slot(k, i, s)]
    }

    pub fn set(&mut self, k: usize, i: u32, s: usize, model: BetaModel) {
        let slot = self.slot(k, i, s);
        self.models[slot] = model;
    }

    /// Densities `f_0 .. f_M` for one `(k, i)`.
    pub fn level_models(&self, k: usize, i: u32) -> &[BetaModel] {
        let start = self.slot(k, i, 0);
        &self.models[start..start + self.scales + 1]
    }
}

/// Pairwise `integral (f_s - f_m)^2` per `(k, i)`, including the background
/// pairs `s = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    scales: usize,
    depth: u32,
    k_soft: usize,
    seed: u64,
    n_samples: usize,
    /// upper-triangular pairs (0,1), (0,2), .., (0,M), (1,2), .. per (k, i)
    d: Vec<f64>,
}

/// Index of pair `(s, m)` with `s < m` in the upper-triangular order.
pub fn pair_index(scales: usize, s: usize, m: usize) -> usize {
    debug_assert!(s < m && m <= scales);
    let n = scales + 1;
    s * n - s * (s + 1) / 2 + (m - s - 1)
}

pub fn pair_count(scales: usize) -> usize {
    (scales + 1) * scales / 2
}

impl DistanceTable {
    /// Monte-Carlo table: each `(k, i)` draws its own `n_samples` uniform points
    /// from a stream derived from `seed`, so entries equal
    /// `l2_distance(f_s, f_m, n_samples, derive_seed(seed, [k, i]))`.
    pub fn build(models: &ModelSet, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples < 1000 {
            return Err(Error::InvalidArgument(format!("distance table needs at least 1000 samples, got {n_samples}")));
        }
        let m = models.scales();
        let pairs = pair_count(m);
        let mut d = Vec::with_capacity(models.k_soft() * models.depth() as usize * pairs);
        for k in 1..=models.k_soft() {
            for i in 1..=models.depth() {
                let pts = beta::mc_points(n_samples, Self::entry_seed(seed, k, i));
                let values: Vec<Vec<f64>> =
                    models.level_models(k, i).iter().map(|f| pts.iter().map(|&x| f.density(x)).collect()).collect();
                for s in 0..=m {
                    for t in s + 1..=m {
                        d.push(beta::mc_squared_difference(&values[s], &values[t]));
                    }
                }
            }
        }
        Ok(Self { scales: m, depth: models.depth(), k_soft: models.k_soft(), seed, n_samples, d })
    }

    /// Seed of the point stream used for `(k, i)`.
    pub fn entry_seed(seed: u64, k: usize, i: u32) -> u64 {
        rng::derive_seed(seed, &[k as u64, i as u64])
    }

    /// Table with explicit entries, mainly for tests and model files.
    pub fn from_fn<F>(k_soft: usize, depth: u32, scales: usize, seed: u64, mut get: F) -> Result<Self>
    where
        F: FnMut(usize, u32, usize, usize) -> Result<f64>,
    {
        let mut d = Vec::with_capacity(k_soft * depth as usize * pair_count(scales));
        for k in 1..=k_soft {
            for i in 1..=depth {
                for s in 0..=scales {
                    for t in s + 1..=scales {
                        let v = get(k, i, s, t)?;
                        if !(v >= 0.0 && v.is_finite()) {
                            return Err(Error::Format(format!("distance ({k}, {i}, {s}, {t}) = {v} is not a finite non-negative value")));
                        }
                        d.push(v);
                    }
                }
            }
        }
        Ok(Self { scales, depth, k_soft, seed, n_samples: 0, d })
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn k_soft(&self) -> usize {
        self.k_soft
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    /// Upper-triangular distances for `(k, i)`, or `None` outside the table.
    pub fn pairs(&self, k: usize, i: u32) -> Option<&[f64]> {
        if k == 0 || k > self.k_soft || i == 0 || i > self.depth {
            return None;
        }
        let p = pair_count(self.scales);
        let start = ((k - 1) * self.depth as usize + (i as usize - 1)) * p;
        Some(&self.d[start..start + p])
    }

    /// Symmetric lookup; zero on the diagonal.
    pub fn get(&self, k: usize, i: u32, s: usize, m: usize) -> Option<f64> {
        if s > self.scales || m > self.scales {
            return None;
        }
        if s == m {
            return self.pairs(k, i).map(|_| 0.0);
        }
        let (a, b) = if s < m { (s, m) } else { (m, s) };
        self.pairs(k, i).map(|p| p[pair_index(self.scales, a, b)])
    }

    /// Largest distance stored at level `i`.
    pub fn level_max(&self, i: u32) -> f64 {
        (1..=self.k_soft).filter_map(|k| self.pairs(k, i)).flatten().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelEntry {
    k: usize,
    i: u32,
    s: usize,
    alpha: f64,
    beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DistanceEntry {
    k: usize,
    i: u32,
    s: usize,
    m: usize,
    d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFileRepr {
    version: u32,
    #[serde(rename = "M")]
    scales: usize,
    #[serde(rename = "D")]
    depth: u32,
    #[serde(rename = "K_soft")]
    k_soft: usize,
    seed: u64,
    #[serde(default)]
    n_samples: usize,
    models: Vec<ModelEntry>,
    distance_table: Vec<DistanceEntry>,
}

/// Trained models plus their distance table, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub models: ModelSet,
    pub table: DistanceTable,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        let (m, t) = (&self.models, &self.table);
        let mut models = Vec::new();
        for k in 1..=m.k_soft() {
            for i in 1..=m.depth() {
                for s in 0..=m.scales() {
                    let b = m.get(k, i, s);
                    models.push(ModelEntry { k, i, s, alpha: b.alpha(), beta: b.beta() });
                }
            }
        }
        let mut distance_table = Vec::new();
        for k in 1..=t.k_soft() {
            for i in 1..=t.depth() {
                for s in 0..=t.scales() {
                    for mm in s + 1..=t.scales() {
                        distance_table.push(DistanceEntry { k, i, s, m: mm, d: t.get(k, i, s, mm).unwrap() });
                    }
                }
            }
        }
        let repr = ModelFileRepr {
            version: MODEL_FILE_VERSION,
            scales: m.scales(),
            depth: m.depth(),
            k_soft: m.k_soft(),
            seed: t.seed(),
            n_samples: t.n_samples(),
            models,
            distance_table,
        };
        let mut s = serde_json::to_string_pretty(&repr)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: ModelFileRepr = serde_json::from_str(text)?;
        if repr.version != MODEL_FILE_VERSION {
            return Err(Error::Format(format!("unsupported model file version {}", repr.version)));
        }
        let mut by_triple = BTreeMap::new();
        for e in &repr.models {
            by_triple.insert((e.k, e.i, e.s), (e.alpha, e.beta));
        }
        let models = ModelSet::from_fn(repr.k_soft, repr.depth, repr.scales, |k, i, s| {
            let (a, b) = by_triple
                .get(&(k, i, s))
                .ok_or_else(|| Error::Format(format!("model file lacks density (k={k}, i={i}, s={s})")))?;
            BetaModel::new(*a, *b)
        })?;
        let mut by_pair = BTreeMap::new();
        for e in &repr.distance_table {
            let key = if e.s < e.m { (e.k, e.i, e.s, e.m) } else { (e.k, e.i, e.m, e.s) };
            by_pair.insert(key, e.d);
        }
        let mut table = DistanceTable::from_fn(repr.k_soft, repr.depth, repr.scales, repr.seed, |k, i, s, m| {
            by_pair
                .get(&(k, i, s, m))
                .copied()
                .ok_or_else(|| Error::Format(format!("model file lacks distance (k={k}, i={i}, s={s}, m={m})")))
        })?;
        table.n_samples = repr.n_samples;
        Ok(Self { models, table })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
