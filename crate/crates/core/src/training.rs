//! Offline fitting of the Beta response models from scenes with ground truth.
//!
//! Background samples (`s = 0`) are query values at random lattice cells of
//! level `i` that contain no target center. Foreground samples for scale `s`
//! are query values at randomly translated windows of the level-`i` cell
//! extent that contain the center of a target whose size falls in interval
//! `s`.

use rand::Rng;

use crate::beta::{fit_beta_mle_bounded, BetaModel, CLAMP};
use crate::error::{Error, Result};
use crate::features::{IntegralSet, QueryFamily};
use crate::lattice::{Lattice, Rect};
use crate::models::{DistanceTable, ModelFile, ModelSet};
use crate::rng;
use crate::scales::ScaleIntervals;
use crate::scene::Target;

pub const DEFAULT_SAMPLES_PER_CONFIG: usize = 5000;

/// Lower bound on fitted shapes. Below 1/2 a density is not square
/// integrable and below 3/4 the Monte-Carlo distance has infinite variance.
pub const MIN_SHAPE: f64 = 0.75;

/// Attempts at drawing a background cell before a scene is treated as unusable.
const MAX_DRAWS: usize = 64;

#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub integrals: IntegralSet,
    pub targets: Vec<Target>,
}

/// Fits `f_s^k(.; i)` for every family, level and scale. Every fit consumes at
/// least `samples_per_config` values.
pub fn train_models(
    scenes: &[TrainingScene],
    lattice: &Lattice,
    families: &[QueryFamily],
    intervals: &ScaleIntervals,
    samples_per_config: usize,
    seed: u64,
) -> Result<ModelSet> {
    if families.is_empty() {
        return Err(Error::InvalidArgument("no query families to train".into()));
    }
    if let Some((n, f)) = families.iter().enumerate().find(|(n, f)| f.k != n + 1) {
        return Err(Error::InvalidArgument(format!("family at position {n} has id {}, expected {}", f.k, n + 1)));
    }
    if samples_per_config < 10 {
        return Err(Error::InvalidArgument(format!("samples_per_config = {samples_per_config} is below 10")));
    }
    for (n, sc) in scenes.iter().enumerate() {
        if sc.integrals.width() != lattice.width() || sc.integrals.height() != lattice.height() {
            return Err(Error::Mismatch(format!(
                "training scene {n} is {}x{}, lattice is {}x{}",
                sc.integrals.width(),
                sc.integrals.height(),
                lattice.width(),
                lattice.height()
            )));
        }
    }

    let m = intervals.len();
    let depth = lattice.depth();
    let mut fitted: Vec<Option<BetaModel>> = vec![None; families.len() * depth as usize * (m + 1)];
    let slot = |k: usize, i: u32, s: usize| ((k - 1) * depth as usize + (i as usize - 1)) * (m + 1) + s;

    for i in 1..=depth {
        for s in 0..=m {
            let samples = collect(scenes, lattice, families, intervals, i, s, samples_per_config, seed)
                .ok_or(Error::TrainingCoverage { k: families[0].k, i, s })?;
            for (f, xs) in families.iter().zip(samples) {
                if xs.len() < samples_per_config {
                    return Err(Error::TrainingCoverage { k: f.k, i, s });
                }
                fitted[slot(f.k, i, s)] = Some(fit_with_fallback(xs)?);
            }
        }
    }
    ModelSet::from_fn(families.len(), depth, m, |k, i, s| {
        fitted[slot(k, i, s)].ok_or(Error::TrainingCoverage { k, i, s })
    })
}

/// Trains the models and computes their distance table.
#[allow(clippy::too_many_arguments)]
pub fn train_model_file(
    scenes: &[TrainingScene],
    lattice: &Lattice,
    families: &[QueryFamily],
    intervals: &ScaleIntervals,
    samples_per_config: usize,
    seed: u64,
    mc_samples: usize,
    mc_seed: u64,
) -> Result<ModelFile> {
    let models = train_models(scenes, lattice, families, intervals, samples_per_config, seed)?;
    let table = DistanceTable::build(&models, mc_samples, mc_seed)?;
    Ok(ModelFile { models, table })
}

/// A constant sample (for example a blank background) has no MLE; two
/// pseudo-observations at the clamp bounds keep the fit defined.
fn fit_with_fallback(mut xs: Vec<f64>) -> Result<BetaModel> {
    match fit_beta_mle_bounded(&xs, MIN_SHAPE) {
        Err(Error::DegenerateSample(_)) => {
            xs.push(CLAMP);
            xs.push(1.0 - CLAMP);
            fit_beta_mle_bounded(&xs, MIN_SHAPE)
        }
        other => other,
    }
}

/// Per-family sample lists for `(i, s)`, or `None` when nothing qualifies.
#[allow(clippy::too_many_arguments)]
fn collect(
    scenes: &[TrainingScene],
    lattice: &Lattice,
    families: &[QueryFamily],
    intervals: &ScaleIntervals,
    i: u32,
    s: usize,
    samples_per_config: usize,
    seed: u64,
) -> Option<Vec<Vec<f64>>> {
    // (scene, target) units; background units carry no target
    let eligible: Vec<(usize, Option<Target>)> = if s == 0 {
        (0..scenes.len()).filter(|&n| scenes[n].targets.is_empty() || i >= 2).map(|n| (n, None)).collect()
    } else {
        (0..scenes.len())
            .flat_map(|n| scenes[n].targets.iter().map(move |t| (n, *t)))
            .filter(|(_, t)| intervals.interval_of(t.size) == Some(s))
            .map(|(n, t)| (n, Some(t)))
            .collect()
    };
    if eligible.is_empty() {
        return None;
    }
    let per_scene = samples_per_config.div_ceil(eligible.len());
    let mut out = vec![Vec::with_capacity(per_scene * eligible.len()); families.len()];
    let mut any = false;
    for (u, &(n, target)) in eligible.iter().enumerate() {
        let sc = &scenes[n];
        let mut r = rng::stream(seed, &[i as u64, s as u64, u as u64]);
        for _ in 0..per_scene {
            let rect = match target {
                None => match background_cell(lattice, i, &sc.targets, &mut r) {
                    Some(rect) => rect,
                    None => break,
                },
                Some(t) => foreground_window(lattice, i, t, &mut r),
            };
            any = true;
            for (f, xs) in families.iter().zip(out.iter_mut()) {
                // windows are non-empty by construction
                xs.push(sc.integrals.query_rect(f, &rect).unwrap_or(0.0));
            }
        }
    }
    any.then_some(out)
}

fn background_cell(lattice: &Lattice, i: u32, targets: &[Target], r: &mut impl Rng) -> Option<Rect> {
    for _ in 0..MAX_DRAWS {
        let x = r.random_range(0..lattice.width());
        let y = r.random_range(0..lattice.height());
        let cell = lattice.path_to_pixel(x, y)[i as usize - 1];
        if !targets.iter().any(|t| cell.rect.contains(t.x, t.y)) {
            return Some(cell.rect);
        }
    }
    None
}

fn foreground_window(lattice: &Lattice, i: u32, t: Target, r: &mut impl Rng) -> Rect {
    let (ew, eh) = lattice.nominal_extent(i);
    let place = |c: u32, extent: u32, limit: u32, r: &mut dyn rand::RngCore| -> u32 {
        let lo = (c + 1).saturating_sub(extent);
        let hi = c.min(limit - extent);
        if hi <= lo {
            lo.min(hi)
        } else {
            r.random_range(lo..=hi)
        }
    };
    let x0 = place(t.x, ew, lattice.width(), r);
    let y0 = place(t.y, eh, lattice.height(), r);
    Rect::new(x0, y0, ew, eh)
}
