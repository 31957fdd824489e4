//! Synthetic scenes with planted targets and exact ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::GrayImage;
use crate::lattice::Rect;
use crate::rng;
use crate::scales::{ScaleIntervals, SizeGrid};

const MID: u8 = 128;
const HIGH: u8 = 208;
const LOW: u8 = 48;
/// Side of the blocks a target's texture is switched on and off in.
const TEXTURE_BLOCK: u32 = 4;

/// A planted target: pixel center and side length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub x: u32,
    pub y: u32,
    pub size: f64,
}

impl Target {
    pub fn new(x: u32, y: u32, size: f64) -> Self {
        Self { x, y, size }
    }

    /// Square box of side `size` around the center, clipped to the image.
    pub fn bbox(&self, width: u32, height: u32) -> Rect {
        Rect::centered_box(self.x, self.y, self.size, width, height)
    }
}

fn default_texture() -> f64 {
    0.02
}

fn default_target_density() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub targets: Vec<Target>,
    /// Background edge density.
    #[serde(default = "default_texture")]
    pub texture: f64,
    #[serde(default = "default_target_density")]
    pub target_density: f64,
    /// Number of clutter blobs.
    #[serde(default)]
    pub clutter: u32,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return invalid(format!("scene dimensions {}x{} must be positive", self.width, self.height));
        }
        for (name, d) in [("texture", self.texture), ("target_density", self.target_density)] {
            if !(0.0..=1.0).contains(&d) {
                return invalid(format!("{name} = {d} is outside [0, 1]"));
            }
        }
        for (n, t) in self.targets.iter().enumerate() {
            if t.x >= self.width || t.y >= self.height {
                return invalid(format!("target {n} center ({}, {}) lies outside the image", t.x, t.y));
            }
            if !(t.size >= 1.0 && t.size.is_finite()) {
                return invalid(format!("target {n} size {} must be at least one pixel", t.size));
            }
        }
        for a in 0..self.targets.len() {
            for b in a + 1..self.targets.len() {
                let ra = self.targets[a].bbox(self.width, self.height);
                let rb = self.targets[b].bbox(self.width, self.height);
                if ra.intersects(&rb) {
                    return invalid(format!("targets {a} and {b} overlap"));
                }
            }
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            targets: Vec::new(),
            texture: default_texture(),
            target_density: default_target_density(),
            clutter: 0,
            seed: 0,
        }
    }
}

/// Ground truth written next to synthesized images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub width: u32,
    pub height: u32,
    pub targets: Vec<Target>,
}

/// Renders a scene. Background pixels are mid-gray with sparse bright or dark
/// specks, clutter blobs carry specks at an intermediate density, and targets
/// are blocks of an oriented grating or a checkerboard.
pub fn synth_scene(spec: &SceneSpec) -> Result<(GrayImage, SceneTruth)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut img = GrayImage::filled(w, h, MID)?;

    // a lone speck marks its four neighbors as edges
    let mut specks = rng::stream(spec.seed, &[1]);
    let p_bg = spec.texture / 4.0;
    for y in 0..h {
        for x in 0..w {
            if p_bg > 0.0 && specks.random_bool(p_bg) {
                img.set(x, y, if specks.random_bool(0.5) { HIGH } else { LOW });
            }
        }
    }

    let mut blobs = rng::stream(spec.seed, &[2]);
    let clutter_density = spec.texture + 0.35 * (spec.target_density - spec.texture);
    let short = w.min(h);
    for _ in 0..spec.clutter {
        let side = blobs.random_range((short / 20).max(1)..=(short / 6).max(1));
        let x0 = blobs.random_range(0..=w.saturating_sub(side));
        let y0 = blobs.random_range(0..=h.saturating_sub(side));
        let p = (clutter_density / 4.0).clamp(0.0, 1.0);
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                if blobs.random_bool(p) {
                    img.set(x, y, if blobs.random_bool(0.5) { HIGH } else { LOW });
                }
            }
        }
    }

    for (n, t) in spec.targets.iter().enumerate() {
        let mut trng = rng::stream(spec.seed, &[3, n as u64]);
        let pattern = trng.random_range(0..5u32);
        let r = t.bbox(w, h);
        let bw = r.width.div_ceil(TEXTURE_BLOCK);
        let bh = r.height.div_ceil(TEXTURE_BLOCK);
        let on: Vec<bool> = (0..bw * bh).map(|_| trng.random_bool(spec.target_density)).collect();
        for y in r.y0..r.y1() {
            for x in r.x0..r.x1() {
                let b = ((y - r.y0) / TEXTURE_BLOCK) * bw + (x - r.x0) / TEXTURE_BLOCK;
                let v = if on[b as usize] {
                    let (xi, yi) = (x as i64, y as i64);
                    let phase = match pattern {
                        0 => xi / 2,
                        1 => yi / 2,
                        2 => (xi + yi) / 2,
                        3 => (xi - yi).rem_euclid(1 << 20) / 2,
                        _ => xi / 2 + yi / 2,
                    };
                    if phase % 2 == 0 {
                        HIGH
                    } else {
                        LOW
                    }
                } else {
                    MID
                };
                img.set(x, y, v);
            }
        }
    }
    Ok((img, SceneTruth { width: w, height: h, targets: spec.targets.clone() }))
}

/// Appearance parameters shared by a family of random scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneStyle {
    pub texture: f64,
    pub target_density: f64,
    pub clutter: u32,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self { texture: default_texture(), target_density: default_target_density(), clutter: 3 }
    }
}

/// Draws `count` well-separated targets fully inside the image. Sizes fall in
/// the span of the size grid of a uniformly chosen interval (or of `interval`
/// when given).
pub fn random_targets(
    width: u32,
    height: u32,
    count: usize,
    intervals: &ScaleIntervals,
    interval: Option<usize>,
    seed: u64,
) -> Result<Vec<Target>> {
    let grid = SizeGrid::new(intervals);
    let mut r = rng::stream(seed, &[4]);
    let mut out: Vec<Target> = Vec::with_capacity(count);
    let mut attempts = 0u32;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return invalid(format!("could not place {count} separated targets"));
        }
        let s = interval.unwrap_or_else(|| r.random_range(1..=intervals.len()));
        let sizes: Vec<f64> = grid.sizes_in(s).collect();
        let (lo, hi) = match (sizes.first(), sizes.last()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => return invalid(format!("scale interval {s} has no grid sizes")),
        };
        let size = if hi > lo { r.random_range(lo..=hi) } else { lo };
        let half = (size / 2.0).ceil() as u32;
        if 2 * half + 1 > width || 2 * half + 1 > height {
            return invalid(format!("targets of size {size:.1} do not fit a {width}x{height} image"));
        }
        let t = Target::new(r.random_range(half..width - half), r.random_range(half..height - half), size);
        let far = out.iter().all(|o| {
            let gap = 0.75 * (o.size + t.size);
            (o.x as f64 - t.x as f64).abs() > gap || (o.y as f64 - t.y as f64).abs() > gap
        });
        if far {
            out.push(t);
        }
    }
    Ok(out)
}

fn one() -> usize {
    1
}

fn default_clutter() -> u32 {
    SceneStyle::default().clutter
}

/// A batch of random scenes drawn from one appearance style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomScenes {
    pub count: usize,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub min_targets: usize,
    #[serde(default = "one")]
    pub max_targets: usize,
    #[serde(default = "default_texture")]
    pub texture: f64,
    #[serde(default = "default_target_density")]
    pub target_density: f64,
    #[serde(default = "default_clutter")]
    pub clutter: u32,
    /// Size ranges targets are drawn from; defaults to the image-scaled
    /// reference intervals.
    #[serde(default)]
    pub scale_intervals: Option<ScaleIntervals>,
    #[serde(default)]
    pub seed: u64,
}

impl RandomScenes {
    pub fn expand(&self) -> Result<Vec<SceneSpec>> {
        if self.min_targets > self.max_targets {
            return invalid(format!("min_targets {} exceeds max_targets {}", self.min_targets, self.max_targets));
        }
        let iv = self.scale_intervals.clone().unwrap_or_else(|| ScaleIntervals::for_image(self.width, self.height));
        (0..self.count)
            .map(|n| {
                let mut r = rng::stream(self.seed, &[5, n as u64]);
                let count = r.random_range(self.min_targets..=self.max_targets);
                let targets = random_targets(self.width, self.height, count, &iv, None, rng::derive_seed(self.seed, &[6, n as u64]))?;
                Ok(SceneSpec {
                    width: self.width,
                    height: self.height,
                    targets,
                    texture: self.texture,
                    target_density: self.target_density,
                    clutter: self.clutter,
                    seed: rng::derive_seed(self.seed, &[7, n as u64]),
                })
            })
            .collect()
    }
}

/// Input of scene synthesis: explicit scenes followed by random batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSetSpec {
    #[serde(default)]
    pub scenes: Vec<SceneSpec>,
    #[serde(default)]
    pub random: Vec<RandomScenes>,
}

impl SceneSetSpec {
    pub fn expand(&self) -> Result<Vec<SceneSpec>> {
        let mut out = self.scenes.clone();
        for batch in &self.random {
            out.extend(batch.expand()?);
        }
        for (n, s) in out.iter().enumerate() {
            s.validate().map_err(|e| crate::Error::InvalidArgument(format!("scene {n}: {e}")))?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{detect_edges, Orientation, DEFAULT_EDGE_THRESHOLD};

    fn spec(targets: Vec<Target>, seed: u64) -> SceneSpec {
        SceneSpec { width: 64, height: 64, targets, texture: 0.05, target_density: 0.9, clutter: 0, seed }
    }

    #[test]
    fn blank_scene() {
        let s = SceneSpec { texture: 0.0, targets: vec![], ..spec(vec![], 1) };
        let (img, truth) = synth_scene(&s).unwrap();
        assert!(img.data().iter().all(|&v| v == MID));
        assert!(truth.targets.is_empty());
    }

    #[test]
    fn deterministic() {
        let s = spec(vec![Target::new(30, 30, 16.0)], 5);
        assert_eq!(synth_scene(&s).unwrap().0, synth_scene(&s).unwrap().0);
        let other = spec(vec![Target::new(30, 30, 16.0)], 6);
        assert_ne!(synth_scene(&s).unwrap().0, synth_scene(&other).unwrap().0);
    }

    #[test]
    fn overlap_rejected() {
        let s = spec(vec![Target::new(20, 20, 16.0), Target::new(28, 24, 16.0)], 1);
        assert!(synth_scene(&s).is_err());
        let s = spec(vec![Target::new(70, 20, 16.0)], 1);
        assert!(synth_scene(&s).is_err());
    }

    #[test]
    fn target_box_is_densest() {
        let mut wins = 0;
        for seed in 0..100 {
            let t = Target::new(20, 24, 16.0);
            let (img, _) = synth_scene(&spec(vec![t], seed)).unwrap();
            let ints = detect_edges(&img, DEFAULT_EDGE_THRESHOLD);
            let tb = t.bbox(64, 64);
            let inside = ints.edge_proportion(&tb, Orientation::Any).unwrap();
            let ok = (0..=48).step_by(4).all(|y0| {
                (0..=48).step_by(4).all(|x0| {
                    let r = Rect::new(x0, y0, 16, 16);
                    r.intersects(&tb) || ints.edge_proportion(&r, Orientation::Any).unwrap() < inside
                })
            });
            wins += ok as u32;
        }
        assert!(wins >= 99, "{wins}");
    }

    #[test]
    fn scene_set_expansion() {
        let set: SceneSetSpec = serde_json::from_str(
            r#"{"random": [{"count": 6, "width": 128, "height": 96, "min_targets": 0, "max_targets": 2, "seed": 4}]}"#,
        )
        .unwrap();
        let a = set.expand().unwrap();
        assert_eq!(a, set.expand().unwrap());
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|s| s.targets.len() <= 2 && s.width == 128));
        let bad: SceneSetSpec = serde_json::from_str(r#"{"scenes": [{"width": 64, "height": 64, "targets": [{"x": 20, "y": 20, "size": 16}, {"x": 25, "y": 25, "size": 16}]}]}"#).unwrap();
        assert!(bad.expand().is_err());
    }

    #[test]
    fn random_targets_fit_and_separate() {
        let iv = ScaleIntervals::for_image(256, 256);
        for seed in 0..20 {
            let ts = random_targets(256, 256, 4, &iv, None, seed).unwrap();
            assert_eq!(ts.len(), 4);
            let s = SceneSpec { width: 256, height: 256, targets: ts.clone(), ..Default::default() };
            s.validate().unwrap();
            for t in &ts {
                let b = t.bbox(256, 256);
                assert!(iv.interval_of(t.size).is_some());
                assert!(b.width as f64 >= t.size.floor());
            }
        }
    }
}
