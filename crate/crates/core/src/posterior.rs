//! Sparse posterior over poses, stored on an explicitly instantiated subtree of
//! the lattice.
//!
//! Every instantiated cell carries one mass per scale. Internal cells hold the
//! sum of their children. Below a childless cell the mass is spread uniformly
//! over the cell's pixels at each scale, skipping poses that a perfect test has
//! ruled out. A childless cell whose mass exceeds `tau` is a frontier cell;
//! childless cells at or below `tau` stay instantiated (their siblings need
//! them for the parent sum) but are dormant.
//!
//! After each update the subtree is re-maintained: a cell whose mass falls to
//! `tau` or below, or whose children all do, loses its descendants and keeps
//! the mass; a childless cell above `tau` whose uniform children would exceed
//! `tau` is split.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fenwick::Fenwick2d;
use crate::lattice::{Cell, CellId, Lattice, Rect};

pub const DEFAULT_TAU: f64 = 0.001;

const NONE: u32 = u32::MAX;

/// A target hypothesis: pixel center and 1-based scale index, or absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pose {
    At { x: u32, y: u32, s: usize },
    Absent,
}

#[derive(Debug, Clone)]
struct Node {
    cell: Cell,
    parent: u32,
    children: [u32; 4],
    has_children: bool,
}

/// Per-scale record of poses ruled out by perfect tests.
#[derive(Debug, Clone)]
struct Exclusions {
    width: u32,
    height: u32,
    per_scale: Vec<Option<(Fenwick2d, Vec<bool>)>>,
}

impl Exclusions {
    fn new(width: u32, height: u32, scales: usize) -> Self {
        Self { width, height, per_scale: vec![None; scales] }
    }

    fn count(&self, rect: &Rect, s: usize) -> u64 {
        match &self.per_scale[s] {
            Some((fw, _)) => fw.count(rect),
            None => 0,
        }
    }

    fn contains(&self, x: u32, y: u32, s: usize) -> bool {
        match &self.per_scale[s] {
            Some((_, mask)) => mask[y as usize * self.width as usize + x as usize],
            None => false,
        }
    }

    /// Returns false if the pose was already excluded.
    fn insert(&mut self, x: u32, y: u32, s: usize) -> bool {
        let (w, h) = (self.width, self.height);
        let (fw, mask) = self.per_scale[s].get_or_insert_with(|| (Fenwick2d::new(w, h), vec![false; w as usize * h as usize]));
        let idx = y as usize * w as usize + x as usize;
        if mask[idx] {
            return false;
        }
        mask[idx] = true;
        fw.add(x, y);
        true
    }
}

/// Sparse posterior `pi_t` over `(pixel, scale)` poses plus the absent value.
#[derive(Debug, Clone)]
pub struct Posterior {
    lattice: Lattice,
    scales: usize,
    tau: f64,
    absent: f64,
    nodes: Vec<Node>,
    masses: Vec<f64>,
    free: Vec<u32>,
    index: HashMap<CellId, u32>,
    excluded: Exclusions,
}

impl Posterior {
    /// Uniform prior: `prior_absent` on the absent value, the rest spread evenly
    /// over scales and pixels. Only the root is instantiated.
    pub fn new(lattice: Lattice, prior_absent: f64, scales: usize, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&prior_absent) {
            return invalid(format!("prior_absent must lie in [0, 1), got {prior_absent}"));
        }
        if scales == 0 {
            return invalid("scale count must be at least 1");
        }
        if !(0.0..1.0).contains(&tau) {
            return invalid(format!("tau must lie in [0, 1), got {tau}"));
        }
        let mut post = Self {
            lattice,
            scales,
            tau,
            absent: prior_absent,
            nodes: Vec::new(),
            masses: Vec::new(),
            free: Vec::new(),
            index: HashMap::new(),
            excluded: Exclusions::new(lattice.width(), lattice.height(), scales),
        };
        post.reset_uniform(prior_absent)?;
        Ok(post)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn absent_mass(&self) -> f64 {
        self.absent
    }

    /// `pi(Lambda_{1,1})`, the total mass inside the image.
    pub fn present_mass(&self) -> f64 {
        self.node_masses(0).iter().sum()
    }

    /// Drops the tree and reassigns uniform mass over all poses not yet
    /// excluded, with `prior_absent` on the absent value.
    pub fn reset_uniform(&mut self, prior_absent: f64) -> Result<()> {
        if !(0.0..1.0).contains(&prior_absent) {
            return invalid(format!("prior_absent must lie in [0, 1), got {prior_absent}"));
        }
        self.nodes.clear();
        self.masses.clear();
        self.free.clear();
        self.index.clear();
        let root = self.lattice.root();
        let eff: Vec<u64> = (0..self.scales).map(|s| self.effective_area(&root.rect, s)).collect();
        let total: u64 = eff.iter().sum();
        let id = self.alloc(root, NONE);
        if total == 0 {
            self.absent = 1.0;
        } else {
            self.absent = prior_absent;
            let present = 1.0 - prior_absent;
            let base = id as usize * self.scales;
            for (m, &e) in self.masses[base..base + self.scales].iter_mut().zip(&eff) {
                *m = present * e as f64 / total as f64;
            }
        }
        Ok(())
    }

    fn alloc(&mut self, cell: Cell, parent: u32) -> u32 {
        let node = Node { cell, parent, children: [NONE; 4], has_children: false };
        let id = if let Some(id) = self.free.pop() {
            self.nodes[id as usize] = node;
            self.masses[id as usize * self.scales..(id as usize + 1) * self.scales].fill(0.0);
            id
        } else {
            self.nodes.push(node);
            self.masses.extend(std::iter::repeat_n(0.0, self.scales));
            (self.nodes.len() - 1) as u32
        };
        self.index.insert(cell.id, id);
        id
    }

    fn node_masses(&self, n: u32) -> &[f64] {
        &self.masses[n as usize * self.scales..(n as usize + 1) * self.scales]
    }

    fn node_masses_mut(&mut self, n: u32) -> &mut [f64] {
        &mut self.masses[n as usize * self.scales..(n as usize + 1) * self.scales]
    }

    fn node_total(&self, n: u32) -> f64 {
        self.node_masses(n).iter().sum()
    }

    fn effective_area(&self, rect: &Rect, s: usize) -> u64 {
        rect.area() - self.excluded.count(rect, s)
    }

    pub fn is_instantiated(&self, id: CellId) -> bool {
        self.index.contains_key(&id)
    }

    /// Per-scale masses `u_{i,j,s}` of an instantiated cell (index `s - 1`).
    pub fn cell_masses(&self, id: CellId) -> Option<&[f64]> {
        self.index.get(&id).map(|&n| self.node_masses(n))
    }

    /// Total mass `u_{i,j}` of an instantiated cell.
    pub fn cell_mass(&self, id: CellId) -> Option<f64> {
        self.cell_masses(id).map(|m| m.iter().sum())
    }

    pub fn has_children(&self, id: CellId) -> bool {
        self.index.get(&id).is_some_and(|&n| self.nodes[n as usize].has_children)
    }

    /// Instantiated cells in `(level, index)` order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = self.index.values().map(|&n| self.nodes[n as usize].cell).collect();
        out.sort_by_key(|c| c.id);
        out
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Childless instantiated cells with mass above `tau`, in `(level, index)` order.
    pub fn frontier(&self) -> Vec<CellId> {
        let mut out: Vec<CellId> = self
            .index
            .values()
            .filter(|&&n| !self.nodes[n as usize].has_children && self.node_total(n) > self.tau)
            .map(|&n| self.nodes[n as usize].cell.id)
            .collect();
        out.sort();
        out
    }

    /// Depth-first walk of the instantiated subtree, children in quadrant
    /// order. The visitor receives the cell, its per-scale masses, and whether
    /// it is childless; it returns whether to descend.
    pub fn walk<F>(&self, mut visit: F)
    where
        F: FnMut(&Cell, &[f64], bool) -> bool,
    {
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            let childless = !node.has_children;
            if visit(&node.cell, self.node_masses(n), childless) && !childless {
                for &c in node.children.iter().rev() {
                    if c != NONE {
                        stack.push(c);
                    }
                }
            }
        }
    }

    pub fn is_excluded(&self, x: u32, y: u32, s: usize) -> bool {
        s >= 1 && s <= self.scales && self.excluded.contains(x, y, s - 1)
    }

    /// Number of poses at scale `s` inside `rect` still carrying prior support.
    pub fn live_poses(&self, rect: &Rect, s: usize) -> u64 {
        self.effective_area(rect, s - 1)
    }

    /// Deepest instantiated node containing pixel `(x, y)`.
    fn deepest_at(&self, x: u32, y: u32) -> Option<u32> {
        if !self.lattice.root().rect.contains(x, y) {
            return None;
        }
        let mut n = 0u32;
        loop {
            let node = &self.nodes[n as usize];
            if !node.has_children {
                return Some(n);
            }
            let next = node.children.iter().copied().find(|&c| c != NONE && self.nodes[c as usize].cell.rect.contains(x, y));
            match next {
                Some(c) => n = c,
                None => return Some(n),
            }
        }
    }

    /// Probability of the single pose `(x, y, s)`.
    pub fn pose_mass(&self, x: u32, y: u32, s: usize) -> f64 {
        if s == 0 || s > self.scales || self.excluded.contains(x, y, s - 1) {
            return 0.0;
        }
        let Some(n) = self.deepest_at(x, y) else { return 0.0 };
        let eff = self.effective_area(&self.nodes[n as usize].cell.rect, s - 1);
        if eff == 0 {
            0.0
        } else {
            self.node_masses(n)[s - 1] / eff as f64
        }
    }

    /// Largest single-pose mass, taken over childless cells.
    pub fn max_pose_mass(&self) -> f64 {
        self.max_pose().map_or(0.0, |(_, _, _, m)| m)
    }

    /// Pose `(x, y, s, mass)` with the largest single-pose mass; ties go to
    /// the lowest `(cell, s)` and, inside a cell, to the first live pixel in
    /// raster order.
    pub fn max_pose(&self) -> Option<(u32, u32, usize, f64)> {
        let mut best: Option<(Cell, usize, f64)> = None;
        self.walk(|cell, masses, childless| {
            if childless {
                for (s, &m) in masses.iter().enumerate() {
                    if m > 0.0 {
                        let eff = self.effective_area(&cell.rect, s);
                        if eff > 0 {
                            let p = m / eff as f64;
                            let better = match &best {
                                None => true,
                                Some((c, bs, bm)) => p > *bm || (p == *bm && (cell.id, s) < (c.id, *bs)),
                            };
                            if better {
                                best = Some((*cell, s, p));
                            }
                        }
                    }
                }
            }
            true
        });
        let (cell, s, p) = best?;
        let r = cell.rect;
        (r.y0..r.y1())
            .flat_map(|y| (r.x0..r.x1()).map(move |x| (x, y)))
            .find(|&(x, y)| !self.excluded.contains(x, y, s))
            .map(|(x, y)| (x, y, s + 1, p))
    }

    /// Childless cell and scale with the largest mass, reported at the cell
    /// center; `Absent` if the absent mass exceeds every such pair.
    pub fn map_estimate(&self) -> (Pose, f64) {
        let mut best: Option<(CellId, usize, f64, Cell)> = None;
        self.walk(|cell, masses, childless| {
            if childless {
                for (s, &m) in masses.iter().enumerate() {
                    let better = match &best {
                        None => true,
                        Some((id, bs, bm, _)) => m > *bm || (m == *bm && (cell.id, s) < (*id, *bs)),
                    };
                    if better {
                        best = Some((cell.id, s, m, *cell));
                    }
                }
            }
            true
        });
        match best {
            Some((_, s, m, cell)) if m >= self.absent => {
                let (x, y) = cell.rect.center();
                (Pose::At { x, y, s: s + 1 }, m)
            }
            _ => (Pose::Absent, self.absent),
        }
    }

    fn check_ratios(&self, ratios: &[f64]) -> Result<()> {
        if ratios.len() != self.scales {
            return invalid(format!("expected {} likelihood ratios, got {}", self.scales, ratios.len()));
        }
        if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return invalid(format!("likelihood ratios must be finite and non-negative, got {r}"));
        }
        Ok(())
    }

    /// Bayes update for an observation about `target`: poses inside it at
    /// scale `s` are weighted by `ratios[s - 1]`, everything else by 1, and the
    /// result renormalized. Returns the normalizer `Z`.
    pub fn apply_update(&mut self, target: CellId, ratios: &[f64]) -> Result<f64> {
        self.check_ratios(ratios)?;
        let t = self.ensure_instantiated(target)?;
        let z = self.update_core(t, ratios)?;
        self.maintain();
        Ok(z)
    }

    /// Records a perfect-test negative: pose `(x, y, s)` gets zero mass now and
    /// forever after. Returns the normalizer.
    pub fn exclude_pose(&mut self, x: u32, y: u32, s: usize) -> Result<f64> {
        if s == 0 || s > self.scales {
            return invalid(format!("scale {s} outside 1..={}", self.scales));
        }
        let leaf = self.lattice.leaf_at(x, y).ok_or_else(|| Error::InvalidArgument(format!("pixel ({x}, {y}) outside image")))?;
        if self.excluded.contains(x, y, s - 1) {
            return Ok(1.0);
        }
        let t = self.ensure_instantiated(leaf.id)?;
        let mut ratios = vec![1.0; self.scales];
        ratios[s - 1] = 0.0;
        let z = self.update_core(t, &ratios)?;
        self.excluded.insert(x, y, s - 1);
        self.maintain();
        Ok(z)
    }

    /// Rules out every pose with center inside `rect`, at all scales, without
    /// renormalizing. Intended to be followed by [`Posterior::reset_uniform`].
    pub fn exclude_region(&mut self, rect: &Rect) {
        let root = self.lattice.root().rect;
        for y in rect.y0..rect.y1().min(root.y1()) {
            for x in rect.x0..rect.x1().min(root.x1()) {
                for s in 0..self.scales {
                    self.excluded.insert(x, y, s);
                }
            }
        }
    }

    /// Instantiates the path down to `target` by splitting childless ancestors,
    /// regardless of `tau`.
    fn ensure_instantiated(&mut self, target: CellId) -> Result<u32> {
        if let Some(&n) = self.index.get(&target) {
            return Ok(n);
        }
        let cell = self
            .lattice
            .cell(target)
            .ok_or_else(|| Error::InvalidArgument(format!("cell ({}, {}) is not in the lattice", target.level, target.index)))?;
        let (px, py) = (cell.rect.x0, cell.rect.y0);
        let mut n = 0u32;
        while self.nodes[n as usize].cell.id != target {
            if !self.nodes[n as usize].has_children {
                self.split(n);
            }
            let node = &self.nodes[n as usize];
            n = node
                .children
                .iter()
                .copied()
                .find(|&c| c != NONE && self.nodes[c as usize].cell.rect.contains(px, py))
                .expect("split covers parent rect");
        }
        Ok(n)
    }

    fn update_core(&mut self, t: u32, ratios: &[f64]) -> Result<f64> {
        let m = self.scales;
        let root: Vec<f64> = self.node_masses(0).to_vec();
        let tm: Vec<f64> = self.node_masses(t).to_vec();
        let mut z = self.absent;
        for s in 0..m {
            z += root[s] - tm[s] + ratios[s] * tm[s];
        }
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::DegeneratePosterior);
        }
        let inv = 1.0 / z;
        for v in self.masses.iter_mut() {
            *v *= inv;
        }
        self.absent *= inv;
        // Target subtree gets the ratio on top of 1/Z.
        let mut stack = vec![t];
        while let Some(n) = stack.pop() {
            for (v, r) in self.node_masses_mut(n).iter_mut().zip(ratios) {
                *v *= r;
            }
            let node = &self.nodes[n as usize];
            if node.has_children {
                stack.extend(node.children.iter().copied().filter(|&c| c != NONE));
            }
        }
        let mut p = self.nodes[t as usize].parent;
        while p != NONE {
            self.resum(p);
            p = self.nodes[p as usize].parent;
        }
        Ok(z)
    }

    fn resum(&mut self, n: u32) {
        let m = self.scales;
        let children = self.nodes[n as usize].children;
        let mut acc = vec![0.0; m];
        for c in children.into_iter().filter(|&c| c != NONE) {
            for (a, v) in acc.iter_mut().zip(self.node_masses(c)) {
                *a += v;
            }
        }
        self.node_masses_mut(n).copy_from_slice(&acc);
    }

    /// Splits a childless node, sharing each scale's mass by live pixel count.
    fn split(&mut self, n: u32) {
        let cell = self.nodes[n as usize].cell;
        debug_assert!(!self.nodes[n as usize].has_children);
        let parent_masses: Vec<f64> = self.node_masses(n).to_vec();
        let parent_eff: Vec<u64> = (0..self.scales).map(|s| self.effective_area(&cell.rect, s)).collect();
        let mut children = [NONE; 4];
        for (q, child) in cell.children() {
            let c = self.alloc(child, n);
            for s in 0..self.scales {
                let share = if parent_eff[s] == 0 {
                    0.0
                } else {
                    parent_masses[s] * self.effective_area(&child.rect, s) as f64 / parent_eff[s] as f64
                };
                self.masses[c as usize * self.scales + s] = share;
            }
            children[q] = c;
        }
        let node = &mut self.nodes[n as usize];
        node.children = children;
        node.has_children = true;
    }

    fn collapse(&mut self, n: u32) {
        let children = self.nodes[n as usize].children;
        for c in children.into_iter().filter(|&c| c != NONE) {
            if self.nodes[c as usize].has_children {
                self.collapse(c);
            }
            let id = self.nodes[c as usize].cell.id;
            self.index.remove(&id);
            self.free.push(c);
        }
        let node = &mut self.nodes[n as usize];
        node.children = [NONE; 4];
        node.has_children = false;
    }

    /// Largest mass a child would receive if `n` were split uniformly.
    fn max_child_share(&self, n: u32) -> f64 {
        let cell = self.nodes[n as usize].cell;
        let masses = self.node_masses(n);
        let parent_eff: Vec<u64> = (0..self.scales).map(|s| self.effective_area(&cell.rect, s)).collect();
        cell.children()
            .map(|(_, child)| {
                (0..self.scales)
                    .filter(|&s| parent_eff[s] > 0)
                    .map(|s| masses[s] * self.effective_area(&child.rect, s) as f64 / parent_eff[s] as f64)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    fn maintain(&mut self) {
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let total = self.node_total(n);
            if self.nodes[n as usize].has_children {
                let children = self.nodes[n as usize].children;
                let all_low = children.iter().filter(|&&c| c != NONE).all(|&c| self.node_total(c) <= self.tau);
                if total <= self.tau || all_low {
                    self.collapse(n);
                } else {
                    stack.extend(children.iter().copied().filter(|&c| c != NONE));
                }
            } else if total > self.tau
                && self.nodes[n as usize].cell.level() < self.lattice.depth()
                && self.max_child_share(n) > self.tau
            {
                self.split(n);
                let children = self.nodes[n as usize].children;
                stack.extend(children.iter().copied().filter(|&c| c != NONE));
            }
        }
    }

    /// Text dump: `level index s mass` per instantiated cell and scale, then
    /// `absent mass`. Masses carry 12 significant digits.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for cell in self.cells() {
            let masses = self.cell_masses(cell.id).unwrap();
            for (s, m) in masses.iter().enumerate() {
                let _ = writeln!(out, "{} {} {} {:.11e}", cell.level(), cell.index(), s + 1, m);
            }
        }
        let _ = writeln!(out, "absent {:.11e}", self.absent);
        out
    }

    /// Verifies normalization, parent sums, frontier threshold and subtree
    /// connectivity. Returns a description of the first violation.
    pub fn check_invariants(&self, tol: f64) -> std::result::Result<(), String> {
        let total = self.absent + self.present_mass();
        if (total - 1.0).abs() > tol {
            return Err(format!("total mass {total} differs from 1"));
        }
        for (&id, &n) in &self.index {
            let node = &self.nodes[n as usize];
            if node.cell.id != id {
                return Err(format!("index entry {id:?} points at {:?}", node.cell.id));
            }
            if let Some(parent) = id.parent() {
                let p = node.parent;
                if p == NONE || self.nodes[p as usize].cell.id != parent || !self.index.contains_key(&parent) {
                    return Err(format!("cell {id:?} is detached from its parent"));
                }
            }
            if node.has_children {
                let mut acc = vec![0.0; self.scales];
                for c in node.children.iter().copied().filter(|&c| c != NONE) {
                    for (a, v) in acc.iter_mut().zip(self.node_masses(c)) {
                        *a += v;
                    }
                }
                for (s, (a, v)) in acc.iter().zip(self.node_masses(n)).enumerate() {
                    if (a - v).abs() > tol {
                        return Err(format!("cell {id:?} scale {} holds {v}, children sum to {a}", s + 1));
                    }
                }
                let expected = node.cell.children().count();
                let present = node.children.iter().filter(|&&c| c != NONE).count();
                if expected != present {
                    return Err(format!("cell {id:?} has {present} of {expected} children"));
                }
            }
            if self.node_masses(n).iter().any(|m| *m < 0.0 || !m.is_finite()) {
                return Err(format!("cell {id:?} has an invalid mass"));
            }
        }
        Ok(())
    }
}
