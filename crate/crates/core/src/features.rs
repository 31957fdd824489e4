//! Oriented edge maps, their integral tables, and the soft query catalog.
//!
//! Every soft query is the proportion of edge pixels (optionally of one
//! orientation) inside a window centered on a lattice cell and enlarged by a
//! factor `F`. With the integral tables each query costs four lookups.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::GrayImage;
use crate::lattice::{Cell, Rect};

pub const DEFAULT_EDGE_THRESHOLD: i32 = 32;

/// Number of soft query families in the catalog.
pub const K_SOFT: usize = 25;

/// Gradient direction bins, modulo 180 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Deg0, Direction::Deg45, Direction::Deg90, Direction::Deg135];

    fn bin(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Any,
    Dir(Direction),
}

impl Orientation {
    fn table(self) -> usize {
        match self {
            Orientation::Any => 0,
            Orientation::Dir(d) => 1 + d.bin(),
        }
    }
}

/// One soft query family: orientation filter and window enlargement factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryFamily {
    pub k: usize,
    pub orientation: Orientation,
    pub factor: u32,
}

/// The 25 soft families. `k = 1..5` count any edge with `F = 1..5`;
/// `k = 6..9` count one direction with `F = 1`; `k = 10..25` count one
/// direction with `F = 2..5`, direction-major.
pub fn soft_families() -> Vec<QueryFamily> {
    let mut out = Vec::with_capacity(K_SOFT);
    for f in 1..=5 {
        out.push(QueryFamily { k: out.len() + 1, orientation: Orientation::Any, factor: f });
    }
    for d in Direction::ALL {
        out.push(QueryFamily { k: out.len() + 1, orientation: Orientation::Dir(d), factor: 1 });
    }
    for d in Direction::ALL {
        for f in 2..=5 {
            out.push(QueryFamily { k: out.len() + 1, orientation: Orientation::Dir(d), factor: f });
        }
    }
    out
}

/// Edge labels plus cumulative counts for the union mask and each direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegralSet {
    width: u32,
    height: u32,
    /// 0 = no edge, 1..=4 = direction bin + 1
    labels: Vec<u8>,
    tables: [Vec<u32>; 5],
}

fn quantize(gx: i32, gy: i32) -> u8 {
    let mut deg = (gy as f64).atan2(gx as f64).to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if deg >= 180.0 {
        deg -= 180.0;
    }
    ((deg / 45.0).round() as u8) % 4
}

/// Marks a pixel as an edge when the larger central-difference gradient
/// exceeds `magnitude_threshold`, binning its direction into four classes.
pub fn detect_edges(image: &GrayImage, magnitude_threshold: i32) -> IntegralSet {
    let (w, h) = (image.width(), image.height());
    let mut labels = vec![0u8; w as usize * h as usize];
    let at = |x: i64, y: i64| -> i32 {
        let xc = x.clamp(0, w as i64 - 1) as u32;
        let yc = y.clamp(0, h as i64 - 1) as u32;
        image.get(xc, yc) as i32
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = at(x + 1, y) - at(x - 1, y);
            let gy = at(x, y + 1) - at(x, y - 1);
            if gx.abs().max(gy.abs()) > magnitude_threshold {
                labels[y as usize * w as usize + x as usize] = 1 + quantize(gx, gy);
            }
        }
    }
    IntegralSet::from_labels(w, h, labels)
}

impl IntegralSet {
    /// Builds the tables from a label map (0 = none, 1..=4 = direction + 1).
    pub fn from_labels(width: u32, height: u32, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), width as usize * height as usize);
        let stride = width as usize + 1;
        let size = stride * (height as usize + 1);
        let mut tables: [Vec<u32>; 5] = std::array::from_fn(|_| vec![0u32; size]);
        for y in 0..height as usize {
            let mut row = [0u32; 5];
            for x in 0..width as usize {
                let l = labels[y * width as usize + x];
                if l > 0 {
                    row[0] += 1;
                    row[l as usize] += 1;
                }
                for (t, table) in tables.iter_mut().enumerate() {
                    table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row[t];
                }
            }
        }
        Self { width, height, labels, tables }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Label of pixel `(x, y)`: `None` if not an edge.
    pub fn label(&self, x: u32, y: u32) -> Option<Direction> {
        match self.labels[y as usize * self.width as usize + x as usize] {
            0 => None,
            l => Some(Direction::ALL[l as usize - 1]),
        }
    }

    /// Raw table entry: marked pixels in `[0, x) x [0, y)`.
    pub fn table_entry(&self, orientation: Orientation, x: u32, y: u32) -> u32 {
        self.tables[orientation.table()][y as usize * (self.width as usize + 1) + x as usize]
    }

    pub fn image_rect(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    fn clip(&self, rect: &Rect) -> Rect {
        let x0 = rect.x0.min(self.width);
        let y0 = rect.y0.min(self.height);
        let x1 = rect.x1().min(self.width);
        let y1 = rect.y1().min(self.height);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Edge pixels of `orientation` inside `rect` (clipped to the image).
    pub fn count(&self, rect: &Rect, orientation: Orientation) -> u64 {
        let r = self.clip(rect);
        let t = &self.tables[orientation.table()];
        let s = self.width as usize + 1;
        let idx = |x: u32, y: u32| y as usize * s + x as usize;
        (t[idx(r.x1(), r.y1())] as u64 + t[idx(r.x0, r.y0)] as u64) - t[idx(r.x0, r.y1())] as u64 - t[idx(r.x1(), r.y0)] as u64
    }

    /// Fraction of edge pixels of `orientation` inside `rect` clipped to the
    /// image.
    pub fn edge_proportion(&self, rect: &Rect, orientation: Orientation) -> Result<f64> {
        let r = self.clip(rect);
        if r.is_empty() {
            return invalid(format!("window {rect:?} has no area inside the {}x{} image", self.width, self.height));
        }
        Ok(self.count(&r, orientation) as f64 / r.area() as f64)
    }

    /// Window with the same center as `rect` and sides scaled by `factor`,
    /// clipped to the image.
    pub fn query_window(&self, rect: &Rect, factor: u32) -> Rect {
        let grow = |start: u32, extent: u32, limit: u32| -> (u32, u32) {
            let start = start as i64;
            let extent = extent as i64;
            let f = factor as i64;
            let lo = start - ((f - 1) * extent) / 2;
            let hi = lo + f * extent;
            let lo = lo.clamp(0, limit as i64);
            let hi = hi.clamp(0, limit as i64);
            (lo as u32, (hi - lo) as u32)
        };
        let (x0, w) = grow(rect.x0, rect.width, self.width);
        let (y0, h) = grow(rect.y0, rect.height, self.height);
        Rect::new(x0, y0, w, h)
    }

    /// Soft query value for an arbitrary base rectangle.
    pub fn query_rect(&self, family: &QueryFamily, rect: &Rect) -> Result<f64> {
        self.edge_proportion(&self.query_window(rect, family.factor), family.orientation)
    }

    /// Soft query `X^k_{i,j}` for a lattice cell.
    pub fn query_value(&self, family: &QueryFamily, cell: &Cell) -> Result<f64> {
        self.query_rect(family, &cell.rect)
    }

    /// Copy with every edge inside `rect` removed.
    pub fn erase_edges(&self, rect: &Rect) -> IntegralSet {
        let r = self.clip(rect);
        if r.is_empty() {
            return self.clone();
        }
        let mut labels = self.labels.clone();
        for y in r.y0..r.y1() {
            let row = y as usize * self.width as usize;
            labels[row + r.x0 as usize..row + r.x1() as usize].fill(0);
        }
        IntegralSet::from_labels(self.width, self.height, labels)
    }
}
