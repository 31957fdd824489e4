//! Quadtree decomposition of the image pose space.
//!
//! Level 1 is the whole image. Every cell splits into up to four children by
//! integer halving, the larger half going to the left/top child. Children with
//! zero area are never created, so a 1-pixel-wide cell above the leaf level has
//! fewer than four children. Leaves sit at level `depth` and cover one pixel.
//!
//! Cell indices are 1-based within a level; child `q` (0 = top-left,
//! 1 = top-right, 2 = bottom-left, 3 = bottom-right) of cell `j` has index
//! `4 (j - 1) + q + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned pixel rectangle `[x0, x0 + width) x [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x0: u32, y0: u32, width: u32, height: u32) -> Self {
        Self { x0, y0, width, height }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn x1(&self) -> u32 {
        self.x0 + self.width
    }

    pub fn y1(&self) -> u32 {
        self.y0 + self.height
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1() && y >= self.y0 && y < self.y1()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1() <= self.x1() && other.y1() <= self.y1()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1() && other.x0 < self.x1() && self.y0 < other.y1() && other.y0 < self.y1()
    }

    /// Center pixel (rounded toward the top-left for even extents).
    pub fn center(&self) -> (u32, u32) {
        (
            self.x0 + self.width.saturating_sub(1) / 2,
            self.y0 + self.height.saturating_sub(1) / 2,
        )
    }

    /// The four quadrants in child order; zero-area quadrants are `None`.
    pub fn quadrants(&self) -> [Option<Rect>; 4] {
        let wl = self.width.div_ceil(2);
        let wr = self.width - wl;
        let ht = self.height.div_ceil(2);
        let hb = self.height - ht;
        let mk = |x0, y0, w, h| {
            let r = Rect::new(x0, y0, w, h);
            (!r.is_empty()).then_some(r)
        };
        [
            mk(self.x0, self.y0, wl, ht),
            mk(self.x0 + wl, self.y0, wr, ht),
            mk(self.x0, self.y0 + ht, wl, hb),
            mk(self.x0 + wl, self.y0 + ht, wr, hb),
        ]
    }

    /// Square box of side `size` centered on pixel `(cx, cy)`, clipped to a
    /// `width x height` image.
    pub fn centered_box(cx: u32, cy: u32, size: f64, width: u32, height: u32) -> Rect {
        let half = size / 2.0;
        let x0 = (cx as f64 + 0.5 - half).floor().max(0.0) as u32;
        let y0 = (cy as f64 + 0.5 - half).floor().max(0.0) as u32;
        let x1 = ((cx as f64 + 0.5 + half).floor() as u32).min(width);
        let y1 = ((cy as f64 + 0.5 + half).floor() as u32).min(height);
        Rect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }
}

/// Identifies a quadtree cell by `(level, index)`, both 1-based. Ordering is
/// lexicographic, which is the tie-break order used throughout the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub level: u32,
    pub index: u64,
}

impl CellId {
    pub const ROOT: CellId = CellId { level: 1, index: 1 };

    pub fn child(&self, quadrant: usize) -> CellId {
        CellId { level: self.level + 1, index: 4 * (self.index - 1) + quadrant as u64 + 1 }
    }

    pub fn parent(&self) -> Option<CellId> {
        (self.level > 1).then(|| CellId { level: self.level - 1, index: (self.index - 1) / 4 + 1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub id: CellId,
    pub rect: Rect,
}

impl Cell {
    pub fn level(&self) -> u32 {
        self.id.level
    }

    pub fn index(&self) -> u64 {
        self.id.index
    }

    /// Non-degenerate children, paired with their quadrant number.
    pub fn children(&self) -> impl Iterator<Item = (usize, Cell)> + '_ {
        self.rect
            .quadrants()
            .into_iter()
            .enumerate()
            .filter_map(move |(q, r)| r.map(|rect| (q, Cell { id: self.id.child(q), rect })))
    }
}

/// Lattice descriptor for a `width x height` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    width: u32,
    height: u32,
    depth: u32,
}

impl Lattice {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid(format!("image dimensions must be positive, got {width}x{height}"));
        }
        let extent = width.max(height);
        // 1 + ceil(log2(extent))
        let depth = 1 + (u32::BITS - (extent - 1).leading_zeros());
        Ok(Self { width, height, depth })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn root(&self) -> Cell {
        Cell { id: CellId::ROOT, rect: Rect::new(0, 0, self.width, self.height) }
    }

    pub fn is_leaf(&self, id: CellId) -> bool {
        id.level == self.depth
    }

    /// Resolves a cell id to its rectangle, or `None` if the id is outside the
    /// lattice or names a zero-area quadrant.
    pub fn cell(&self, id: CellId) -> Option<Cell> {
        if id.level == 0 || id.level > self.depth || id.index == 0 {
            return None;
        }
        let steps = id.level - 1;
        if steps < 32 && id.index > 1u64 << (2 * steps) {
            return None;
        }
        let mut rect = self.root().rect;
        let path = id.index - 1;
        for step in (0..steps).rev() {
            let q = ((path >> (2 * step)) & 3) as usize;
            rect = rect.quadrants()[q]?;
        }
        Some(Cell { id, rect })
    }

    /// The leaf cell covering pixel `(x, y)`.
    pub fn leaf_at(&self, x: u32, y: u32) -> Option<Cell> {
        self.path_to_pixel(x, y).last().copied()
    }

    /// Root-to-leaf chain of cells containing pixel `(x, y)`.
    pub fn path_to_pixel(&self, x: u32, y: u32) -> Vec<Cell> {
        let mut out = Vec::with_capacity(self.depth as usize);
        let root = self.root();
        if !root.rect.contains(x, y) {
            return out;
        }
        out.push(root);
        let mut cur = root;
        while cur.level() < self.depth {
            let next = cur.children().find(|(_, c)| c.rect.contains(x, y)).map(|(_, c)| c);
            match next {
                Some(c) => {
                    out.push(c);
                    cur = c;
                }
                None => break,
            }
        }
        out
    }

    /// Every cell of the lattice in `(level, index)` order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut levels: Vec<Vec<Cell>> = vec![vec![self.root()]];
        for _ in 1..self.depth {
            let next: Vec<Cell> = levels.last().unwrap().iter().flat_map(|c| c.children().map(|(_, ch)| ch)).collect();
            levels.push(next);
        }
        let mut all: Vec<Cell> = levels.into_iter().flatten().collect();
        all.sort_by_key(|c| c.id);
        all
    }

    /// Cell extent at `level`, using the ceiling halving of the root.
    pub fn nominal_extent(&self, level: u32) -> (u32, u32) {
        let mut w = self.width;
        let mut h = self.height;
        for _ in 1..level {
            w = w.div_ceil(2);
            h = h.div_ceil(2);
        }
        (w, h)
    }
}
