use crate::lattice::Rect;

/// 2-D binary indexed tree over a pixel grid, counting marked pixels.
#[derive(Debug, Clone)]
pub(crate) struct Fenwick2d {
    width: usize,
    height: usize,
    tree: Vec<u32>,
}

impl Fenwick2d {
    pub fn new(width: u32, height: u32) -> Self {
        let (width, height) = (width as usize, height as usize);
        Self { width, height, tree: vec![0; (width + 1) * (height + 1)] }
    }

    pub fn add(&mut self, x: u32, y: u32) {
        let mut i = x as usize + 1;
        while i <= self.width {
            let mut j = y as usize + 1;
            while j <= self.height {
                self.tree[j * (self.width + 1) + i] += 1;
                j += j & j.wrapping_neg();
            }
            i += i & i.wrapping_neg();
        }
    }

    /// Count over `[0, x) x [0, y)`.
    fn prefix(&self, x: u32, y: u32) -> u64 {
        let mut total = 0u64;
        let mut i = (x as usize).min(self.width);
        while i > 0 {
            let mut j = (y as usize).min(self.height);
            while j > 0 {
                total += self.tree[j * (self.width + 1) + i] as u64;
                j -= j & j.wrapping_neg();
            }
            i -= i & i.wrapping_neg();
        }
        total
    }

    pub fn count(&self, r: &Rect) -> u64 {
        let (x0, y0, x1, y1) = (r.x0, r.y0, r.x1(), r.y1());
        self.prefix(x1, y1) + self.prefix(x0, y0) - self.prefix(x0, y1) - self.prefix(x1, y0)
    }
}
