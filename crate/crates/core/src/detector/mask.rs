use serde::Serialize;

/// One bit per pixel, rows padded to whole 64-bit words.
#[derive(Clone, PartialEq, Eq)]
pub struct ClassMask {
    width: u32,
    height: u32,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for ClassMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count_ones())
            .finish()
    }
}

impl ClassMask {
    pub fn new(width: u32, height: u32) -> Self {
        let words_per_row = (width as usize).div_ceil(64);
        Self {
            width,
            height,
            words_per_row,
            bits: vec![0; words_per_row * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn byte_len(&self) -> usize {
        self.bits.len() * 8
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        let w = self.bits[y as usize * self.words_per_row + x as usize / 64];
        w >> (x % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32) {
        self.bits[y as usize * self.words_per_row + x as usize / 64] |= 1 << (x % 64);
    }

    /// Sets every pixel of the rectangle, clipped to the mask.
    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32) {
        let x1 = (x.saturating_add(w)).min(self.width);
        let y1 = (y.saturating_add(h)).min(self.height);
        if x >= x1 {
            return;
        }
        for row in y..y1 {
            let words = self.row_words_mut(row);
            set_range(words, x as usize, x1 as usize);
        }
    }

    pub fn row_words(&self, y: u32) -> &[u64] {
        let start = y as usize * self.words_per_row;
        &self.bits[start..start + self.words_per_row]
    }

    fn row_words_mut(&mut self, y: u32) -> &mut [u64] {
        let start = y as usize * self.words_per_row;
        &mut self.bits[start..start + self.words_per_row]
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &ClassMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    /// Half-open runs `[start, end)` of set pixels in row `y`.
    pub fn row_runs(&self, y: u32) -> Vec<(u32, u32)> {
        let mut runs = Vec::new();
        let mut start = 0u32;
        let mut carry = 0u64;
        for (wi, &w) in self.row_words(y).iter().enumerate() {
            // Bit i of `edges` marks a change between pixel i-1 and pixel i.
            let mut edges = w ^ ((w << 1) | carry);
            while edges != 0 {
                let i = edges.trailing_zeros();
                let x = wi as u32 * 64 + i;
                if w >> i & 1 == 1 {
                    start = x;
                } else {
                    runs.push((start, x));
                }
                edges &= edges - 1;
            }
            carry = w >> 63;
        }
        if carry == 1 {
            runs.push((start, self.width));
        }
        runs
    }

    /// 8-bit rendering, 255 where set.
    pub fn to_gray_row(&self, y: u32, out: &mut [u8]) {
        for (x, o) in out.iter_mut().enumerate().take(self.width as usize) {
            *o = if self.get(x as u32, y) { 255 } else { 0 };
        }
    }
}

fn set_range(words: &mut [u64], start: usize, end: usize) {
    let (first, last) = (start / 64, (end - 1) / 64);
    for (wi, word) in words.iter_mut().enumerate().take(last + 1).skip(first) {
        let lo = if wi == first { start % 64 } else { 0 };
        let hi = if wi == last { (end - 1) % 64 + 1 } else { 64 };
        let m = if hi - lo == 64 {
            u64::MAX
        } else {
            ((1u64 << (hi - lo)) - 1) << lo
        };
        *word |= m;
    }
}

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }
}
