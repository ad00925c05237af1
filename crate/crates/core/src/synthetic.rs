//! Procedural crack imagery for tests, demos and benchmarks.
//!
//! Backgrounds are a concrete-like value-noise texture addressable per pixel,
//! so arbitrarily large images can be produced row by row. Cracks are thin
//! dark polylines drawn on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::ClassMask;
use crate::imaging::ImageBuffer;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in [-1, 1) from a lattice point.
fn lattice(seed: u64, x: i64, y: i64) -> f32 {
    let h = mix(seed ^ mix(x as u64 ^ mix(y as u64)));
    (h >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, x: u32, y: u32, cell: u32) -> f32 {
    let (ix, iy) = ((x / cell) as i64, (y / cell) as i64);
    let fx = smooth((x % cell) as f32 / cell as f32);
    let fy = smooth((y % cell) as f32 / cell as f32);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * fx;
    let bottom = c + (d - c) * fx;
    top + (bottom - top) * fy
}

/// Grey concrete-like texture: two octaves of value noise plus grain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Texture {
    pub seed: u64,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let s = self.seed;
        let v = 150.0
            + 16.0 * value_noise(s, x, y, 48)
            + 7.0 * value_noise(s ^ 0x5555, x, y, 9)
            + 6.0 * lattice(s ^ 0xaaaa, x as i64, y as i64);
        let g = v.clamp(0.0, 255.0);
        [
            (g + 4.0).min(255.0) as u8,
            g as u8,
            (g - 6.0).max(0.0) as u8,
        ]
    }

    /// Fills an RGB row of `row.len() / 3` pixels at height `y`.
    pub fn fill_row(&self, y: u32, row: &mut [u8]) {
        for (x, px) in row.chunks_exact_mut(3).enumerate() {
            px.copy_from_slice(&self.pixel(x as u32, y));
        }
    }

    pub fn image(&self, width: u32, height: u32) -> ImageBuffer {
        ImageBuffer::from_fn(width, height, |x, y| self.pixel(x, y)).expect("non-empty size")
    }

    /// The `size`×`size` patch whose top-left corner is `(x, y)`.
    pub fn patch(&self, x: u32, y: u32, size: u32) -> ImageBuffer {
        ImageBuffer::from_fn(size, size, |px, py| self.pixel(x + px, y + py))
            .expect("non-empty size")
    }
}

/// A thin dark polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Crack {
    pub points: Vec<(f64, f64)>,
    pub half_width: f64,
    pub seed: u64,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

impl Crack {
    /// A wandering path of `steps` segments of length `step` starting at
    /// `start`, kept `margin` pixels inside a `width`×`height` frame.
    pub fn random_walk(
        rng: &mut impl Rng,
        start: (f64, f64),
        steps: usize,
        step: f64,
        width: u32,
        height: u32,
        margin: f64,
    ) -> Self {
        let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut points = vec![start];
        let (lo_x, hi_x) = (margin, width as f64 - 1.0 - margin);
        let (lo_y, hi_y) = (margin, height as f64 - 1.0 - margin);
        for _ in 0..steps {
            angle += rng.random_range(-0.45..0.45);
            let (x, y) = *points.last().expect("start point");
            let mut nx = x + step * angle.cos();
            let mut ny = y + step * angle.sin();
            // Bounce off the frame.
            if nx < lo_x || nx > hi_x {
                angle = std::f64::consts::PI - angle;
                nx = nx.clamp(lo_x, hi_x);
            }
            if ny < lo_y || ny > hi_y {
                angle = -angle;
                ny = ny.clamp(lo_y, hi_y);
            }
            points.push((nx, ny));
        }
        Self {
            points,
            half_width: rng.random_range(1.0..1.6),
            seed: rng.random(),
        }
    }

    /// Distance from `(x, y)` to the centerline.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        self.points
            .windows(2)
            .map(|s| segment_distance((x, y), s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Calls `f(x, y)` once for every pixel within `half_width` of the
    /// centerline that lies inside a `width`×`height` frame.
    pub fn for_each_pixel(&self, width: u32, height: u32, mut f: impl FnMut(u32, u32)) {
        let pad = self.half_width.ceil() + 1.0;
        let xs = self.points.iter().map(|p| p.0);
        let ys = self.points.iter().map(|p| p.1);
        let x0 = (xs.clone().fold(f64::INFINITY, f64::min) - pad).max(0.0) as u32;
        let x1 = (xs.fold(f64::NEG_INFINITY, f64::max) + pad).min(width as f64 - 1.0) as u32;
        let y0 = (ys.clone().fold(f64::INFINITY, f64::min) - pad).max(0.0) as u32;
        let y1 = (ys.fold(f64::NEG_INFINITY, f64::max) + pad).min(height as f64 - 1.0) as u32;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.distance(x as f64, y as f64) <= self.half_width {
                    f(x, y);
                }
            }
        }
    }

    pub fn draw(&self, image: &mut ImageBuffer) {
        let (w, h) = (image.width(), image.height());
        let seed = self.seed;
        self.for_each_pixel(w, h, |x, y| {
            let v = (48.0 + 10.0 * lattice(seed, x as i64, y as i64)) as u8;
            let old = image.pixel(x, y);
            image.set_pixel(x, y, [old[0].min(v + 3), old[1].min(v), old[2].min(v)]);
        });
    }

    /// Shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(x, y)| (x + dx, y + dy)).collect(),
            ..self.clone()
        }
    }
}

/// A textured image with cracks drawn on it and the ground truth kept.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImageBuffer,
    pub cracks: Vec<Crack>,
}

impl Scene {
    /// `count` random-walk cracks of `steps` segments each, `step` pixels long.
    pub fn generate(
        width: u32,
        height: u32,
        count: usize,
        steps: usize,
        step: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = Texture::new(mix(seed)).image(width, height);
        let margin = 4.0;
        let cracks: Vec<Crack> = (0..count)
            .map(|_| {
                let start = (
                    rng.random_range(margin..width as f64 - margin),
                    rng.random_range(margin..height as f64 - margin),
                );
                Crack::random_walk(&mut rng, start, steps, step, width, height, margin)
            })
            .collect();
        for c in &cracks {
            c.draw(&mut image);
        }
        Self { image, cracks }
    }

    /// Pixels painted by any crack.
    pub fn crack_mask(&self) -> ClassMask {
        let (w, h) = (self.image.width(), self.image.height());
        let mut m = ClassMask::new(w, h);
        for c in &self.cracks {
            c.for_each_pixel(w, h, |x, y| m.set(x, y));
        }
        m
    }

    /// Distance from `(x, y)` to the nearest crack centerline.
    pub fn crack_distance(&self, x: f64, y: f64) -> f64 {
        self.cracks
            .iter()
            .map(|c| c.distance(x, y))
            .fold(f64::INFINITY, f64::min)
    }
}

/// A `size`-pixel tile with one crack passing close to its center.
pub fn crack_tile(size: u32, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::new(mix(seed));
    let mut img = tex.patch(rng.random_range(0..4096), rng.random_range(0..4096), size);
    let s = size as f64;
    let c = s / 2.0;
    let start = (
        c + rng.random_range(-s / 8.0..s / 8.0),
        c + rng.random_range(-s / 8.0..s / 8.0),
    );
    let step = s / 5.0;
    // Sometimes the crack ends inside the tile.
    let ahead = rng.random_range(1..=4);
    let behind = rng.random_range(0..=4);
    let forward = Crack::random_walk(&mut rng, start, ahead, step, size, size, 1.0);
    let backward = Crack::random_walk(&mut rng, start, behind, step, size, size, 1.0);
    let mut points: Vec<(f64, f64)> = backward.points.into_iter().rev().collect();
    points.extend(forward.points.into_iter().skip(1));
    let crack = Crack {
        points,
        half_width: forward.half_width * s / 112.0,
        seed: forward.seed,
    };
    crack.draw(&mut img);
    img
}

/// A crack-free `size`-pixel tile.
pub fn background_tile(size: u32, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Texture::new(mix(seed)).patch(rng.random_range(0..4096), rng.random_range(0..4096), size)
}
