use crate::error::{Error, Result};

/// Top-left corners of the sliding windows over an image, row-major.
///
/// Windows advance by `step_px` along each axis. When the next step would run
/// past the edge, one last window is placed flush against it, so every pixel is
/// covered and the final row and column are each emitted exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    window_size: u32,
    step_fraction: f64,
    step_px: u32,
    xs: Vec<u32>,
    ys: Vec<u32>,
}

impl TileGrid {
    pub fn window_size(&self) -> u32 {
        self.window_size
    }

    pub fn step_fraction(&self) -> f64 {
        self.step_fraction
    }

    pub fn step_px(&self) -> u32 {
        self.step_px
    }

    pub fn columns(&self) -> &[u32] {
        &self.xs
    }

    pub fn rows(&self) -> &[u32] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, index: usize) -> (u32, u32) {
        let cols = self.xs.len();
        (self.xs[index % cols], self.ys[index / cols])
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = (u32, u32)> + '_ {
        (0..self.len()).map(move |i| self.position(i))
    }
}

/// Window offsets along one axis of length `extent`.
pub fn axis_positions(extent: u32, window: u32, step: u32) -> Vec<u32> {
    debug_assert!(window <= extent && step >= 1);
    let last = extent - window;
    let mut out: Vec<u32> = (0..)
        .map(|k: u32| k * step)
        .take_while(|&p| p < last)
        .collect();
    out.push(last);
    out
}

pub fn generate_windows(
    image_width: u32,
    image_height: u32,
    window_size: u32,
    step_fraction: f64,
) -> Result<TileGrid> {
    if window_size == 0 {
        return Err(Error::InvalidArgument(
            "window size must be positive".into(),
        ));
    }
    if !(step_fraction > 0.0 && step_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "step fraction must lie in (0, 1], got {step_fraction}"
        )));
    }
    if window_size > image_width.min(image_height) {
        return Err(Error::WindowTooLarge {
            window: window_size,
            width: image_width,
            height: image_height,
        });
    }
    // Tolerate representation error such as 0.7 * 10 = 6.9999...
    let step_px = (step_fraction * window_size as f64 + 1e-9).floor() as u32;
    if step_px == 0 {
        return Err(Error::InvalidArgument(format!(
            "step fraction {step_fraction} of a {window_size} px window rounds to zero pixels"
        )));
    }
    Ok(TileGrid {
        window_size,
        step_fraction,
        step_px,
        xs: axis_positions(image_width, window_size, step_px),
        ys: axis_positions(image_height, window_size, step_px),
    })
}
