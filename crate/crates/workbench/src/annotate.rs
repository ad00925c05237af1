//! Turning a drawn polyline into training crops.
//!
//! Each segment of the polyline yields `crops_per_segment` square windows
//! whose centers are evenly spaced from the first endpoint to the second.
//! A window side is `round(tile_size / scale_factor)`; windows that would
//! cross the image border are shifted inward. Crops are resized to the tile
//! size and saved as `<label>_s<scale>_<image stem>_<seq>.png`.

use std::path::{Path, PathBuf};

use fissura::imaging::{extract_crop, resize, ImageBuffer};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorkbenchError};
use crate::layout::ProjectLayout;

pub const DEFAULT_CROPS_PER_SEGMENT: usize = 5;

fn default_crops_per_segment() -> usize {
    DEFAULT_CROPS_PER_SEGMENT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Annotation {
    pub image_id: String,
    pub label: String,
    pub scale_factor: f64,
    /// `[x, y]` points in image pixels.
    pub polyline: Vec<[f64; 2]>,
    #[serde(default = "default_crops_per_segment")]
    pub crops_per_segment: usize,
}

/// A square crop window in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub side: u32,
}

/// Physical window side for a scale factor: `round(tile_size / scale_factor)`.
pub fn physical_window(tile_size: u32, scale_factor: f64) -> Result<u32> {
    if !(scale_factor.is_finite() && scale_factor > 0.0) {
        return Err(WorkbenchError::Annotation(format!(
            "scale factor must be positive, got {scale_factor}"
        )));
    }
    let side = (tile_size as f64 / scale_factor).round();
    if side < 1.0 || side > u32::MAX as f64 {
        return Err(WorkbenchError::Annotation(format!(
            "scale factor {scale_factor} gives no usable window for {tile_size} px tiles"
        )));
    }
    Ok(side as u32)
}

/// The windows an annotation covers on a `width`×`height` image, in segment
/// order. Zero-length segments contribute nothing and are logged.
pub fn crop_rects(
    width: u32,
    height: u32,
    annotation: &Annotation,
    tile_size: u32,
) -> Result<Vec<CropRect>> {
    let a = annotation;
    if a.polyline.len() < 2 {
        return Err(WorkbenchError::Annotation(format!(
            "a path needs at least 2 points, got {}",
            a.polyline.len()
        )));
    }
    if a.crops_per_segment == 0 {
        return Err(WorkbenchError::Annotation(
            "cropsPerSegment must be at least 1".into(),
        ));
    }
    for &[x, y] in &a.polyline {
        let inside = (0.0..=width as f64).contains(&x) && (0.0..=height as f64).contains(&y);
        if !inside {
            return Err(WorkbenchError::Annotation(format!(
                "point ({x}, {y}) lies outside the {width}x{height} image"
            )));
        }
    }
    let side = physical_window(tile_size, a.scale_factor)?;
    if side > width || side > height {
        return Err(fissura::Error::WindowTooLarge {
            window: side,
            width,
            height,
        }
        .into());
    }
    let n = a.crops_per_segment;
    let half = side as f64 / 2.0;
    let place = |c: f64, extent: u32| (c - half).round().clamp(0.0, (extent - side) as f64) as u32;
    let mut rects = Vec::new();
    for (i, s) in a.polyline.windows(2).enumerate() {
        let ([x0, y0], [x1, y1]) = (s[0], s[1]);
        if x0 == x1 && y0 == y1 {
            log::warn!(
                "skipping zero-length segment {i} of the `{}` path on {}",
                a.label,
                a.image_id
            );
            continue;
        }
        for k in 0..n {
            // A single crop sits at the segment midpoint.
            let t = if n == 1 {
                0.5
            } else {
                k as f64 / (n - 1) as f64
            };
            let (cx, cy) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            rects.push(CropRect {
                x: place(cx, width),
                y: place(cy, height),
                side,
            });
        }
    }
    Ok(rects)
}

fn stem(image_id: &str) -> &str {
    Path::new(image_id)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(image_id)
}

pub fn crop_file_name(label: &str, scale_factor: f64, image_stem: &str, seq: u64) -> String {
    format!("{label}_s{scale_factor}_{image_stem}_{seq:04}.png")
}

/// The parts of a crop file name produced by [`crop_file_name`].
#[derive(Debug, Clone, PartialEq)]
pub struct CropName {
    pub scale_factor: f64,
    pub image_stem: String,
    pub seq: u64,
}

pub fn parse_crop_name(label: &str, file_name: &str) -> Option<CropName> {
    let rest = file_name
        .strip_suffix(".png")?
        .strip_prefix(label)?
        .strip_prefix("_s")?;
    let (scale, rest) = rest.split_once('_')?;
    let (image_stem, seq) = rest.rsplit_once('_')?;
    if seq.is_empty() || !seq.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(CropName {
        scale_factor: scale.parse().ok()?,
        image_stem: image_stem.to_string(),
        seq: seq.parse().ok()?,
    })
}

/// One past the highest sequence number already used in `dir` for this
/// label, scale and image, so later annotations never overwrite earlier crops.
fn next_seq(dir: &Path, label: &str, scale_factor: f64, image_stem: &str) -> Result<u64> {
    let mut next = 0;
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        if let Some(p) = parse_crop_name(label, &name.to_string_lossy()) {
            if p.scale_factor == scale_factor && p.image_stem == image_stem {
                next = next.max(p.seq + 1);
            }
        }
    }
    Ok(next)
}

/// Cuts the annotation's crops out of `image` and writes them to the label
/// directory. On failure the crops written so far are removed.
pub fn crops_from_path(
    layout: &ProjectLayout,
    image: &ImageBuffer,
    annotation: &Annotation,
    tile_size: u32,
) -> Result<Vec<PathBuf>> {
    let dir = layout.label_dir(&annotation.label)?;
    let rects = crop_rects(image.width(), image.height(), annotation, tile_size)?;
    let image_stem = stem(&annotation.image_id);
    let first = next_seq(&dir, &annotation.label, annotation.scale_factor, image_stem)?;
    let mut written = Vec::with_capacity(rects.len());
    let result = rects.iter().zip(first..).try_for_each(|(r, seq)| {
        let crop = extract_crop(image, r.x as i64, r.y as i64, r.side)?;
        let tile = resize(&crop, tile_size)?;
        let path = dir.join(crop_file_name(
            &annotation.label,
            annotation.scale_factor,
            image_stem,
            seq,
        ));
        tile.save_png(&path)?;
        written.push(path);
        Ok::<_, WorkbenchError>(())
    });
    if let Err(e) = result {
        for p in &written {
            let _ = std::fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(written)
}
