//! Sliding-window detection.
//!
//! Every grid window is cropped, scaled to the backend tile size, embedded and
//! classified. A window whose top class probability reaches the confidence
//! threshold stamps its full rectangle into that class's mask; boxes are the
//! tight bounds of the 8-connected mask components.

mod components;
mod mask;
mod output;
mod overlay;
mod staged;
mod stream;

pub use components::mask_to_bboxes;
pub use mask::{BBox, ClassMask};
pub use output::{write_mask_png, write_outputs, write_predictions_csv, DetectionOutputs};
pub use overlay::{overlay_row, render_overlay, RED};
pub use staged::multi_stage;
pub use stream::{detect_streaming, overlay_streaming, FnRows, PngRowSource, RowSource};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::FeatureBackend;
use crate::error::{Error, Result};
use crate::imaging::{generate_windows, prepare_tile, TileSource};
use crate::trainer::{argmax, predict_proba, LogRegModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DetectionConfig {
    pub confidence_threshold: f64,
    pub step_fraction: f64,
    pub batch_size: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.95,
            step_fraction: 0.60,
            batch_size: 128,
        }
    }
}

impl DetectionConfig {
    /// Checks the config against a `classes`-way model. A threshold of exactly
    /// 1 is legal but logged, since a softmax rarely reaches it.
    pub fn validate(&self, classes: usize) -> Result<()> {
        validate_threshold(self.confidence_threshold, classes)?;
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "step fraction must lie in (0, 1], got {}",
                self.step_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn validate_threshold(t: f64, classes: usize) -> Result<()> {
    let floor = 1.0 / classes.max(1) as f64;
    if !(t >= floor && t <= 1.0) {
        return Err(Error::Config(format!(
            "confidence threshold must lie in [1/{classes}, 1], got {t}"
        )));
    }
    if t == 1.0 {
        log::warn!("confidence threshold 1.0 will accept almost no windows");
    }
    Ok(())
}

/// Class probabilities of one evaluated window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowPrediction {
    pub x: u32,
    pub y: u32,
    pub probabilities: Vec<f64>,
}

impl WindowPrediction {
    /// Winning class and its probability.
    pub fn top(&self) -> (usize, f64) {
        argmax(&self.probabilities)
    }

    /// Class this window stamps at `threshold`, if any.
    pub fn accepted_class(&self, threshold: f64) -> Option<usize> {
        let (class, p) = self.top();
        (p >= threshold).then_some(class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDetection {
    pub label: String,
    pub mask: ClassMask,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub width: u32,
    pub height: u32,
    /// Physical window side in image pixels.
    pub window: u32,
    pub threshold: f64,
    /// One entry per model class, in model order.
    pub classes: Vec<ClassDetection>,
    /// Every evaluated window in evaluation order.
    pub windows: Vec<WindowPrediction>,
}

impl DetectionResult {
    /// Builds masks and boxes from window predictions.
    pub fn from_windows(
        width: u32,
        height: u32,
        window: u32,
        label_names: &[String],
        threshold: f64,
        windows: Vec<WindowPrediction>,
    ) -> Self {
        let mut masks: Vec<ClassMask> = label_names
            .iter()
            .map(|_| ClassMask::new(width, height))
            .collect();
        for w in &windows {
            if let Some(class) = w.accepted_class(threshold) {
                masks[class].fill_rect(w.x, w.y, window, window);
            }
        }
        let classes = label_names
            .iter()
            .zip(masks)
            .map(|(label, mask)| ClassDetection {
                label: label.clone(),
                boxes: mask_to_bboxes(&mask),
                mask,
            })
            .collect();
        Self {
            width,
            height,
            window,
            threshold,
            classes,
            windows,
        }
    }

    pub fn get(&self, label: &str) -> Option<&ClassDetection> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn label_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label.clone()).collect()
    }

    /// The same predictions re-stamped at another threshold.
    pub fn rethreshold(&self, threshold: f64) -> Self {
        Self::from_windows(
            self.width,
            self.height,
            self.window,
            &self.label_names(),
            threshold,
            self.windows.clone(),
        )
    }

    /// `(window, class, probability)` for every window that stamped a mask.
    pub fn accepted(&self) -> impl Iterator<Item = (&WindowPrediction, usize, f64)> + '_ {
        self.windows.iter().filter_map(move |w| {
            let (class, p) = w.top();
            (p >= self.threshold).then_some((w, class, p))
        })
    }
}

/// Refuses a backend that does not produce the features `model` was trained on.
pub fn check_compatible(model: &LogRegModel, backend: &dyn FeatureBackend) -> Result<()> {
    let d = backend.descriptor();
    let want = &model.acquisition;
    if d.id() != want.backend {
        return Err(Error::Descriptor {
            what: "backend",
            expected: format!("{} (dim {})", want.backend.name, want.backend.output_dim),
            found: format!("{} (dim {})", d.name, d.output_dim),
        });
    }
    if d.input_size != want.tile_size {
        return Err(Error::Descriptor {
            what: "backend tile size",
            expected: want.tile_size.to_string(),
            found: d.input_size.to_string(),
        });
    }
    Ok(())
}

/// Classifies the windows at `positions`, `batch_size` at a time. Only one
/// batch of tiles is alive at any moment.
pub fn classify_windows(
    source: &dyn TileSource,
    positions: &[(u32, u32)],
    window: u32,
    model: &LogRegModel,
    backend: &dyn FeatureBackend,
    batch_size: usize,
) -> Result<Vec<WindowPrediction>> {
    let config = backend.descriptor().preprocess_config();
    let mut out = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(batch_size.max(1)) {
        let tiles = chunk
            .par_iter()
            .map(|&(x, y)| prepare_tile(source, x, y, window, &config))
            .collect::<Result<Vec<_>>>()?;
        let features = backend.extract_features(&tiles)?;
        drop(tiles);
        let probs = predict_proba(model, &features)?;
        out.extend(
            chunk
                .iter()
                .zip(probs.iter_rows())
                .map(|(&(x, y), p)| WindowPrediction {
                    x,
                    y,
                    probabilities: p.to_vec(),
                }),
        );
    }
    Ok(out)
}

fn physical_window(model: &LogRegModel, width: u32, height: u32) -> Result<u32> {
    let window = model.acquisition.physical_window();
    if window > width || window > height {
        return Err(Error::WindowTooLarge {
            window,
            width,
            height,
        });
    }
    Ok(window)
}

/// Runs the model over every window of the grid on `image`.
pub fn detect(
    image: &dyn TileSource,
    model: &LogRegModel,
    backend: &dyn FeatureBackend,
    config: &DetectionConfig,
) -> Result<DetectionResult> {
    config.validate(model.num_classes())?;
    check_compatible(model, backend)?;
    let (width, height) = (image.width(), image.height());
    let window = physical_window(model, width, height)?;
    let grid = generate_windows(width, height, window, config.step_fraction)?;
    let positions: Vec<(u32, u32)> = grid.positions().collect();
    let windows = classify_windows(image, &positions, window, model, backend, config.batch_size)?;
    Ok(DetectionResult::from_windows(
        width,
        height,
        window,
        &model.label_names,
        config.confidence_threshold,
        windows,
    ))
}
