use std::collections::BTreeMap;

use super::{
    check_compatible, classify_windows, physical_window, DetectionConfig, DetectionResult,
};
use crate::backend::FeatureBackend;
use crate::error::{Error, Result};
use crate::imaging::{generate_windows, TileSource};
use crate::trainer::LogRegModel;

/// Second-stage detection. For each stage-1 label that has a model, that model
/// runs only on windows whose center pixel lies inside the stage-1 mask of the
/// label. Results are keyed by the stage-1 label.
pub fn multi_stage(
    image: &dyn TileSource,
    stage1: &DetectionResult,
    stage_models: &BTreeMap<String, LogRegModel>,
    backend: &dyn FeatureBackend,
    config: &DetectionConfig,
) -> Result<BTreeMap<String, DetectionResult>> {
    let (width, height) = (image.width(), image.height());
    if (stage1.width, stage1.height) != (width, height) {
        return Err(Error::Dimension(format!(
            "stage-1 result is {}x{}, image is {width}x{height}",
            stage1.width, stage1.height
        )));
    }
    let mut out = BTreeMap::new();
    for (label, model) in stage_models {
        let gate = &stage1
            .get(label)
            .ok_or_else(|| {
                Error::Config(format!("stage model for unknown stage-1 label `{label}`"))
            })?
            .mask;
        config.validate(model.num_classes())?;
        check_compatible(model, backend)?;
        let window = physical_window(model, width, height)?;
        let grid = generate_windows(width, height, window, config.step_fraction)?;
        let half = window / 2;
        let positions: Vec<(u32, u32)> = grid
            .positions()
            .filter(|&(x, y)| gate.get(x + half, y + half))
            .collect();
        let windows =
            classify_windows(image, &positions, window, model, backend, config.batch_size)?;
        let result = DetectionResult::from_windows(
            width,
            height,
            window,
            &model.label_names,
            config.confidence_threshold,
            windows,
        );
        out.insert(label.clone(), result);
    }
    Ok(out)
}
