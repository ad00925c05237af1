//! The work behind the CLI subcommands, callable without a process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fissura::backend::{load_backend, BackendDescriptor, FeatureBackend, ReferenceBackend};
use fissura::detector::{
    detect, detect_streaming, multi_stage, overlay_streaming, write_mask_png, write_outputs,
    write_predictions_csv, DetectionConfig, DetectionOutputs, DetectionResult, PngRowSource, RED,
};
use fissura::imaging::ImageBuffer;
use fissura::store::FeatureStore;
use fissura::trainer::{
    grid_search, load_model, save_model, LogRegModel, TrainConfig, TrainReport,
};

use crate::error::{Result, WorkbenchError};
use crate::extract::read_meta;
use crate::layout::is_image_file;

/// Trains on the store at `store` (which needs its sidecar) and saves the
/// model to `out`.
pub fn train(store: &Path, config: &TrainConfig, out: &Path) -> Result<(LogRegModel, TrainReport)> {
    let meta = read_meta(store)?;
    let features = FeatureStore::open(store)?;
    if features.label_names() != meta.label_names.as_slice() {
        return Err(WorkbenchError::Layout(format!(
            "store labels {:?} disagree with its metadata {:?}",
            features.label_names(),
            meta.label_names
        )));
    }
    let (model, report) = grid_search(&features, config, &meta.acquisition())?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    if let Err(e) = save_model(&model, out) {
        let _ = fs::remove_file(out);
        return Err(e.into());
    }
    Ok((model, report))
}

/// The backend a model needs. Without an explicit descriptor only models
/// trained on the reference backend can be served.
pub fn backend_for_model(
    model: &LogRegModel,
    descriptor: Option<BackendDescriptor>,
) -> Result<Box<dyn FeatureBackend>> {
    let descriptor = match descriptor {
        Some(d) => d,
        None if model.acquisition.backend.name == ReferenceBackend::NAME => BackendDescriptor {
            input_size: model.acquisition.tile_size,
            ..BackendDescriptor::reference()
        },
        None => {
            return Err(WorkbenchError::Core(fissura::Error::Config(format!(
                "model was trained on backend `{}`; name its model asset",
                model.acquisition.backend.name
            ))))
        }
    };
    Ok(load_backend(&descriptor)?)
}

/// `input` itself, or the sorted images directly inside it.
pub fn detection_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(WorkbenchError::NotFound(input.display().to_string()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && is_image_file(p));
    files.sort();
    if files.is_empty() {
        return Err(WorkbenchError::NotFound(format!(
            "no images in {}",
            input.display()
        )));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

/// Runs `write` against a scratch directory next to `dest` and moves it into
/// place only when it succeeds, replacing an earlier `dest`.
fn publish<T>(dest: &Path, write: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let parent = dest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let mut name = std::ffi::OsString::from(".");
    name.push(dest.file_name().unwrap_or_default());
    name.push(".partial");
    let scratch = parent.join(name);
    if scratch.exists() {
        fs::remove_dir_all(&scratch)?;
    }
    fs::create_dir(&scratch)?;
    match write(&scratch) {
        Ok(v) => {
            if dest.exists() {
                fs::remove_dir_all(dest)?;
            }
            fs::rename(&scratch, dest)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&scratch);
            Err(e)
        }
    }
}

/// Result of detecting on one input image.
#[derive(Debug)]
pub struct ImageDetection {
    pub input: PathBuf,
    pub dir: PathBuf,
    pub result: DetectionResult,
}

/// Detects on `input` and writes masks, overlays and `predictions.csv` to
/// `out_root/<image stem>/`. With `stream` the image is read row by row and
/// must be a non-interlaced PNG.
pub fn detect_file(
    model: &LogRegModel,
    backend: &dyn FeatureBackend,
    config: &DetectionConfig,
    input: &Path,
    out_root: &Path,
    stream: bool,
) -> Result<ImageDetection> {
    let dir = out_root.join(stem(input));
    let result = publish(&dir, |scratch| {
        if stream {
            let result = detect_streaming(&mut PngRowSource::open(input)?, model, backend, config)?;
            write_streamed(input, scratch, &result)?;
            Ok(result)
        } else {
            let image = ImageBuffer::open(input)?;
            let result = detect(&image, model, backend, config)?;
            write_outputs(scratch, Some(&image), &result)?;
            Ok(result)
        }
    })?;
    Ok(ImageDetection {
        input: input.to_path_buf(),
        dir,
        result,
    })
}

fn write_streamed(input: &Path, dir: &Path, result: &DetectionResult) -> Result<DetectionOutputs> {
    let mut outputs = DetectionOutputs {
        predictions: dir.join("predictions.csv"),
        ..Default::default()
    };
    for class in &result.classes {
        let mask = dir.join(format!("{}_mask.png", class.label));
        write_mask_png(&class.mask, &mask)?;
        outputs.masks.push(mask);
        let overlay = dir.join(format!("{}_out.png", class.label));
        overlay_streaming(
            &mut PngRowSource::open(input)?,
            &class.boxes,
            RED,
            2,
            &overlay,
        )?;
        outputs.overlays.push(overlay);
    }
    write_predictions_csv(result, &outputs.predictions)?;
    Ok(outputs)
}

/// Second-stage models from `dir`: every `<label>.klm`, keyed by the stage-1
/// label it refines.
pub fn load_stage_models(dir: &Path) -> Result<BTreeMap<String, LogRegModel>> {
    let mut models = BTreeMap::new();
    for entry in fs::read_dir(dir)
        .map_err(|e| WorkbenchError::NotFound(format!("{}: {e}", dir.display())))?
    {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "klm") && path.is_file() {
            models.insert(stem(&path), load_model(&path)?);
        }
    }
    if models.is_empty() {
        return Err(WorkbenchError::NotFound(format!(
            "no .klm models in {}",
            dir.display()
        )));
    }
    Ok(models)
}

/// Stage-1 outputs go to `out_root/<image stem>/`, each refined label's to a
/// subdirectory named after it.
pub fn detect_staged_file(
    stage1: &LogRegModel,
    stage_models: &BTreeMap<String, LogRegModel>,
    backend: &dyn FeatureBackend,
    config: &DetectionConfig,
    input: &Path,
    out_root: &Path,
) -> Result<(ImageDetection, BTreeMap<String, DetectionResult>)> {
    let dir = out_root.join(stem(input));
    let (result, stages) = publish(&dir, |scratch| {
        let image = ImageBuffer::open(input)?;
        let result = detect(&image, stage1, backend, config)?;
        let stages = multi_stage(&image, &result, stage_models, backend, config)?;
        write_outputs(scratch, Some(&image), &result)?;
        for (label, r) in &stages {
            write_outputs(scratch.join(label), Some(&image), r)?;
        }
        Ok((result, stages))
    })?;
    let detection = ImageDetection {
        input: input.to_path_buf(),
        dir,
        result,
    };
    Ok((detection, stages))
}
