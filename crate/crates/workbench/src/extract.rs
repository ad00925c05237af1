//! Embedding the crops of a project into a feature store.

use std::path::{Path, PathBuf};

use fissura::backend::{BackendDescriptor, FeatureBackend};
use fissura::evaluator::SkippedFile;
use fissura::imaging::{preprocess, resize, ImageBuffer, TileTensor};
use fissura::store::StoreWriter;
use fissura::trainer::Acquisition;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::parse_crop_name;
use crate::error::{Result, WorkbenchError};
use crate::layout::ProjectLayout;

/// Sidecar written next to a store: how its rows were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureMeta {
    pub backend: BackendDescriptor,
    pub scale_factor: f64,
    pub label_names: Vec<String>,
    pub label_counts: Vec<u64>,
}

impl FeatureMeta {
    pub fn acquisition(&self) -> Acquisition {
        Acquisition {
            backend: self.backend.id(),
            tile_size: self.backend.input_size,
            scale_factor: self.scale_factor,
        }
    }
}

/// `<store>.meta.json`
pub fn meta_path(store: &Path) -> PathBuf {
    let mut name = store.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    store.with_file_name(name)
}

pub fn read_meta(store: &Path) -> Result<FeatureMeta> {
    let path = meta_path(store);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| WorkbenchError::NotFound(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExtractSummary {
    pub store: PathBuf,
    pub meta: FeatureMeta,
    pub skipped: Vec<SkippedFile>,
}

/// Every crop of every label, sorted by label then file name.
pub fn list_datapoints(layout: &ProjectLayout) -> Result<(Vec<String>, Vec<(PathBuf, u32)>)> {
    let labels = layout.require_labels()?;
    let mut files = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let dir = layout.label_dir(label)?;
        files.extend(
            layout
                .crops(label)?
                .into_iter()
                .map(|f| (dir.join(f), i as u32)),
        );
    }
    Ok((labels, files))
}

/// The scale factor shared by all crop names. Crops with other names are
/// ignored; disagreeing scales are an error.
pub fn infer_scale(labels: &[String], files: &[(PathBuf, u32)]) -> Result<Option<f64>> {
    let mut scale: Option<f64> = None;
    for (path, label) in files {
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        if let Some(p) = parse_crop_name(&labels[*label as usize], &name) {
            match scale {
                Some(s) if s != p.scale_factor => {
                    return Err(WorkbenchError::Layout(format!(
                        "crops were taken at different scale factors ({s} and {})",
                        p.scale_factor
                    )))
                }
                _ => scale = Some(p.scale_factor),
            }
        }
    }
    Ok(scale)
}

fn load_tile(path: &Path, backend: &dyn FeatureBackend) -> std::result::Result<TileTensor, String> {
    let config = backend.descriptor().preprocess_config();
    let img = ImageBuffer::open(path).map_err(|e| e.to_string())?;
    let tile = if img.width() == config.target_tile_size && img.height() == config.target_tile_size
    {
        img
    } else {
        resize(&img, config.target_tile_size).map_err(|e| e.to_string())?
    };
    preprocess(&tile, &config).map_err(|e| e.to_string())
}

/// Embeds all crops of `layout` into a store at `out` and writes its sidecar.
/// Unreadable crops are skipped with a warning. `scale_factor` overrides the
/// scale read from crop names and is required when none can be read. Nothing
/// is left at `out` if extraction fails.
pub fn extract_features(
    layout: &ProjectLayout,
    backend: &dyn FeatureBackend,
    out: &Path,
    batch_size: usize,
    scale_factor: Option<f64>,
) -> Result<ExtractSummary> {
    if batch_size == 0 {
        return Err(WorkbenchError::Core(fissura::Error::Config(
            "batch size must be at least 1".into(),
        )));
    }
    let (labels, files) = list_datapoints(layout)?;
    if files.is_empty() {
        return Err(WorkbenchError::Layout(format!(
            "no crops under {}",
            layout.datapoints_dir().display()
        )));
    }
    let inferred = infer_scale(&labels, &files)?;
    let scale_factor = scale_factor.or(inferred).ok_or_else(|| {
        WorkbenchError::Layout("crop names carry no scale factor; pass one explicitly".into())
    })?;
    let meta_file = meta_path(out);
    let result = write(
        backend,
        out,
        &meta_file,
        &labels,
        &files,
        batch_size,
        scale_factor,
    );
    if result.is_err() {
        let _ = std::fs::remove_file(out);
        let _ = std::fs::remove_file(&meta_file);
    }
    result
}

fn write(
    backend: &dyn FeatureBackend,
    out: &Path,
    meta_file: &Path,
    labels: &[String],
    files: &[(PathBuf, u32)],
    batch_size: usize,
    scale_factor: f64,
) -> Result<ExtractSummary> {
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = StoreWriter::create(out, backend.output_dim(), labels, batch_size)?;
    let mut counts = vec![0u64; labels.len()];
    let mut skipped = Vec::new();
    for chunk in files.chunks(batch_size) {
        let loaded: Vec<_> = chunk
            .par_iter()
            .map(|(p, _)| load_tile(p, backend))
            .collect();
        let mut tiles = Vec::with_capacity(chunk.len());
        let mut rows = Vec::with_capacity(chunk.len());
        for ((path, label), tile) in chunk.iter().zip(loaded) {
            match tile {
                Ok(t) => {
                    tiles.push(t);
                    rows.push(*label);
                    counts[*label as usize] += 1;
                }
                Err(reason) => {
                    log::warn!("skipping {}: {reason}", path.display());
                    skipped.push(SkippedFile {
                        path: path.clone(),
                        reason,
                    });
                }
            }
        }
        if !tiles.is_empty() {
            writer.append(&backend.extract_features(&tiles)?, &rows)?;
        }
    }
    writer.finalize()?;
    let meta = FeatureMeta {
        backend: backend.descriptor().clone(),
        scale_factor,
        label_names: labels.to_vec(),
        label_counts: counts,
    };
    std::fs::write(meta_file, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(ExtractSummary {
        store: out.to_path_buf(),
        meta,
        skipped,
    })
}
