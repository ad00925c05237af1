//! Feature extraction backends.
//!
//! A backend maps preprocessed tiles to fixed-length feature vectors. Two are
//! provided: [`ReferenceBackend`], a cheap deterministic block-statistics
//! extractor used for tests and synthetic fixtures, and (with the `onnx`
//! feature) [`OnnxBackend`], which runs a pretrained convolutional backbone
//! exported without its classifier layers.

#[cfg(feature = "onnx")]
mod onnx;
mod reference;

#[cfg(feature = "onnx")]
pub use onnx::OnnxBackend;
pub use reference::{ReferenceBackend, REFERENCE_BLOCKS, REFERENCE_DIM};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ChannelOrder, PreprocessConfig, TileTensor, IMAGENET_MEANS_RGB};

/// Flattened output size of a VGG16-class backbone on 224 px tiles: 512 maps of 7×7.
pub const VGG16_FEATURE_DIM: usize = 7 * 7 * 512;

/// Axis order of the model's image input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorLayout {
    /// N×H×W×C
    Nhwc,
    /// N×C×H×W
    Nchw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BackendDescriptor {
    pub name: String,
    pub input_size: u32,
    pub output_dim: usize,
    /// Means in `channel_order`.
    pub channel_means: [f32; 3],
    pub channel_order: ChannelOrder,
    pub layout: TensorLayout,
    pub model_asset: Option<PathBuf>,
}

impl BackendDescriptor {
    /// The built-in block-statistics backend on 224 px tiles.
    pub fn reference() -> Self {
        Self {
            name: ReferenceBackend::NAME.into(),
            input_size: 224,
            output_dim: REFERENCE_DIM,
            channel_means: IMAGENET_MEANS_RGB,
            channel_order: ChannelOrder::Rgb,
            layout: TensorLayout::Nhwc,
            model_asset: None,
        }
    }

    /// A VGG16-class convolutional base stored as an ONNX file.
    pub fn vgg16(model_asset: impl Into<PathBuf>) -> Self {
        Self {
            name: "vgg16".into(),
            input_size: 224,
            output_dim: VGG16_FEATURE_DIM,
            channel_means: IMAGENET_MEANS_RGB,
            channel_order: ChannelOrder::Rgb,
            layout: TensorLayout::Nhwc,
            model_asset: Some(model_asset.into()),
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_tile_size: self.input_size,
            channel_means: self.channel_means,
            channel_order: self.channel_order,
        }
    }

    pub fn id(&self) -> BackendId {
        BackendId {
            name: self.name.clone(),
            output_dim: self.output_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::Config(
                "backend output dimension must be positive".into(),
            ));
        }
        self.preprocess_config().validate()
    }
}

/// The part of a descriptor a trained model records: enough to refuse a
/// mismatched backend at detection time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BackendId {
    pub name: String,
    pub output_dim: usize,
}

/// Row-major matrix of `f32` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            values: Vec::new(),
        }
    }

    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension(
                "feature dimension must be positive".into(),
            ));
        }
        if values.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} values do not form rows of {dim}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i / dim });
        }
        Ok(Self { dim, values })
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Appends the rows of `other`.
    pub fn extend(&mut self, other: &FeatureMatrix) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dimension(format!(
                "cannot append rows of dim {} to a matrix of dim {}",
                other.dim, self.dim
            )));
        }
        self.values.extend_from_slice(&other.values);
        Ok(())
    }

    /// Gathers the given rows in order.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            dim: self.dim,
            values,
        }
    }
}

pub trait FeatureBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Embeds each tile; row `i` of the result belongs to `batch[i]`.
    fn extract_features(&self, batch: &[TileTensor]) -> Result<FeatureMatrix>;

    fn input_size(&self) -> u32 {
        self.descriptor().input_size
    }

    fn output_dim(&self) -> usize {
        self.descriptor().output_dim
    }
}

/// Opens the backend a descriptor names. A descriptor with a model asset is
/// served by the ONNX runtime; otherwise the name must be `reference`.
pub fn load_backend(descriptor: &BackendDescriptor) -> Result<Box<dyn FeatureBackend>> {
    descriptor.validate()?;
    match &descriptor.model_asset {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Asset {
                    path: path.clone(),
                    reason: "file not found".into(),
                });
            }
            load_onnx(descriptor)
        }
        None if descriptor.name == ReferenceBackend::NAME => {
            Ok(Box::new(ReferenceBackend::new(descriptor.clone())?))
        }
        None => Err(Error::Config(format!(
            "backend `{}` needs a model asset",
            descriptor.name
        ))),
    }
}

#[cfg(feature = "onnx")]
fn load_onnx(descriptor: &BackendDescriptor) -> Result<Box<dyn FeatureBackend>> {
    Ok(Box::new(OnnxBackend::load(descriptor.clone())?))
}

#[cfg(not(feature = "onnx"))]
fn load_onnx(descriptor: &BackendDescriptor) -> Result<Box<dyn FeatureBackend>> {
    Err(Error::Asset {
        path: descriptor.model_asset.clone().unwrap_or_default(),
        reason: "built without the `onnx` feature".into(),
    })
}

pub(crate) fn check_batch(descriptor: &BackendDescriptor, batch: &[TileTensor]) -> Result<()> {
    let size = descriptor.input_size;
    for (index, t) in batch.iter().enumerate() {
        if t.size() != size {
            return Err(Error::TensorShape {
                index,
                expected: format!("{size}x{size}x3"),
                found: format!("{0}x{0}x3", t.size()),
            });
        }
    }
    Ok(())
}
