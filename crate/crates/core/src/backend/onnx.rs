use std::path::Path;
use std::sync::Arc;

use tract_onnx::prelude::*;
use tract_onnx::tract_hir::infer::Factoid;

use super::{check_batch, BackendDescriptor, FeatureBackend, FeatureMatrix, TensorLayout};
use crate::error::{Error, Result};
use crate::imaging::TileTensor;

/// Runs a pretrained convolutional base from an ONNX file. The graph must take
/// one image batch (layout from the descriptor) and return one tensor whose
/// per-sample size equals the descriptor's `output_dim`.
pub struct OnnxBackend {
    descriptor: BackendDescriptor,
    plan: Arc<TypedRunnableModel>,
}

impl std::fmt::Debug for OnnxBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackend")
            .field("descriptor", &self.descriptor)
            .finish_non_exhaustive()
    }
}

fn asset_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Asset {
        path: path.to_path_buf(),
        reason: format!("{e:#}"),
    }
}

impl OnnxBackend {
    pub fn load(descriptor: BackendDescriptor) -> Result<Self> {
        let path = descriptor
            .model_asset
            .clone()
            .ok_or_else(|| Error::Config("ONNX backend needs a model asset path".into()))?;
        let mut model = tract_onnx::onnx()
            .model_for_path(&path)
            .map_err(|e| asset_err(&path, e))?;

        let s = descriptor.input_size as i64;
        let expected: [i64; 3] = match descriptor.layout {
            TensorLayout::Nhwc => [s, s, 3],
            TensorLayout::Nchw => [3, s, s],
        };
        let declared = declared_input_dims(&model).map_err(|e| asset_err(&path, e))?;
        if let Some(dims) = declared {
            let matches = dims.len() == 4
                && dims[1..]
                    .iter()
                    .zip(expected)
                    .all(|(d, e)| d.is_none_or(|d| d == e));
            if !matches {
                return Err(Error::Descriptor {
                    what: "model input shape",
                    expected: format!("[N, {}, {}, {}]", expected[0], expected[1], expected[2]),
                    found: format_dims(&dims),
                });
            }
        }

        let batch = model.symbols.sym("N");
        let shape: Vec<TDim> = std::iter::once(batch.to_dim())
            .chain(expected.iter().map(|&d| d.to_dim()))
            .collect();
        model
            .set_input_fact(0, f32::fact(shape).into())
            .map_err(|e| asset_err(&path, e))?;
        model
            .set_output_fact(0, InferenceFact::default())
            .map_err(|e| asset_err(&path, e))?;
        let typed = model
            .into_typed()
            .and_then(|m| m.into_decluttered())
            .map_err(|e| asset_err(&path, e))?;

        let out_shape = typed
            .output_fact(0)
            .map_err(|e| asset_err(&path, e))?
            .shape
            .to_tvec();
        let per_sample: Option<i64> = out_shape[1..]
            .iter()
            .map(|d| d.to_i64().ok())
            .try_fold(1i64, |acc, d| d.map(|d| acc * d));
        match per_sample {
            Some(n) if n as usize == descriptor.output_dim => {}
            Some(n) => {
                return Err(Error::Descriptor {
                    what: "model output dim",
                    expected: descriptor.output_dim.to_string(),
                    found: n.to_string(),
                })
            }
            None => {
                return Err(Error::Descriptor {
                    what: "model output dim",
                    expected: descriptor.output_dim.to_string(),
                    found: format!("{out_shape:?}"),
                })
            }
        }

        let plan = typed
            .into_optimized()
            .and_then(|m| m.into_runnable())
            .map_err(|e| asset_err(&path, e))?;
        Ok(Self { descriptor, plan })
    }
}

/// Non-batch input dims the file itself declares, `None` where symbolic.
fn declared_input_dims(model: &InferenceModel) -> TractResult<Option<Vec<Option<i64>>>> {
    let fact = model.input_fact(0)?;
    if fact.shape.rank().concretize().is_none() {
        return Ok(None);
    }
    let dims = fact
        .shape
        .dims()
        .map(|d| d.concretize().and_then(|d| d.to_i64().ok()))
        .collect();
    Ok(Some(dims))
}

fn format_dims(dims: &[Option<i64>]) -> String {
    let parts: Vec<String> = dims
        .iter()
        .map(|d| d.map_or_else(|| "?".to_string(), |d| d.to_string()))
        .collect();
    format!("[{}]", parts.join(", "))
}

impl FeatureBackend for OnnxBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn extract_features(&self, batch: &[TileTensor]) -> Result<FeatureMatrix> {
        check_batch(&self.descriptor, batch)?;
        let dim = self.descriptor.output_dim;
        if batch.is_empty() {
            return Ok(FeatureMatrix::empty(dim));
        }
        let n = batch.len();
        let s = self.descriptor.input_size as usize;
        let input = match self.descriptor.layout {
            TensorLayout::Nhwc => {
                let mut data = Vec::with_capacity(n * s * s * 3);
                for t in batch {
                    data.extend_from_slice(t.data());
                }
                tract_ndarray::Array4::from_shape_vec((n, s, s, 3), data)
                    .map_err(|e| Error::Backend(e.to_string()))?
            }
            TensorLayout::Nchw => {
                tract_ndarray::Array4::from_shape_fn((n, 3, s, s), |(i, c, y, x)| {
                    batch[i].data()[(y * s + x) * 3 + c]
                })
            }
        };
        let outputs = self
            .plan
            .run(tvec!(input.into_tensor().into()))
            .map_err(|e| Error::Backend(format!("{e:#}")))?;
        let view = outputs[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Backend(format!("{e:#}")))?;
        let values: Vec<f32> = view.iter().copied().collect();
        if values.len() != n * dim {
            return Err(Error::Backend(format!(
                "model produced {} values for {n} tiles of dim {dim}",
                values.len()
            )));
        }
        FeatureMatrix::new(dim, values)
    }
}
