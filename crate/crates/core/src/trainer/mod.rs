//! Training the classifier head on extracted features.
//!
//! The head is an L2-regularised multinomial logistic regression. The
//! regularisation strength is chosen by stratified k-fold cross-validation
//! over a logarithmic grid, and the winner is refit on the whole training
//! slice and scored on the held-out slice.

mod grid_search;
mod lbfgs;
mod model_file;
mod objective;

pub use grid_search::{grid_search, grid_search_matrix, stratified_folds, CvScore, TrainReport};
pub use lbfgs::{minimize, FitTrace, LbfgsOptions};
pub use model_file::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use objective::{Objective, Rows};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendId, FeatureMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainConfig {
    /// Inverse regularisation strengths to try, strictly increasing.
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the objective gradient.
    pub gradient_tolerance: f64,
    pub split_ratio: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0],
            folds: 3,
            max_iterations: 512,
            gradient_tolerance: 1e-6,
            split_ratio: 0.75,
            shuffle_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::Config("C grid is empty".into()));
        }
        if self.c_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Config("C values must be positive and finite".into()));
        }
        if self.c_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("C grid must be strictly increasing".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(Error::Config(
                "gradient tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
        }
    }
}

/// How the training tiles were produced; a model can only be reapplied to
/// tiles acquired the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Acquisition {
    pub backend: BackendId,
    /// Backend input tile side in pixels.
    pub tile_size: u32,
    /// Tile size over physical window size; 2 means 112 px windows upscaled to 224.
    pub scale_factor: f64,
}

impl Acquisition {
    /// Physical window side: `round(tile_size / scale_factor)`.
    pub fn physical_window(&self) -> u32 {
        (self.tile_size as f64 / self.scale_factor).round() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor.is_finite() && self.scale_factor > 0.0) {
            return Err(Error::Config(format!(
                "invalid scale factor {}",
                self.scale_factor
            )));
        }
        if self.tile_size == 0 || self.physical_window() == 0 {
            return Err(Error::Config(
                "tile size and physical window must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A trained head: `softmax(Wᵀx + b)` over `label_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    /// D×K, row-major: `weights[d * K + k]`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub label_names: Vec<String>,
    pub c: f64,
    pub acquisition: Acquisition,
}

impl LogRegModel {
    pub fn num_classes(&self) -> usize {
        self.biases.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.acquisition.backend.output_dim
    }

    /// Squared Frobenius norm of the weights.
    pub fn weight_norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_names.iter().position(|l| l == label)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let k = self.biases.len();
        let d = self.acquisition.backend.output_dim;
        if k < 2 || self.label_names.len() != k {
            return Err(Error::Format(format!(
                "model needs K >= 2 with one name per class, got {k} biases and {} names",
                self.label_names.len()
            )));
        }
        if self.weights.len() != d * k {
            return Err(Error::Format(format!(
                "weights hold {} values, expected {d}x{k}",
                self.weights.len()
            )));
        }
        if self
            .weights
            .iter()
            .chain(&self.biases)
            .any(|v| !v.is_finite())
            || !self.c.is_finite()
        {
            return Err(Error::Format("model parameters must be finite".into()));
        }
        self.acquisition.validate()
    }
}

/// Row-major N×K class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    classes: usize,
    values: Vec<f64>,
}

impl Probabilities {
    pub fn rows(&self) -> usize {
        self.values.len() / self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.classes)
    }

    /// Index and value of the largest probability in row `i`; ties go to the
    /// lower class index.
    pub fn argmax(&self, i: usize) -> (usize, f64) {
        argmax(self.row(i))
    }
}

pub(crate) fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = (0, p[0]);
    for (j, &v) in p.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

pub fn predict_proba(model: &LogRegModel, features: &FeatureMatrix) -> Result<Probabilities> {
    let k = model.num_classes();
    if features.dim() != model.feature_dim() && !features.is_empty() {
        return Err(Error::Dimension(format!(
            "model expects {} features, got {}",
            model.feature_dim(),
            features.dim()
        )));
    }
    let mut values = vec![0.0; features.rows() * k];
    for (out, x) in values.chunks_exact_mut(k).zip(features.iter_rows()) {
        objective::logits(&model.weights, &model.biases, x, out);
        objective::softmax(out);
    }
    Ok(Probabilities { classes: k, values })
}

/// Fits the head on all rows of `features`.
pub fn fit(
    features: &FeatureMatrix,
    labels: &[u32],
    label_names: &[String],
    c: f64,
    config: &TrainConfig,
    acquisition: &Acquisition,
) -> Result<LogRegModel> {
    let indices: Vec<usize> = (0..features.rows()).collect();
    let rows = Rows {
        features,
        labels,
        indices: &indices,
    };
    fit_rows(rows, label_names, c, config, acquisition).map(|(m, _)| m)
}

/// Fits on a subset of rows and also returns the optimizer trace.
pub fn fit_rows(
    rows: Rows<'_>,
    label_names: &[String],
    c: f64,
    config: &TrainConfig,
    acquisition: &Acquisition,
) -> Result<(LogRegModel, FitTrace)> {
    let k = label_names.len();
    let d = rows.features.dim();
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Config(format!("C must be positive, got {c}")));
    }
    if d != acquisition.backend.output_dim {
        return Err(Error::Dimension(format!(
            "features have dim {d}, backend `{}` produces {}",
            acquisition.backend.name, acquisition.backend.output_dim
        )));
    }
    if rows.labels.len() != rows.features.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} feature rows",
            rows.labels.len(),
            rows.features.rows()
        )));
    }
    let mut present = vec![false; k];
    for &i in rows.indices {
        let l = rows.labels[i] as usize;
        if l >= k {
            return Err(Error::Label(format!(
                "label index {l} out of range for {k} classes"
            )));
        }
        present[l] = true;
    }
    let distinct = present.iter().filter(|&&p| p).count();
    if k < 2 || distinct < 2 {
        return Err(Error::DegenerateLabels { found: distinct });
    }
    if rows.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot fit {k} classes",
            rows.len()
        )));
    }

    let objective = Objective::new(rows, k, c);
    let (theta, trace) = minimize(
        |t| objective.value_and_gradient(t),
        vec![0.0; (d + 1) * k],
        &config.lbfgs(),
    );
    let (w, b) = theta.split_at(d * k);
    let model = LogRegModel {
        weights: w.to_vec(),
        biases: b.to_vec(),
        label_names: label_names.to_vec(),
        c,
        acquisition: acquisition.clone(),
    };
    Ok((model, trace))
}
