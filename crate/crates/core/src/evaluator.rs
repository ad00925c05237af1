//! Confusion matrices and the metrics derived from them.
//!
//! Metrics are kept as exact integer ratios so that reported values can be
//! rounded without accumulating floating-point error. A ratio with a zero
//! denominator is undefined and prints as `n/a`.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::backend::FeatureBackend;
use crate::error::{Error, Result};
use crate::imaging::{preprocess, resize, ImageBuffer, TileTensor};
use crate::trainer::{predict_proba, LogRegModel};

/// `numerator / denominator` over counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Ratio {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        Self {
            numerator,
            denominator,
        }
    }

    pub fn is_defined(&self) -> bool {
        self.denominator != 0
    }

    pub fn value(&self) -> Option<f64> {
        self.is_defined()
            .then(|| self.numerator as f64 / self.denominator as f64)
    }

    /// Rounds half-up to `decimals` places using integer arithmetic only,
    /// returning the scaled integer (e.g. 93 for 0.9285 at 2 decimals).
    pub fn round_scaled(&self, decimals: u32) -> Option<u64> {
        if !self.is_defined() {
            return None;
        }
        let scale = 10u128.pow(decimals);
        let n = self.numerator as u128 * scale * 2 + self.denominator as u128;
        Some((n / (2 * self.denominator as u128)) as u64)
    }

    pub fn rounded(&self, decimals: u32) -> Option<f64> {
        self.round_scaled(decimals)
            .map(|v| v as f64 / 10f64.powi(decimals as i32))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value() {
            Some(v) => match f.precision() {
                Some(p) => write!(f, "{v:.p$}"),
                None => write!(f, "{v:.4}"),
            },
            None => f.write_str("n/a"),
        }
    }
}

/// K×K counts; rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    label_names: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(label_names: Vec<String>) -> Self {
        let k = label_names.len();
        Self {
            label_names,
            counts: vec![0; k * k],
        }
    }

    /// Builds a matrix from explicit rows of counts.
    pub fn from_counts(label_names: Vec<String>, rows: &[Vec<u64>]) -> Result<Self> {
        let k = label_names.len();
        if rows.len() != k || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension(format!(
                "confusion matrix must be {k}x{k}"
            )));
        }
        Ok(Self {
            label_names,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.num_classes() + predicted]
    }

    pub fn add(&mut self, actual: usize, predicted: usize) {
        let k = self.num_classes();
        self.counts[actual * k + predicted] += 1;
    }

    /// Adds another matrix's counts; both must share label names.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.label_names != self.label_names {
            return Err(Error::Label(
                "cannot merge matrices over different labels".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes().max(1))
            .map(|r| r.to_vec())
            .collect()
    }

    pub fn accuracy(&self) -> Ratio {
        Ratio::new(self.trace(), self.total())
    }

    /// Correct predictions of `class` over all actual members of `class`.
    pub fn recall(&self, class: usize) -> Ratio {
        let row: u64 = (0..self.num_classes()).map(|p| self.get(class, p)).sum();
        Ratio::new(self.get(class, class), row)
    }

    /// Correct predictions of `class` over all predictions of `class`.
    pub fn precision(&self, class: usize) -> Ratio {
        let col: u64 = (0..self.num_classes()).map(|a| self.get(a, class)).sum();
        Ratio::new(self.get(class, class), col)
    }

    /// Fixed-width text table followed by the metrics.
    pub fn render_table(&self) -> String {
        let width = self
            .label_names
            .iter()
            .map(|l| l.len())
            .max()
            .unwrap_or(0)
            .max(10)
            + 2;
        let mut s = String::new();
        let _ = write!(s, "{:width$}", "actual\\pred");
        for l in &self.label_names {
            let _ = write!(s, "{l:>width$}");
        }
        s.push('\n');
        for (a, l) in self.label_names.iter().enumerate() {
            let _ = write!(s, "{l:width$}");
            for p in 0..self.num_classes() {
                let _ = write!(s, "{:>width$}", self.get(a, p));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "total {}  accuracy {:.4}", self.total(), self.accuracy());
        for (i, l) in self.label_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{l:width$} precision {:.4}  recall {:.4}",
                self.precision(i),
                self.recall(i)
            );
        }
        s
    }

    /// Machine-readable form: a header of label names, one row of counts per
    /// actual class, then accuracy, precision and recall rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual\\predicted");
        for l in &self.label_names {
            let _ = write!(s, ",{}", csv_field(l));
        }
        s.push('\n');
        for (a, l) in self.label_names.iter().enumerate() {
            s.push_str(&csv_field(l));
            for p in 0..self.num_classes() {
                let _ = write!(s, ",{}", self.get(a, p));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "accuracy,{}", csv_ratio(self.accuracy()));
        s.push_str("precision");
        for i in 0..self.num_classes() {
            let _ = write!(s, ",{}", csv_ratio(self.precision(i)));
        }
        s.push('\n');
        s.push_str("recall");
        for i in 0..self.num_classes() {
            let _ = write!(s, ",{}", csv_ratio(self.recall(i)));
        }
        s.push('\n');
        s
    }
}

fn csv_ratio(r: Ratio) -> String {
    r.value()
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Counts `(actual[i], predicted[i])` pairs.
pub fn confusion(
    actual: &[usize],
    predicted: &[usize],
    label_names: &[String],
) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} actual labels but {} predictions",
            actual.len(),
            predicted.len()
        )));
    }
    let k = label_names.len();
    let mut cm = ConfusionMatrix::new(label_names.to_vec());
    for (&a, &p) in actual.iter().zip(predicted) {
        if a >= k || p >= k {
            return Err(Error::Label(format!(
                "label index out of range for {k} classes"
            )));
        }
        cm.add(a, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: Ratio,
    pub recall: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: Ratio,
    pub positive_class: usize,
    /// Recall of the positive class.
    pub recall: Ratio,
    /// Precision of the positive class.
    pub precision: Ratio,
    pub per_class: Vec<ClassMetrics>,
}

/// Accuracy over all samples plus recall and precision of `positive_class`.
pub fn metrics(cm: &ConfusionMatrix, positive_class: usize) -> Result<Metrics> {
    if positive_class >= cm.num_classes() {
        return Err(Error::Label(format!(
            "positive class {positive_class} out of range for {} classes",
            cm.num_classes()
        )));
    }
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    Ok(Metrics {
        accuracy: cm.accuracy(),
        positive_class,
        recall: cm.recall(positive_class),
        precision: cm.precision(positive_class),
        per_class: cm
            .label_names()
            .iter()
            .enumerate()
            .map(|(i, l)| ClassMetrics {
                label: l.clone(),
                precision: cm.precision(i),
                recall: cm.recall(i),
            })
            .collect(),
    })
}

/// A crop that could not be classified.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    /// Crops whose top probability fell below the threshold; not in the matrix.
    pub rejected: u64,
    pub skipped: Vec<SkippedFile>,
}

/// Classifies every crop under `root/<label>/` and tallies actual against
/// predicted labels. Subdirectory names must be model labels. A crop counts
/// only when its top probability reaches `threshold`; with two classes and
/// `threshold <= 0.5` that is every crop.
pub fn evaluate_directory(
    model: &LogRegModel,
    backend: &dyn FeatureBackend,
    root: impl AsRef<Path>,
    threshold: f64,
    batch_size: usize,
) -> Result<EvaluationReport> {
    let root = root.as_ref();
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1], got {threshold}"
        )));
    }
    crate::detector::check_compatible(model, backend)?;
    let mut samples: Vec<(PathBuf, usize)> = Vec::new();
    let mut dirs: Vec<_> = std::fs::read_dir(root)?.collect::<std::io::Result<Vec<_>>>()?;
    dirs.sort_by_key(|e| e.file_name());
    for entry in dirs {
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let class = model.label_index(&name).ok_or_else(|| {
            Error::Label(format!(
                "directory `{name}` is not a model label {:?}",
                model.label_names
            ))
        })?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(entry.path())?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| {
            p.is_file()
                && !p
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with('.'))
        });
        files.sort();
        samples.extend(files.into_iter().map(|p| (p, class)));
    }

    let config = backend.descriptor().preprocess_config();
    let mut report = EvaluationReport {
        confusion: ConfusionMatrix::new(model.label_names.clone()),
        rejected: 0,
        skipped: Vec::new(),
    };
    for chunk in samples.chunks(batch_size.max(1)) {
        let prepared: Vec<std::result::Result<TileTensor, String>> = chunk
            .par_iter()
            .map(|(path, _)| {
                let img = ImageBuffer::open(path).map_err(|e| e.to_string())?;
                let tile = resize(&img, config.target_tile_size).map_err(|e| e.to_string())?;
                preprocess(&tile, &config).map_err(|e| e.to_string())
            })
            .collect();
        let mut tiles = Vec::with_capacity(chunk.len());
        let mut actual = Vec::with_capacity(chunk.len());
        for ((path, class), t) in chunk.iter().zip(prepared) {
            match t {
                Ok(t) => {
                    tiles.push(t);
                    actual.push(*class);
                }
                Err(reason) => {
                    log::warn!("skipping {}: {reason}", path.display());
                    report.skipped.push(SkippedFile {
                        path: path.clone(),
                        reason,
                    });
                }
            }
        }
        let probs = predict_proba(model, &backend.extract_features(&tiles)?)?;
        for (i, &a) in actual.iter().enumerate() {
            let (p, v) = probs.argmax(i);
            if v >= threshold {
                report.confusion.add(a, p);
            } else {
                report.rejected += 1;
            }
        }
    }
    Ok(report)
}
