//! The on-disk project convention.
//!
//! ```text
//! <root>/
//!   database/images/     pending source images
//!   database/DONE/       images already annotated
//!   datapoints/<label>/  training crops, one directory per class
//!   features/            extracted feature stores
//!   models/              trained heads
//!   output/              detection results
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Result, WorkbenchError};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectLayout {
    root: PathBuf,
}

/// A label or image id that is safe to use as a single path component.
pub fn is_plain_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && !name.contains(['/', '\\', '\0'])
        && Path::new(name).components().count() == 1
}

fn check_label(label: &str) -> Result<()> {
    let ok = is_plain_name(label)
        && label
            .chars()
            .all(|c| c.is_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(WorkbenchError::Layout(format!(
            "label `{label}` must be letters, digits, `-` or `_`"
        )))
    }
}

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Sorted names of the entries of `dir` that pass `keep`, hidden ones excluded.
fn list(dir: &Path, keep: impl Fn(&fs::DirEntry) -> bool) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') && keep(&entry) {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

fn is_dir(e: &fs::DirEntry) -> bool {
    e.file_type().is_ok_and(|t| t.is_dir())
}

fn is_image(e: &fs::DirEntry) -> bool {
    e.file_type().is_ok_and(|t| t.is_file()) && is_image_file(&e.path())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct LabelSummary {
    pub name: String,
    pub crops: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectSummary {
    pub root: PathBuf,
    pub pending_images: usize,
    pub done_images: usize,
    pub labels: Vec<LabelSummary>,
    pub feature_stores: Vec<String>,
    pub models: Vec<String>,
}

impl ProjectLayout {
    /// A layout rooted at `root`; nothing is checked.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// An existing project. Every directory of the layout must be present.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let layout = Self::new(root);
        for dir in layout.required_dirs() {
            if !dir.is_dir() {
                return Err(WorkbenchError::Layout(format!(
                    "{} is missing; run `fissura init` first",
                    dir.display()
                )));
            }
        }
        Ok(layout)
    }

    /// Creates any missing directories plus one directory per label.
    /// Existing content is left alone.
    pub fn init(root: impl Into<PathBuf>, labels: &[String]) -> Result<Self> {
        let layout = Self::new(root);
        for label in labels {
            check_label(label)?;
        }
        for dir in layout.required_dirs() {
            fs::create_dir_all(dir)?;
        }
        for label in labels {
            fs::create_dir_all(layout.datapoints_dir().join(label))?;
        }
        Ok(layout)
    }

    fn required_dirs(&self) -> [PathBuf; 6] {
        [
            self.images_dir(),
            self.done_dir(),
            self.datapoints_dir(),
            self.features_dir(),
            self.models_dir(),
            self.output_dir(),
        ]
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("database").join("images")
    }

    pub fn done_dir(&self) -> PathBuf {
        self.root.join("database").join("DONE")
    }

    pub fn datapoints_dir(&self) -> PathBuf {
        self.root.join("datapoints")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.root.join("output")
    }

    /// Crop directory of an existing label.
    pub fn label_dir(&self, label: &str) -> Result<PathBuf> {
        check_label(label)?;
        let dir = self.datapoints_dir().join(label);
        if !dir.is_dir() {
            return Err(WorkbenchError::Layout(format!(
                "no directory for label `{label}` under {}",
                self.datapoints_dir().display()
            )));
        }
        Ok(dir)
    }

    /// Class labels: the sorted names of the directories under `datapoints/`.
    pub fn labels(&self) -> Result<Vec<String>> {
        list(&self.datapoints_dir(), is_dir)
    }

    /// Like [`labels`](Self::labels), but an empty class set is an error.
    pub fn require_labels(&self) -> Result<Vec<String>> {
        let labels = self.labels()?;
        if labels.is_empty() {
            return Err(WorkbenchError::Layout(format!(
                "no label directories under {}",
                self.datapoints_dir().display()
            )));
        }
        Ok(labels)
    }

    /// Sorted crop file names of one label.
    pub fn crops(&self, label: &str) -> Result<Vec<String>> {
        list(&self.label_dir(label)?, is_image)
    }

    /// Sorted ids (file names) of images waiting for annotation.
    pub fn pending_images(&self) -> Result<Vec<String>> {
        list(&self.images_dir(), is_image)
    }

    pub fn done_images(&self) -> Result<Vec<String>> {
        list(&self.done_dir(), is_image)
    }

    /// Path of a pending image. Ids are bare file names; anything that could
    /// step outside `database/images` is rejected.
    pub fn pending_image(&self, id: &str) -> Result<PathBuf> {
        let path = self.images_dir().join(id);
        if !is_plain_name(id) || !is_image_file(&path) || !path.is_file() {
            return Err(WorkbenchError::NotFound(format!("pending image `{id}`")));
        }
        Ok(path)
    }

    /// Moves a pending image into `database/DONE`. Returns `false` without
    /// touching anything when the image is already there.
    pub fn mark_done(&self, id: &str) -> Result<bool> {
        if !is_plain_name(id) {
            return Err(WorkbenchError::NotFound(format!("image `{id}`")));
        }
        let from = self.images_dir().join(id);
        let to = self.done_dir().join(id);
        if from.is_file() {
            if to.exists() {
                return Err(WorkbenchError::Layout(format!(
                    "{} already exists in {}",
                    id,
                    self.done_dir().display()
                )));
            }
            fs::rename(&from, &to)?;
            Ok(true)
        } else if to.is_file() {
            Ok(false)
        } else {
            Err(WorkbenchError::NotFound(format!("image `{id}`")))
        }
    }

    pub fn summary(&self) -> Result<ProjectSummary> {
        let labels = self
            .labels()?
            .into_iter()
            .map(|name| {
                let crops = self.crops(&name)?.len();
                Ok(LabelSummary { name, crops })
            })
            .collect::<Result<_>>()?;
        let files = |dir: PathBuf| list(&dir, |e| e.file_type().is_ok_and(|t| t.is_file()));
        Ok(ProjectSummary {
            root: self.root.clone(),
            pending_images: self.pending_images()?.len(),
            done_images: self.done_images()?.len(),
            labels,
            feature_stores: files(self.features_dir())?
                .into_iter()
                .filter(|f| f.ends_with(".kfs"))
                .collect(),
            models: files(self.models_dir())?
                .into_iter()
                .filter(|f| f.ends_with(".klm"))
                .collect(),
        })
    }
}
