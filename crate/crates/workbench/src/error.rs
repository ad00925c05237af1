pub type Result<T, E = WorkbenchError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum WorkbenchError {
    #[error(transparent)]
    Core(#[from] fissura::Error),

    #[error("project layout: {0}")]
    Layout(String),

    #[error("annotation: {0}")]
    Annotation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),

    #[error("cannot start service: {0}")]
    Startup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<image::ImageError> for WorkbenchError {
    fn from(e: image::ImageError) -> Self {
        Self::Core(e.into())
    }
}
