use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CplError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in sequence {sequence}: {reason}")]
    Ingestion { sequence: String, reason: String },

    #[error("task label {label} outside 1..={num_tasks}")]
    TaskLabel { label: usize, num_tasks: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {term}")]
    Numerical { term: String },

    #[error("empty split")]
    EmptySplit,

    #[error("action buffer holds nothing for task {task}")]
    EmptyBuffer { task: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training diverged at iteration {iteration} of task {task}: non-finite {term}")]
    Diverged {
        task: usize,
        iteration: usize,
        term: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = CplError> = std::result::Result<T, E>;

pub(crate) fn check_label(label: usize, num_tasks: usize) -> Result<()> {
    if label == 0 || label > num_tasks {
        Err(CplError::TaskLabel { label, num_tasks })
    } else {
        Ok(())
    }
}
