use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed raster: {0}")]
    MalformedRaster(String),
    #[error("malformed dataset: {0}")]
    MalformedDataset(String),
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("band index {index} out of range for {n_bands} bands")]
    BandOutOfRange { index: usize, n_bands: usize },
    #[error("window out of bounds: {0}")]
    OutOfBounds(String),
    #[error("window contains nodata at channel {channel}, row {row}, col {col}")]
    NodataContamination { channel: usize, row: usize, col: usize },
    #[error("point ({x}, {y}) is outside the grid extent")]
    OutsideExtent { x: f64, y: f64 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid site summary: {0}")]
    InvalidSite(String),
    #[error("invalid LCZ class: {0:?}")]
    InvalidClass(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedRaster(_) => "malformed_raster",
            Error::MalformedDataset(_) => "malformed_dataset",
            Error::MalformedModel(_) => "malformed_model",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BandOutOfRange { .. } => "band_out_of_range",
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::NodataContamination { .. } => "nodata",
            Error::OutsideExtent { .. } => "outside_extent",
            Error::GeometryMismatch(_) => "geometry_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidSite(_) => "invalid_site",
            Error::InvalidClass(_) => "invalid_class",
            Error::Empty(_) => "empty",
            Error::Diverged { .. } => "diverged",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
