use gsmap::camera::CameraError;
use gsmap::features::FeatureError;
use gsmap::geometry::GeometryError;
use gsmap::mapping::MapFormatError;
use gsmap::pipeline::PipelineError;
use gsmap::sim::SimError;
use thiserror::Error;

/// Exit status for input, configuration and file errors.
pub const EXIT_INPUT: i32 = 2;
/// Exit status for numerical failures inside the pipeline.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CameraError> for CliError {
    fn from(e: CameraError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<MapFormatError> for CliError {
    fn from(e: MapFormatError) -> Self {
        CliError::Input(format!("map file: {e}"))
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Sim(e) => e.into(),
            PipelineError::Input(m) => CliError::Input(m),
            PipelineError::Features(FeatureError::DimensionMismatch { .. }) => {
                CliError::Input(e.to_string())
            }
            other => CliError::Numerical(other.to_string()),
        }
    }
}
