use crate::error::CliError;
use gsmap::pipeline::PipelineConfig;
use gsmap::Pose2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

/// One experiment: inputs, module thresholds, seed and output location.
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: PathBuf,
    pub trajectory: PathBuf,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    /// Starting pose guess for localization; defaults to the first true pose.
    #[serde(default)]
    pub initial_pose: Option<Pose2>,
    /// Merge the localization session into the map.
    #[serde(default = "default_true")]
    pub update_map: bool,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_true() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(scene: impl Into<PathBuf>, trajectory: impl Into<PathBuf>) -> Self {
        Self {
            scene: scene.into(),
            trajectory: trajectory.into(),
            calibration: None,
            initial_pose: None,
            update_map: true,
            out_dir: default_out(),
            pipeline: PipelineConfig::default(),
        }
    }

    /// Reads a config and makes its paths absolute.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.scene);
        fix(&mut self.trajectory);
        fix(&mut self.out_dir);
        if let Some(c) = self.calibration.as_mut() {
            fix(c);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` with a dotted key such as `pipeline.noise.bias_rot`.
    /// The value is parsed as JSON when possible and as a string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| CliError::Input(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        let exec = self.pipeline.exec;
        *self = serde_json::from_value(tree)
            .map_err(|e| CliError::Input(format!("override `{assignment}`: {e}")))?;
        self.pipeline.exec = exec;
        Ok(())
    }
}
