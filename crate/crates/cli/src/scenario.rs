//! Ready-to-run experiment setups on a generated three-row lot.

use crate::config::RunConfig;
use crate::error::CliError;
use gsmap::sim::{
    aisle_center_y, generate_lot, Scene, TrajectoryFile, TrajectoryKind, TrajectorySpec, LOT_MARGIN,
};
use gsmap::Pose2;
use std::path::Path;

pub const LOT_ROWS: u32 = 3;
pub const LOT_SLOTS: u32 = 14;
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    /// Rectangular loop through the first and last aisle with biased odometry.
    Loop,
    /// Out-and-back pass along the first aisle; the reference map for the rest.
    Aisle,
    /// Leaves the first aisle for the unmapped last aisle and comes back.
    ExitReturn,
    /// Drives from the first aisle into the unmapped last aisle.
    Extension,
    /// One pass confined to the last aisle.
    FarAisle,
}

pub struct ScenarioSetup {
    pub scene: Scene,
    pub trajectory: TrajectorySpec,
    pub config: RunConfig,
}

fn spec(points: &[(f64, f64)], kind: TrajectoryKind) -> TrajectorySpec {
    TrajectorySpec {
        waypoints: points.iter().map(|&(x, y)| Pose2::new(x, y, 0.0)).collect(),
        speed: 2.0,
        frame_rate: 5.0,
        kind,
        corner_radius: 2.5,
    }
}

pub fn scenario(kind: Scenario, seed: u64) -> ScenarioSetup {
    let scene = generate_lot(LOT_ROWS, LOT_SLOTS, seed);
    let row_len = scene.extent.max[0] - LOT_MARGIN;
    let first = aisle_center_y(0);
    let last = aisle_center_y(LOT_ROWS - 1);
    let (east, west) = (row_len + 2.0, -2.0);
    let mut config = RunConfig::new("scene.json", "trajectory.json");
    config.pipeline.seed = seed;
    let trajectory = match kind {
        Scenario::Loop => {
            config.pipeline.noise.bias_rot = 0.002;
            spec(
                &[(west, first), (east, first), (east, last), (west, last)],
                TrajectoryKind::Loop,
            )
        }
        Scenario::Aisle => spec(&[(west, first), (east, first)], TrajectoryKind::OutAndBack),
        Scenario::ExitReturn => spec(
            &[(10.0, first), (west, first), (west, last), (20.0, last)],
            TrajectoryKind::OutAndBack,
        ),
        Scenario::Extension => spec(
            &[
                (10.0, first),
                (west, first),
                (west, last),
                (row_len - 2.0, last),
            ],
            TrajectoryKind::Extension,
        ),
        Scenario::FarAisle => {
            config.update_map = false;
            spec(
                &[(3.0, last), (row_len - 2.0, last)],
                TrajectoryKind::Extension,
            )
        }
    };
    ScenarioSetup {
        scene,
        trajectory,
        config,
    }
}

/// Writes `scene.json`, `trajectory.json` and `config.json` into `dir`.
pub fn write_scenario(kind: Scenario, seed: u64, dir: &Path) -> Result<(), CliError> {
    let s = scenario(kind, seed);
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    write("scene.json", s.scene.to_json())?;
    write(
        "trajectory.json",
        TrajectoryFile::new(s.trajectory).to_json(),
    )?;
    write("config.json", s.config.to_json())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsmap::sim::{sample_trajectory, TrajectoryPath};

    #[test]
    fn loop_is_about_120_m() {
        let s = scenario(Scenario::Loop, DEFAULT_SEED);
        let len = TrajectoryPath::from_spec(&s.trajectory).unwrap().length();
        assert!((115.0..125.0).contains(&len), "{len}");
        assert_eq!(s.config.pipeline.noise.bias_rot, 0.002);
    }

    #[test]
    fn every_scenario_samples() {
        for k in [
            Scenario::Loop,
            Scenario::Aisle,
            Scenario::ExitReturn,
            Scenario::Extension,
            Scenario::FarAisle,
        ] {
            let s = scenario(k, 1);
            assert!(sample_trajectory(&s.trajectory).unwrap().len() > 10);
            s.scene.validate().unwrap();
        }
    }
}
