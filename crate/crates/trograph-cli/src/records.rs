//! File formats shared by the commands: pose and contact guidance inputs,
//! explicit link-pose lists, IK target lists, grasp outputs, and
//! closed-loop scenarios. All JSON documents carry a `schema_version`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use trograph::pointcloud::{load_xyz, load_xyzb, PointCloud};
use trograph::se3::{exp_map, Pose6, TransformMatrix};
use trograph::{Error, Result};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Loads a point cloud, picking the format from the file extension
/// (`.xyz` text, `.xyzb` binary).
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => load_xyz(path),
        Some("xyzb") => load_xyzb(path),
        other => Err(Error::invalid(format!(
            "point cloud {} must end in .xyz or .xyzb, got {:?}",
            path.display(),
            other.unwrap_or("")
        ))),
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn check_version(version: u32, what: &str) -> Result<()> {
    if version != RECORD_SCHEMA_VERSION {
        return Err(Error::Structure(format!(
            "{what} schema version {version} is not {RECORD_SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

/// A palm pose target for guided sampling; only the rotation block of the
/// pose vector steers, matching the pose-guidance objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseGuideFile {
    pub schema_version: u32,
    pub pose: [f64; 6],
}

impl PoseGuideFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: PoseGuideFile = read_json(path)?;
        check_version(file.schema_version, "pose guide")?;
        Ok(file)
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        Ok(exp_map(&Pose6::from_slice(&self.pose))?.rotation)
    }
}

/// A contact-guidance request: either a cloud index to grow a region
/// around, or an explicit region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactGuideFile {
    pub schema_version: u32,
    /// Grow the region around this object-cloud point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_index: Option<usize>,
    /// Explicit contact points (object frame), used when `center_index`
    /// is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heat: Option<Vec<f64>>,
    /// Palm frame for the approach, as a pose vector; only its rotation
    /// is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palm_pose: Option<[f64; 6]>,
}

impl ContactGuideFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: ContactGuideFile = read_json(path)?;
        check_version(file.schema_version, "contact guide")?;
        if file.center_index.is_none() && (file.points.is_none() || file.palm_pose.is_none()) {
            return Err(Error::validation(
                "contact guide needs either center_index or points with palm_pose",
            ));
        }
        Ok(file)
    }

    /// Resolves the request to a concrete region.
    pub fn region(
        &self,
        cloud: &PointCloud,
        neighbours: usize,
        heat_sigma: f64,
    ) -> Result<(Vec<Vector3<f64>>, Vec<f64>, Matrix3<f64>)> {
        if let Some(center) = self.center_index {
            return trograph::diffusion::contact_region_from_cloud(
                cloud,
                center,
                neighbours.min(cloud.points.len()),
                heat_sigma,
            );
        }
        let points: Vec<Vector3<f64>> = self
            .points
            .as_ref()
            .expect("validated on load")
            .iter()
            .map(|p| Vector3::new(p[0], p[1], p[2]))
            .collect();
        let heat = match &self.heat {
            Some(h) => h.clone(),
            None => vec![1.0; points.len()],
        };
        let palm = self.palm_pose.expect("validated on load");
        let r_cont = exp_map(&Pose6::from_slice(&palm))?.rotation;
        Ok((points, heat, r_cont))
    }
}

/// Explicit per-link pose vectors, document link order, for build-graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosesFile {
    pub schema_version: u32,
    pub poses: Vec<[f64; 6]>,
}

impl PosesFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: PosesFile = read_json(path)?;
        check_version(file.schema_version, "link poses")?;
        Ok(file)
    }

    pub fn transforms(&self) -> Result<Vec<TransformMatrix>> {
        self.poses.iter().map(|p| exp_map(&Pose6::from_slice(p))).collect()
    }
}

/// One named link target for the IK command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IkTarget {
    pub link: String,
    pub pose: [f64; 6],
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IkTargetsFile {
    pub schema_version: u32,
    pub targets: Vec<IkTarget>,
    /// Optional starting base pose vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_init: Option<[f64; 6]>,
}

impl IkTargetsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: IkTargetsFile = read_json(path)?;
        check_version(file.schema_version, "ik targets")?;
        if file.targets.is_empty() {
            return Err(Error::validation("ik targets file lists no targets"));
        }
        Ok(file)
    }
}

/// IK command output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IkReport {
    pub schema_version: u32,
    pub q: Vec<f64>,
    pub base_rotation: [f64; 9],
    pub base_translation: [f64; 3],
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn rotation_to_row_major(r: &Matrix3<f64>) -> [f64; 9] {
    [
        r[(0, 0)], r[(0, 1)], r[(0, 2)],
        r[(1, 0)], r[(1, 1)], r[(1, 2)],
        r[(2, 0)], r[(2, 1)], r[(2, 2)],
    ]
}

/// One synthesized grasp in a sample report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraspOut {
    /// Pose vectors of the real links, object frame.
    pub link_poses: Vec<[f64; 6]>,
    /// Joint values recovered by IK.
    pub q: Vec<f64>,
    pub ik_residual: f64,
    pub ik_converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleReport {
    pub schema_version: u32,
    pub hand: String,
    pub grasps: Vec<GraspOut>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub schema_version: u32,
    pub link_similarity: f64,
    pub joint_similarity: f64,
}

/// Object motion model for the closed-loop harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Trajectory {
    /// Straight-line drift at a fixed velocity, meters per second.
    ConstantVelocity { velocity: [f64; 3] },
    /// Independent per-tick pose jitter, up to the given translation
    /// (meters) and rotation (radians) magnitudes.
    RandomPerturbation { trans_bound: f64, rot_bound: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub trajectory: Trajectory,
    /// Seconds between ticks.
    pub interval: f64,
    pub steps: usize,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: ScenarioFile = read_json(path)?;
        check_version(file.schema_version, "scenario")?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0) || !self.interval.is_finite() {
            return Err(Error::invalid(format!(
                "scenario interval must be positive, got {}",
                self.interval
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("scenario needs at least one step"));
        }
        match &self.trajectory {
            Trajectory::ConstantVelocity { velocity } => {
                if velocity.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("scenario velocity must be finite"));
                }
            }
            Trajectory::RandomPerturbation { trans_bound, rot_bound } => {
                if !(*trans_bound >= 0.0 && trans_bound.is_finite())
                    || !(*rot_bound >= 0.0 && rot_bound.is_finite())
                {
                    return Err(Error::invalid("scenario perturbation bounds must be >= 0"));
                }
            }
        }
        Ok(())
    }

    /// The published default: 5 cm/s drift, 0.25 s ticks, 30 steps.
    pub fn default_constant_velocity() -> Self {
        ScenarioFile {
            schema_version: RECORD_SCHEMA_VERSION,
            trajectory: Trajectory::ConstantVelocity { velocity: [0.05, 0.0, 0.0] },
            interval: 0.25,
            steps: 30,
        }
    }
}
