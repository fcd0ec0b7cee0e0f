//! `sample`: draw grasps from a trained checkpoint or the closed-form
//! oracle, optionally steered by a pose or contact target.

use super::{build_graph_from, ik_from_graph, load_hand, palm_row, real_link_poses};
use crate::config::RunConfig;
use crate::records::{
    load_cloud, write_json, ContactGuideFile, GraspOut, PoseGuideFile, SampleReport,
};
use clap::Args;
use std::path::PathBuf;
use std::time::Instant;
use trograph::denoiser::{load_checkpoint, DenoiserModel, OracleDenoiser};
use trograph::diffusion::{sample_batch, DiffusionSchedule, GuidanceKind, GuidanceSpec, NoisePredictor};
use trograph::graph::{LinkPoseSource, TroGraph};
use trograph::synthdata::{DemoRecord, SynthHand};
use trograph::{Error, Result};

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Hand directory.
    #[arg(long)]
    pub hand: PathBuf,
    /// Object point cloud (.xyz or .xyzb).
    #[arg(long)]
    pub object: PathBuf,
    /// Trained denoiser checkpoint.
    #[arg(long, conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Grasp record to drive the closed-form oracle denoiser instead of a
    /// model (forces the deterministic sampler).
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Palm pose target file for guided sampling.
    #[arg(long, conflicts_with = "guide_contact")]
    pub guide_pose: Option<PathBuf>,
    /// Contact region file for guided sampling.
    #[arg(long)]
    pub guide_contact: Option<PathBuf>,
    /// Conditioning step; snapped to the DDIM grid when off it.
    #[arg(long)]
    pub t_star: Option<usize>,
    /// Number of grasps to draw.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Output report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolves a requested conditioning step against the DDIM grid, with a
/// notice when snapping moved it.
pub fn snap_t_star(requested: usize, schedule: &DiffusionSchedule) -> usize {
    let snapped = schedule.nearest_grid_step(requested);
    if snapped != requested {
        eprintln!("note: conditioning step {requested} is off the ddim grid; snapped to {snapped}");
    }
    snapped
}

/// Builds the guidance spec from the command line plus config defaults.
pub fn guidance_from_args(
    args: &SampleArgs,
    config: &RunConfig,
    schedule: &DiffusionSchedule,
    hand: &SynthHand,
    object: &trograph::pointcloud::PointCloud,
) -> Result<Option<GuidanceSpec>> {
    let kind = if let Some(path) = &args.guide_pose {
        let file = PoseGuideFile::load(path)?;
        GuidanceKind::Pose { r_init: file.rotation()? }
    } else if let Some(path) = &args.guide_contact {
        let file = ContactGuideFile::load(path)?;
        let (points, heat, r_cont) = file.region(
            object,
            config.guidance.contact_neighbours,
            config.guidance.contact_heat_sigma,
        )?;
        GuidanceKind::Contact { points, heat, r_cont }
    } else {
        GuidanceKind::None
    };

    let t_star = match args.t_star {
        Some(requested) => Some(snap_t_star(requested, schedule)),
        None if !matches!(kind, GuidanceKind::None) => Some(config.default_t_star(schedule)),
        None => None,
    };

    if matches!(kind, GuidanceKind::None) && t_star.is_none() {
        return Ok(None);
    }
    let strength_max = if config.guidance.steer { config.guidance.strength_max } else { 0.0 };
    Ok(Some(GuidanceSpec { kind, t_star, strength_max, palm_row: palm_row(hand)? }))
}

/// Joint values at rest: zero clamped into the limit box.
fn rest_q(hand: &SynthHand) -> Vec<f64> {
    let (lo, hi) = hand.hand.limit_bounds();
    lo.iter().zip(&hi).map(|(&l, &h)| 0.0f64.clamp(l, h)).collect()
}

enum Denoiser {
    Model(Box<DenoiserModel>),
    Oracle(Box<OracleDenoiser>),
}

impl Denoiser {
    fn as_predictor(&self) -> &(dyn NoisePredictor + Sync) {
        match self {
            Denoiser::Model(m) => m.as_ref(),
            Denoiser::Oracle(o) => o.as_ref(),
        }
    }
}

pub fn run(args: &SampleArgs, config: &RunConfig, seed: u64) -> Result<()> {
    if args.n == 0 {
        return Err(Error::validation("--n must be at least 1"));
    }
    if args.checkpoint.is_none() && args.oracle.is_none() {
        return Err(Error::validation("one of --checkpoint or --oracle is required"));
    }
    let hand = load_hand(&args.hand)?;
    let object = load_cloud(&args.object)?;
    let mut schedule = config.schedule_for()?;

    let (denoiser, template): (Denoiser, TroGraph) = if let Some(oracle_path) = &args.oracle {
        // The oracle replays one clean grasp; stochastic mixing would only
        // blur an exact answer, so lambda is pinned to zero.
        if config.schedule.lambda != 0.0 {
            eprintln!("note: oracle mode forces lambda = 0 (config had {})", config.schedule.lambda);
            schedule = schedule.with_lambda(0.0)?;
        }
        let record = DemoRecord::load(oracle_path)?;
        let base = record.base()?;
        let clean = build_graph_from(
            config,
            &hand,
            &object,
            LinkPoseSource::Joints { q: &record.q, base },
        )?;
        let oracle = OracleDenoiser::new(&clean, schedule.clone());
        (Denoiser::Oracle(Box::new(oracle)), clean)
    } else {
        let path = args.checkpoint.as_ref().expect("checked above");
        let (model, _) = load_checkpoint(path)?;
        let shape = model.config();
        if shape.l_pad != config.graph.l_pad || shape.p != config.graph.patch_count {
            return Err(Error::validation(format!(
                "checkpoint expects l_pad {} and {} patches but the config builds {} and {}",
                shape.l_pad, shape.p, config.graph.l_pad, config.graph.patch_count
            )));
        }
        if schedule.t_count() > shape.t_max {
            return Err(Error::validation(format!(
                "schedule has {} steps but the checkpoint was built for at most {}",
                schedule.t_count(),
                shape.t_max
            )));
        }
        let q0 = rest_q(&hand);
        let template = build_graph_from(
            config,
            &hand,
            &object,
            LinkPoseSource::Joints { q: &q0, base: trograph::se3::TransformMatrix::identity() },
        )?;
        (Denoiser::Model(Box::new(model)), template)
    };

    let guidance = guidance_from_args(args, config, &schedule, &hand, &object)?;

    let started = Instant::now();
    let results = sample_batch(
        &template,
        &schedule,
        denoiser.as_predictor(),
        guidance.as_ref(),
        seed,
        args.n,
    );
    let elapsed = started.elapsed().as_secs_f64();

    let mut grasps = Vec::with_capacity(args.n);
    for (index, result) in results.into_iter().enumerate() {
        let (graph, _) = result
            .map_err(|e| Error::Numerical(format!("sampling chain {index} failed: {e}")))?;
        let ik = ik_from_graph(&hand, &graph, seed.wrapping_add(index as u64))?;
        grasps.push(GraspOut {
            link_poses: real_link_poses(&graph),
            q: ik.q,
            ik_residual: ik.residual,
            ik_converged: ik.converged,
        });
    }
    eprintln!(
        "sampled {} grasps in {:.3} s ({:.3} s per grasp)",
        args.n,
        elapsed,
        elapsed / args.n as f64
    );

    let report = SampleReport { schema_version: 1, hand: hand.hand.name.clone(), grasps };
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
