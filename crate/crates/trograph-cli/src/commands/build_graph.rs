//! `build-graph`: assemble and store one graph from a hand, an object
//! cloud, and either a stored grasp or explicit link poses.

use super::{build_graph_from, load_hand};
use crate::config::RunConfig;
use crate::records::{load_cloud, PosesFile};
use clap::Args;
use std::path::PathBuf;
use trograph::graph::LinkPoseSource;
use trograph::synthdata::DemoRecord;
use trograph::{Error, Result};

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    /// Hand directory (hand.urdf plus links/*.xyz).
    #[arg(long)]
    pub hand: PathBuf,
    /// Object point cloud (.xyz or .xyzb).
    #[arg(long)]
    pub object: PathBuf,
    /// Grasp record supplying joint values and base pose.
    #[arg(long, conflicts_with = "poses")]
    pub grasp: Option<PathBuf>,
    /// Explicit per-link pose vectors.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Output graph JSON.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &BuildGraphArgs, config: &RunConfig) -> Result<()> {
    let hand = load_hand(&args.hand)?;
    let object = load_cloud(&args.object)?;

    let graph = match (&args.grasp, &args.poses) {
        (Some(grasp_path), None) => {
            let record = DemoRecord::load(grasp_path)?;
            let base = record.base()?;
            build_graph_from(
                config,
                &hand,
                &object,
                LinkPoseSource::Joints { q: &record.q, base },
            )?
        }
        (None, Some(poses_path)) => {
            let file = PosesFile::load(poses_path)?;
            let transforms = file.transforms()?;
            build_graph_from(config, &hand, &object, LinkPoseSource::Poses(&transforms))?
        }
        _ => {
            return Err(Error::validation(
                "exactly one of --grasp or --poses is required",
            ))
        }
    };

    graph.save(&args.out)?;
    eprintln!(
        "graph written to {} ({} links, {} patches)",
        args.out.display(),
        graph.link_nodes.real_count(),
        graph.object_nodes.patch_count()
    );
    Ok(())
}
