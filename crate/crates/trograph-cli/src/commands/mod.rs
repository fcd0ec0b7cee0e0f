//! One module per subcommand plus the plumbing they share.

pub mod bench;
pub mod build_graph;
pub mod closed_loop;
pub mod ik;
pub mod sample;
pub mod similarity;
pub mod synth;
pub mod train;

use crate::config::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use trograph::graph::{
    build_link_nodes, GeomEncoderParams, GraphMeta, LinkPoseSource, TroGraph, GEOM_ENCODER_SEED,
};
use trograph::iksolver::{solve_ik, IkProblem, IkSolution};
use trograph::pointcloud::{object_patch_features, PointCloud};
use trograph::se3::{exp_map, Pose6};
use trograph::synthdata::{load_hand_dir, SynthHand};
use trograph::Result;

/// Loads a hand directory, warning on stderr when the metadata sidecar is
/// missing (guidance then falls back to the root link as the palm).
pub fn load_hand(dir: &Path) -> Result<SynthHand> {
    let hand = load_hand_dir(dir)?;
    if !dir.join("hand.json").exists() {
        eprintln!(
            "note: {} has no hand.json metadata; the root link {:?} will stand in for the palm",
            dir.display(),
            hand.palm_link
        );
    }
    Ok(hand)
}

/// Builds the full graph for a hand, object cloud, and link-pose source
/// using the sizes from the run config.
pub fn build_graph_from(
    config: &RunConfig,
    hand: &SynthHand,
    object: &PointCloud,
    source: LinkPoseSource<'_>,
) -> Result<TroGraph> {
    let objects = object_patch_features(object, config.graph.patch_count, config.graph.feature_seed)?;
    let encoder = GeomEncoderParams::seeded(GEOM_ENCODER_SEED);
    let links = build_link_nodes(&hand.hand, &hand.clouds, source, config.graph.l_pad, &encoder)?;
    let meta = GraphMeta {
        hand_name: hand.hand.name.clone(),
        p: config.graph.patch_count,
        l_pad: config.graph.l_pad,
        seed: config.graph.feature_seed,
    };
    TroGraph::new(objects, links, meta)
}

/// Pose vectors of the real (unmasked) links of a graph, document order.
pub fn real_link_poses(graph: &TroGraph) -> Vec<[f64; 6]> {
    graph
        .link_nodes
        .poses
        .iter()
        .zip(&graph.link_nodes.mask)
        .filter(|(_, &real)| real)
        .map(|(pose, _)| *pose)
        .collect()
}

/// Recovers joint values for a sampled graph by solving IK against every
/// real link pose.
pub fn ik_from_graph(hand: &SynthHand, graph: &TroGraph, seed: u64) -> Result<IkSolution> {
    let poses = real_link_poses(graph);
    let targets: Vec<Pose6> = poses.iter().map(|p| Pose6::from_slice(p)).collect();
    for t in &targets {
        // Surfaces a clear error before the solver sees a non-finite row.
        exp_map(t)?;
    }
    let mask = vec![true; targets.len()];
    let problem = IkProblem::new(hand.hand.clone(), targets, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    solve_ik(&problem, None, &mut rng)
}

/// Row index of the palm link inside the padded link set.
pub fn palm_row(hand: &SynthHand) -> Result<usize> {
    hand.hand.link_index(&hand.palm_link).ok_or_else(|| {
        trograph::Error::validation(format!(
            "palm link {:?} not present in the hand",
            hand.palm_link
        ))
    })
}
