//! `ik`: solve joint values and base pose for named link-pose targets.

use super::load_hand;
use crate::records::{rotation_to_row_major, write_json, IkReport, IkTargetsFile};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use trograph::iksolver::{solve_ik, IkProblem};
use trograph::se3::{exp_map, Pose6};
use trograph::{Error, Result};

#[derive(Debug, Args)]
pub struct IkArgs {
    /// Hand directory.
    #[arg(long)]
    pub hand: PathBuf,
    /// Target file naming links and pose vectors.
    #[arg(long)]
    pub targets: PathBuf,
    /// Output report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &IkArgs, seed: u64) -> Result<()> {
    let hand = load_hand(&args.hand)?;
    let file = IkTargetsFile::load(&args.targets)?;

    let link_count = hand.hand.link_count();
    let mut targets = vec![Pose6::zero(); link_count];
    let mut mask = vec![false; link_count];
    let mut weights = vec![1.0; link_count];
    for target in &file.targets {
        let index = hand.hand.link_index(&target.link).ok_or_else(|| {
            Error::validation(format!("target link {:?} not present in the hand", target.link))
        })?;
        if mask[index] {
            return Err(Error::validation(format!(
                "link {:?} is targeted more than once",
                target.link
            )));
        }
        targets[index] = Pose6::from_slice(&target.pose);
        mask[index] = true;
        weights[index] = target.weight;
    }

    let mut problem = IkProblem::new(hand.hand.clone(), targets, mask)?;
    problem.weights = weights;
    if let Some(base) = file.base_init {
        problem.base_init = exp_map(&Pose6::from_slice(&base))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solution = solve_ik(&problem, None, &mut rng)?;

    let report = IkReport {
        schema_version: 1,
        q: solution.q,
        base_rotation: rotation_to_row_major(&solution.base.rotation),
        base_translation: [
            solution.base.translation.x,
            solution.base.translation.y,
            solution.base.translation.z,
        ],
        residual: solution.residual,
        iterations: solution.iterations,
        converged: solution.converged,
    };
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
