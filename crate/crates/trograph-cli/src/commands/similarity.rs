//! `similarity`: score two hands' embodiment overlap.

use super::load_hand;
use crate::records::{write_json, SimilarityReport};
use clap::Args;
use std::path::PathBuf;
use trograph::kinematics::embodiment_similarity;
use trograph::Result;

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    /// First hand directory.
    #[arg(long)]
    pub hand_a: PathBuf,
    /// Second hand directory.
    #[arg(long)]
    pub hand_b: PathBuf,
    /// Output report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &SimilarityArgs) -> Result<()> {
    let a = load_hand(&args.hand_a)?;
    let b = load_hand(&args.hand_b)?;
    let (link_similarity, joint_similarity) =
        embodiment_similarity(&a.hand, &a.clouds, &b.hand, &b.clouds)?;
    let report = SimilarityReport { schema_version: 1, link_similarity, joint_similarity };
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
