//! `train`: fit the denoiser to a demo dataset and write a checkpoint
//! plus a loss-trace CSV.

use super::load_hand;
use crate::config::RunConfig;
use clap::Args;
use std::io::Write;
use std::path::{Path, PathBuf};
use trograph::denoiser::{load_checkpoint, save_checkpoint, train, DenoiserModel};
use trograph::graph::TroGraph;
use trograph::pointcloud::load_xyz;
use trograph::synthdata::{demo_graph, list_demo_files, DemoRecord, SynthHand};
use trograph::{Error, Result};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root written by `synth` (hands/, objects/, demos/).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Continue from an earlier checkpoint with saved optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Loss trace CSV path (defaults next to the checkpoint).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

/// Loads every demo in the dataset as a training graph.
pub fn load_dataset(root: &Path, config: &RunConfig) -> Result<(SynthHand, Vec<TroGraph>)> {
    let hands_dir = root.join("hands");
    let mut hand_dirs: Vec<PathBuf> = std::fs::read_dir(&hands_dir)
        .map_err(|_| {
            Error::validation(format!("dataset {} has no hands/ directory", root.display()))
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    hand_dirs.sort();
    if hand_dirs.len() != 1 {
        return Err(Error::validation(format!(
            "dataset must contain exactly one hand, found {}",
            hand_dirs.len()
        )));
    }
    let hand = load_hand(&hand_dirs[0])?;

    let demo_files = list_demo_files(root)?;
    if demo_files.is_empty() {
        return Err(Error::validation(format!(
            "dataset {} contains no demos",
            root.display()
        )));
    }
    let mut graphs = Vec::with_capacity(demo_files.len());
    for path in &demo_files {
        let record = DemoRecord::load(path)?;
        let object = load_xyz(&root.join("objects").join(format!("{}.xyz", record.object)))?;
        let base = record.base()?;
        graphs.push(demo_graph(
            &hand,
            &object,
            &record.q,
            &base,
            config.graph.patch_count,
            config.graph.l_pad,
            config.graph.feature_seed,
        )?);
    }
    Ok((hand, graphs))
}

pub fn write_loss_csv(path: &Path, losses: &[f64], lrs: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss,lr\n");
    for (i, (loss, lr)) in losses.iter().zip(lrs).enumerate() {
        out.push_str(&format!("{},{loss},{lr}\n", i + 1));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn run(args: &TrainArgs, config: &RunConfig, seed: u64) -> Result<bool> {
    let (_, dataset) = load_dataset(&args.dataset, config)?;
    let schedule = config.schedule_for()?;

    let mut train_config = config.train.clone();
    train_config.seed = seed;

    let (mut model, resume_state) = match &args.resume {
        Some(path) => {
            let (model, saved) = load_checkpoint(path)?;
            let Some((saved_config, state)) = saved else {
                return Err(Error::validation(format!(
                    "checkpoint {} carries no optimizer state to resume from",
                    path.display()
                )));
            };
            // The saved per-step hyperparameters govern the continuation;
            // switching them mid-run would make the resumed trajectory
            // diverge from the one the original run would have taken. Only
            // the epoch target comes from the active config, so a finished
            // run can be extended.
            let requested_epochs = train_config.epochs;
            let mut continued = saved_config;
            continued.epochs = requested_epochs;
            if continued != train_config {
                eprintln!(
                    "note: resuming with the checkpoint's hyperparameters; the active train \
                     section differs and only its epoch target ({requested_epochs}) is used"
                );
            }
            train_config = continued;
            (model, Some(state))
        }
        None => (DenoiserModel::init(config.model_config()?, seed)?, None),
    };

    let outcome = train(&mut model, &dataset, &schedule, &train_config, resume_state)?;

    save_checkpoint(&args.out_checkpoint, &model, Some((&train_config, &outcome.state)))?;
    let csv_path = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.out_checkpoint.with_extension("loss.csv"));
    write_loss_csv(&csv_path, &outcome.loss_trace, &outcome.lr_trace)?;

    if outcome.diverged {
        eprintln!(
            "training diverged after {} steps; checkpoint and trace preserved",
            outcome.loss_trace.len()
        );
    } else if outcome.loss_trace.is_empty() {
        eprintln!(
            "checkpoint already covers the configured epochs; nothing left to train (copied to {})",
            args.out_checkpoint.display()
        );
    } else {
        eprintln!(
            "trained {} steps; final loss {:.6}; checkpoint at {}",
            outcome.loss_trace.len(),
            outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
            args.out_checkpoint.display()
        );
    }
    Ok(outcome.diverged)
}
