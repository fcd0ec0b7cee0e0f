//! `synth`: generate a hand (and optionally a demo dataset) on disk.

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::PathBuf;
use trograph::synthdata::{
    generate_hand, write_dataset, write_hand_dir, HandTemplate, ObjectShape, SynthSpec,
};
use trograph::{Error, Result};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Hand template: planar2f, tripod3f, or chain3.
    #[arg(long)]
    pub template: String,
    /// Uniform scale applied to the hand.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Number of objects to generate demos for (0 writes the hand only).
    #[arg(long, default_value_t = 4)]
    pub objects: usize,
    /// Demonstrations to attempt per object.
    #[arg(long, default_value_t = 4)]
    pub demos: usize,
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    schema_version: u32,
    hand: String,
    objects: Vec<String>,
    demos: usize,
    skipped: usize,
}

pub fn parse_template(name: &str) -> Result<HandTemplate> {
    match name {
        "planar2f" => Ok(HandTemplate::TwoFingerPlanar),
        "tripod3f" => Ok(HandTemplate::ThreeFingerSpatial),
        "chain3" => Ok(HandTemplate::ThreeLinkChain),
        other => Err(Error::invalid(format!(
            "unknown hand template {other:?}; expected planar2f, tripod3f, or chain3"
        ))),
    }
}

/// Object sizes drawn around the hand's fingertip span so most demos are
/// reachable; the tripod only has analytic sphere grasps.
fn object_mix(template: HandTemplate, span: f64, count: usize, seed: u64) -> Vec<ObjectShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f_b1_e3);
    (0..count)
        .map(|i| {
            let size = span * (0.38 + 0.14 * rng.gen::<f64>());
            match template {
                HandTemplate::ThreeFingerSpatial => ObjectShape::Sphere { radius: size },
                _ => match i % 3 {
                    0 => ObjectShape::Sphere { radius: size },
                    1 => ObjectShape::Box {
                        half_extents: [size, size * 1.2, size * 1.4],
                    },
                    _ => ObjectShape::Cylinder { radius: size, half_height: size * 1.5 },
                },
            }
        })
        .collect()
}

pub fn run(args: &SynthArgs, seed: u64) -> Result<()> {
    let template = parse_template(&args.template)?;
    let hand_only = args.objects == 0 || template == HandTemplate::ThreeLinkChain;
    if hand_only {
        let hand = generate_hand(template, args.scale)?;
        write_hand_dir(&args.out, &hand, template.name())?;
        let summary = SynthSummary {
            schema_version: 1,
            hand: template.name().into(),
            objects: Vec::new(),
            demos: 0,
            skipped: 0,
        };
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }

    let span = generate_hand(template, args.scale)?.fingertip_span()?;
    let spec = SynthSpec {
        template,
        scale: args.scale,
        objects: object_mix(template, span, args.objects, seed),
        demos_per_object: args.demos,
        seed,
    };
    let out = write_dataset(&args.out, &spec)?;
    let summary = SynthSummary {
        schema_version: 1,
        hand: out.hand,
        objects: out.objects,
        demos: out.demos,
        skipped: out.skipped,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
