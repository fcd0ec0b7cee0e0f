//! `bench`: micro-benchmarks over self-contained fixtures.
//!
//! Every suite builds its own inputs from fixed seeds, so the report is
//! reproducible apart from the timing fields, which are the one place a
//! rerun is allowed to differ.

use super::{build_graph_from, ik_from_graph};
use crate::config::RunConfig;
use crate::records::write_json;
use clap::Args;
use serde::Serialize;
use std::path::PathBuf;
use std::time::Instant;
use trograph::denoiser::OracleDenoiser;
use trograph::diffusion::sample_batch;
use trograph::graph::LinkPoseSource;
use trograph::synthdata::{generate_hand, sample_object_cloud, HandTemplate, ObjectShape};
use trograph::{Error, Result};

const BENCH_SEED: u64 = 0x42_e9;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated suites: sampling, ik, graph, or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Timed repeats per benchmark.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Output JSON report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct BenchEntry {
    name: String,
    items: usize,
    repeats: usize,
    seconds: Vec<f64>,
    mean_seconds: f64,
    items_per_second: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    schema_version: u32,
    suites: Vec<String>,
    benches: Vec<BenchEntry>,
}

fn parse_suites(raw: &str) -> Result<Vec<String>> {
    let mut suites = Vec::new();
    for part in raw.split(',') {
        let name = part.trim();
        if name.is_empty() {
            continue;
        }
        match name {
            "all" => {
                for s in ["graph", "sampling", "ik"] {
                    if !suites.iter().any(|x| x == s) {
                        suites.push(s.to_string());
                    }
                }
            }
            "graph" | "sampling" | "ik" => {
                if !suites.iter().any(|x| x == name) {
                    suites.push(name.to_string());
                }
            }
            other => {
                return Err(Error::validation(format!(
                    "unknown bench suite '{other}' (expected sampling, ik, graph, or all)"
                )))
            }
        }
    }
    if suites.is_empty() {
        return Err(Error::validation("bench suite list is empty"));
    }
    Ok(suites)
}

fn timed<F: FnMut() -> Result<()>>(
    name: &str,
    items: usize,
    repeats: usize,
    mut body: F,
) -> Result<BenchEntry> {
    let mut seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let started = Instant::now();
        body()?;
        seconds.push(started.elapsed().as_secs_f64());
    }
    let mean = seconds.iter().sum::<f64>() / repeats.max(1) as f64;
    Ok(BenchEntry {
        name: name.to_string(),
        items,
        repeats,
        seconds,
        mean_seconds: mean,
        items_per_second: if mean > 0.0 { items as f64 / mean } else { 0.0 },
    })
}

pub fn run(args: &BenchArgs, config: &RunConfig) -> Result<()> {
    if args.repeats == 0 {
        return Err(Error::validation("bench needs at least one repeat"));
    }
    let suites = parse_suites(&args.suite)?;

    let hand = generate_hand(HandTemplate::TwoFingerPlanar, 1.0)?;
    let object = sample_object_cloud(&ObjectShape::Sphere { radius: 0.045 }, 384)?;
    let (lo, hi) = hand.hand.limit_bounds();
    let rest: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| 0.0f64.clamp(l, h)).collect();

    let mut benches = Vec::new();
    for suite in &suites {
        match suite.as_str() {
            "graph" => {
                let entry = timed("graph-build", 8, args.repeats, || {
                    for _ in 0..8 {
                        let graph = build_graph_from(
                            config,
                            &hand,
                            &object,
                            LinkPoseSource::Joints {
                                q: &rest,
                                base: trograph::se3::TransformMatrix::identity(),
                            },
                        )?;
                        graph.verify_edges()?;
                    }
                    Ok(())
                })?;
                benches.push(entry);
            }
            "sampling" => {
                let template = build_graph_from(
                    config,
                    &hand,
                    &object,
                    LinkPoseSource::Joints {
                        q: &rest,
                        base: trograph::se3::TransformMatrix::identity(),
                    },
                )?;
                let schedule = config.schedule_for()?.with_lambda(0.0)?;
                let oracle = OracleDenoiser::new(&template, schedule.clone());
                let entry = timed("oracle-ddim-chain", 4, args.repeats, || {
                    let results =
                        sample_batch(&template, &schedule, &oracle, None, BENCH_SEED, 4);
                    for r in results {
                        r?;
                    }
                    Ok(())
                })?;
                benches.push(entry);
            }
            "ik" => {
                let graph = build_graph_from(
                    config,
                    &hand,
                    &object,
                    LinkPoseSource::Joints {
                        q: &rest,
                        base: trograph::se3::TransformMatrix::identity(),
                    },
                )?;
                let entry = timed("ik-round-trip", 4, args.repeats, || {
                    for i in 0..4u64 {
                        ik_from_graph(&hand, &graph, BENCH_SEED.wrapping_add(i))?;
                    }
                    Ok(())
                })?;
                benches.push(entry);
            }
            _ => unreachable!("parse_suites only admits known names"),
        }
    }

    let report = BenchReport { schema_version: 1, suites, benches };
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
    }
    Ok(())
}
