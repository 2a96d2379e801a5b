mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use blockfield::eval::summary_tsv;
use blockfield::scenegen::Layout;
use blockfield::train::DecoderPolicy;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_s_aabb, FusionMode, Overrides, RunConfig};
use crate::stages::Run;

#[derive(Parser)]
#[command(name = "blockfield", version, about = "Coarse-to-block neural radiance fields with fused rendering")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run config; missing entries take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training and rendering.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Existing dataset directory to use instead of `OUT/data`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Number of blocks.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Box growth factor, one value or `x,y,z`.
    #[arg(long, global = true, value_parser = parse_s_aabb)]
    s_aabb: Option<[f64; 3]>,
    #[arg(long, global = true, value_enum)]
    fusion: Option<FusionMode>,
    /// Inverse-distance exponent for `idw` fusion.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Block decoder policy: train, finetune or freeze.
    #[arg(long, global = true, value_parser = parse_policy)]
    decoder_policy: Option<DecoderPolicy>,
    /// log2 of the hash table size per level.
    #[arg(long, global = true)]
    hash_log2: Option<u32>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Render the synthetic desk scene into a dataset.
    GenData {
        /// orbit or two-cluster.
        #[arg(long, value_parser = parse_layout)]
        layout: Option<Layout>,
        #[arg(long)]
        n_cameras: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        resolution: Option<u32>,
    },
    /// Train the coarse global model.
    TrainCoarse,
    /// Cluster cameras into blocks and write `blocks.json`.
    Split,
    /// Train one model per block.
    TrainBlocks,
    /// Render views with the coarse model and every block.
    Render {
        /// Dataset indices to render; validation views by default.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
    },
    /// Fuse the block renders of every rendered view.
    Fuse {
        /// Also write a per-pixel block selection map (global mode).
        #[arg(long)]
        selection: bool,
    },
    /// Score renders and fused images; print and write the metric tables.
    Eval {
        /// Print JSON instead of the tab-separated table.
        #[arg(long)]
        json: bool,
    },
    /// Run every stage, skipping those whose outputs are current.
    Pipeline,
}

fn parse_policy(s: &str) -> Result<DecoderPolicy, String> {
    s.parse().map_err(|e: blockfield::Error| e.to_string())
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    s.parse().map_err(|e: blockfield::Error| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = Overrides {
        seed: g.seed,
        out: g.out,
        data: g.data,
        k: g.k,
        s_aabb: g.s_aabb,
        fusion: g.fusion,
        gamma: g.gamma,
        decoder_policy: g.decoder_policy,
        hash_log2: g.hash_log2,
        iterations: g.iterations,
        ..Overrides::default()
    };
    if let Command::GenData { layout, n_cameras, resolution } = &cli.command {
        overrides.layout = *layout;
        overrides.n_cameras = *n_cameras;
        overrides.resolution = *resolution;
    }
    cfg.apply(&overrides);
    cfg.validate()?;
    let run = Run { cfg, jobs: g.jobs.max(1) };
    match cli.command {
        Command::Config => print!("{}", run.cfg.to_toml()?),
        Command::GenData { .. } => run.gen_data()?,
        Command::TrainCoarse => run.train_coarse()?,
        Command::Split => run.split()?,
        Command::TrainBlocks => run.train_blocks()?,
        Command::Render { views } => run.render(views.as_deref())?,
        Command::Fuse { selection } => run.fuse(&[run.cfg.fusion.mode], selection)?,
        Command::Eval { json } => {
            let reports = run.eval()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                print!("{}", stages::metrics_tsv(&reports));
            }
        }
        Command::Pipeline => print!("{}", summary_tsv(&run.pipeline()?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
