use std::path::PathBuf;

use anyhow::{ensure, Result};
use clap::{Parser, Subcommand};

use sparsect::blocks::{DEFAULT_BLOCK_SIZE, DEFAULT_MARGIN};
use sparsect::manifest::SampleMode;
use sparsect::WindowSpec;
use sparsect_cli::{
    cmd_baseline, cmd_check, cmd_extract, cmd_phantom, cmd_score, cmd_simulate, cmd_split, parse_geometries,
    parse_views, ExtractConfig, PhantomConfig, ScoreConfig, SimulateConfig, SplitFilter,
};

#[derive(Parser)]
#[command(name = "sparsect", version, about = "Sparse-view CT simulation and dataset toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an ellipsoid phantom volume (HU).
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// JSON list of ellipsoids; defaults to a seeded chest-like phantom.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// In-plane size in voxels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 32)]
        slices: usize,
        /// Voxel spacing in mm as `SX,SY,SZ`.
        #[arg(long, default_value = "1,1,1")]
        spacing: String,
        #[arg(long, default_value_t = 2)]
        supersample: usize,
    },
    /// Project, reconstruct, window and store full/sparse/target volumes.
    Simulate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        subject: String,
        /// Comma-separated beam geometries.
        #[arg(long, default_value = "parallel")]
        geometry: String,
        #[arg(long, default_value = "32,64,128")]
        views: String,
        /// HU window as `WIDTHxLEVEL`.
        #[arg(long, default_value = "2048x0")]
        window: WindowSpec,
        /// Dataset root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign subjects to train/validation/test splits.
    Split {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cut training samples (slices, stacks, blocks or patches).
    Extract {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        mode: SampleMode,
        #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
        block_size: usize,
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        margin: usize,
    },
    /// Write reference predictions: scale 0 predicts no artifact, 1 the exact one.
    Baseline {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        mode: SampleMode,
        #[arg(long, default_value_t = 0.0)]
        scale: f32,
        /// train, validation, test or all.
        #[arg(long, default_value = "all")]
        split: SplitFilter,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correct sparse data with predictions and tabulate MSE/SSIM.
    Score {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        mode: SampleMode,
        #[arg(long)]
        predictions: PathBuf,
        /// train, validation, test or all.
        #[arg(long, default_value = "test")]
        split: SplitFilter,
        /// Output table (tab-separated); a `.json` sibling is written too.
        #[arg(long)]
        out: PathBuf,
        /// Directory for central-slice graymap exports.
        #[arg(long)]
        export_images: Option<PathBuf>,
    },
    /// Verify that every manifest entry exists with the recorded shape.
    Check {
        #[arg(long)]
        root: PathBuf,
    },
}

fn parse_spacing(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
    ensure!(parts.len() == 3, "spacing needs three values, got '{s}'");
    ensure!(parts.iter().all(|&v| v > 0.0), "spacing must be positive");
    Ok([parts[0], parts[1], parts[2]])
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Phantom {
            out,
            spec,
            seed,
            size,
            slices,
            spacing,
            supersample,
        } => {
            cmd_phantom(&PhantomConfig {
                out,
                shape: [size, size, slices],
                spacing: parse_spacing(&spacing)?,
                seed,
                spec,
                supersample,
            })?;
        }
        Command::Simulate {
            input,
            subject,
            geometry,
            views,
            window,
            out,
        } => {
            let summary = cmd_simulate(&SimulateConfig {
                input,
                subject,
                geometries: parse_geometries(&geometry)?,
                views: parse_views(&views)?,
                window,
                root: out,
            })?;
            println!("geometry\tviews\tmse\tssim");
            for (kind, rows) in summary {
                for (v, s) in rows {
                    println!("{kind}\t{v}\t{:.6e}\t{:.6}", s.mse, s.ssim);
                }
            }
        }
        Command::Split { root, seed } => {
            for (id, split) in cmd_split(&root, seed)? {
                println!("{id}\t{split}");
            }
        }
        Command::Extract {
            root,
            mode,
            block_size,
            margin,
        } => {
            let n = cmd_extract(&ExtractConfig {
                root,
                mode,
                block_size,
                margin,
            })?;
            println!("{n} {mode} samples");
        }
        Command::Baseline {
            root,
            mode,
            scale,
            split,
            out,
        } => {
            let n = cmd_baseline(&root, mode, scale, split, &out)?;
            println!("{n} predictions written to {}", out.display());
        }
        Command::Score {
            root,
            mode,
            predictions,
            split,
            out,
            export_images,
        } => {
            let report = cmd_score(&ScoreConfig {
                root,
                mode,
                predictions,
                split,
                out,
                export_images,
            })?;
            print!("{}", report.mean.to_tsv());
        }
        Command::Check { root } => {
            println!("{} entries ok", cmd_check(&root)?);
        }
    }
    Ok(())
}
