use std::path::PathBuf;

use advlogo::gradcheck::{check_components, check_instance};
use advlogo::run::{
    ablate_to_dir, attack_to_dir, eval_to_dir, prompts_to_dir, zoo_list, EvalRequest, RunConfig,
    SceneConfig,
};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(author, version, about = "Diffusion-guided adversarial logo patches", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise a patch against the surrogate detector.
    Attack {
        /// Run config JSON; missing fields take their defaults.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Number of seeded instances.
        #[arg(long, default_value_t = 5)]
        instances: u64,
        /// Coordinates sampled per parameter block.
        #[arg(long, default_value_t = 16)]
        coords: usize,
    },
    /// Run the null, embedding, latent and hybrid variants.
    Ablate {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Evaluate a patch image on the detector zoo.
    Eval {
        /// Patch image (PPM or PNG).
        #[arg(long, value_name = "FILE")]
        patch: PathBuf,
        #[arg(long, default_value_t = 0)]
        zoo_seed: u64,
        #[arg(long, default_value_t = 1)]
        scenes_seed: u64,
        #[arg(long, default_value_t = 288)]
        scenes: usize,
        #[arg(long, default_value_t = 0.2)]
        test_scale: f64,
        #[arg(long, default_value = "det0")]
        surrogate: String,
        #[arg(long, value_name = "DIR", default_value = "eval_out")]
        out_dir: PathBuf,
    },
    /// Attack once per prompt and compare the resulting patches.
    Prompts {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "prompts_out")]
        out_dir: PathBuf,
    },
    /// Print the detector zoo, one JSON object per line.
    ZooList {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Attack { config, out_dir } => {
            let cfg = load_config(&config)?;
            let out = attack_to_dir(&cfg, &out_dir)?;
            let first = out.state.loss_history.first().copied().unwrap_or(0.0);
            let last = out.state.loss_history.last().copied().unwrap_or(0.0);
            println!(
                "{} iterations, loss {first:.6} -> {last:.6}, outputs in {}",
                out.state.iter,
                out_dir.display()
            );
            for line in &out.log {
                eprintln!("{line}");
            }
        }
        Command::Gradcheck { instances, coords } => {
            println!("seed,freq_rel,embedding_rel,paper_exact_freq_rel,paper_exact_embedding_rel,component_max_rel");
            for seed in 0..instances {
                let r = check_instance(seed, coords, 1e-3)?;
                let c = check_components(seed, coords, 1e-5)?;
                println!(
                    "{seed},{:.3e},{:.3e},{:.3e},{:.3e},{:.3e}",
                    r.freq_rel_error,
                    r.embedding_rel_error,
                    r.paper_exact_freq_rel_error,
                    r.paper_exact_embedding_rel_error,
                    c.max()
                );
            }
        }
        Command::Ablate { config, out_dir } => {
            let cfg = load_config(&config)?;
            for row in ablate_to_dir(&cfg, &out_dir)? {
                println!(
                    "{:<9} loss {:.6} surrogate mAP {:.4} black-box {:.4}",
                    row.mode.name(),
                    row.final_loss,
                    row.surrogate_map,
                    row.blackbox_avg
                );
            }
        }
        Command::Eval {
            patch,
            zoo_seed,
            scenes_seed,
            scenes,
            test_scale,
            surrogate,
            out_dir,
        } => {
            let req = EvalRequest {
                patch: patch.display().to_string(),
                zoo_seed,
                scenes: SceneConfig {
                    seed: scenes_seed,
                    count: scenes,
                    ..SceneConfig::default()
                },
                test_scale,
                surrogate,
            };
            let report = eval_to_dir(&req, &out_dir)?;
            for (id, map) in &report.maps {
                println!("{id}\t{map:.4}");
            }
            println!("black-box avg\t{:.4}", report.blackbox_avg);
        }
        Command::Prompts { config, out_dir } => {
            let cfg = load_config(&config)?;
            for row in prompts_to_dir(&cfg, &out_dir)? {
                println!("{:<20} black-box {:.4}", row.prompt, row.blackbox_avg);
            }
        }
        Command::ZooList { seed } => {
            for spec in zoo_list(seed) {
                println!("{}", serde_json::to_string(&spec)?);
            }
        }
    }
    Ok(())
}
