//! Command-line entry point: training stages, sampling, image captioning,
//! invariant verification, and attention-mask inspection.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use haplo::cli;
use haplo::config::RunConfig;
use haplo::training::StageId;
use haplo::verify;
use haplo::HaploError;

#[derive(Parser)]
#[command(
    name = "haplo",
    about = "Unified multimodal transformer: text-conditioned image generation \
             and image captioning in one decoder stack"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training stage and write its checkpoint and metrics CSV.
    Train {
        /// warmup-pre, warmup-post, align-1, align-2, align-3, or unified.
        #[arg(long)]
        stage: String,
        /// key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to continue from instead of the previous stage's.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample an image (or clip) for a prompt and write PPM files.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Number of denoising steps.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption a PPM image; prints the decoded text.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Text fed before sampling begins.
        #[arg(long, default_value = "")]
        prompt: String,
        /// 0 decodes greedily.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long = "top-p", default_value_t = 1.0)]
        top_p: f64,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an invariant suite: masks, gradients, adaln, diffusion, cache, all.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Print the attention allow-grid for a type string over T/V/S/N.
    InspectMask {
        #[arg(long)]
        types: String,
    },
}

fn run(cmd: Cmd) -> Result<(), HaploError> {
    match cmd {
        Cmd::Train {
            stage,
            config,
            resume,
        } => {
            let stage = StageId::parse(&stage)?;
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let records = cli::cmd_train(stage, &cfg, resume.as_deref())?;
            let last = records.last().expect("stages run at least one step");
            println!(
                "stage {} finished: {} steps, final loss {:.6}",
                stage.name(),
                records.len(),
                last.loss_total
            );
            println!(
                "wrote {} and {}",
                cli::checkpoint_path(&cfg.out_dir, stage).display(),
                cli::metrics_path(&cfg.out_dir, stage).display()
            );
            Ok(())
        }
        Cmd::Sample {
            ckpt,
            prompt,
            steps,
            seed,
            out,
        } => {
            let written = cli::cmd_sample(&ckpt, &prompt, steps, seed, &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Cmd::Decode {
            ckpt,
            image,
            prompt,
            temperature,
            top_p,
            max_new,
            seed,
        } => {
            let text =
                cli::cmd_decode(&ckpt, &image, &prompt, temperature, top_p, max_new, seed)?;
            println!("{text}");
            Ok(())
        }
        Cmd::Verify { suite } => {
            let results = verify::run_suite(&suite)?;
            let mut failures = 0;
            for r in &results {
                println!("{}", r.line());
                if !r.pass {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(HaploError::OracleFailure(format!(
                    "{failures} of {} checks failed",
                    results.len()
                )));
            }
            Ok(())
        }
        Cmd::InspectMask { types } => {
            print!("{}", cli::cmd_inspect_mask(&types)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
