//! Command-line interface.

use std::path::PathBuf;

use bmmae_core::modality::Modality;
use bmmae_core::volume::Shape3;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{ConfigFile, RunConfig, Task};
use crate::error::{Error, Result};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(
    name = "bmmae",
    version,
    about = "Multimodal masked autoencoder for 3D MRI volumes"
)]
pub struct Cli {
    /// Log verbosity (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FinetuneTask {
    Seg,
    Cls,
    Surv,
}

impl From<FinetuneTask> for Task {
    fn from(t: FinetuneTask) -> Self {
        match t {
            FinetuneTask::Seg => Task::Seg,
            FinetuneTask::Cls => Task::Cls,
            FinetuneTask::Surv => Task::Surv,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort as a dataset directory.
    GenSynth {
        #[arg(long)]
        n: usize,
        /// `H,W,D` or a single edge length.
        #[arg(long, default_value = "32,32,32")]
        shape: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Patch size the shape must be divisible by.
        #[arg(long, default_value_t = 8)]
        patch: usize,
    },
    /// Pre-train the masked autoencoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Use the full-size model and schedule as defaults.
        #[arg(long)]
        paper_scale: bool,
        /// Resolve the configuration and write the run manifest only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Fine-tune a task head on a modality subset.
    Finetune {
        #[arg(long, value_enum)]
        task: FinetuneTask,
        /// Comma-separated modalities, e.g. `T1,FLAIR`.
        #[arg(long)]
        subset: String,
        /// `scratch` or a checkpoint directory.
        #[arg(long, default_value = "scratch")]
        init: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Reconstruct target modalities of one patient from source modalities.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        targets: String,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embedding similarity across all modality subsets.
    Consistency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

pub fn parse_shape(s: &str) -> Result<Shape3> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad shape `{s}`")))
        })
        .collect::<Result<_>>()?;
    match parts[..] {
        [e] => Ok((e, e, e)),
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::Config(format!(
            "shape `{s}` needs one or three numbers"
        ))),
    }
}

fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    Modality::parse_list(s).map_err(|e| Error::Config(e.to_string()))
}

/// Reads a config file and applies command-line overrides. A task named in
/// the file (as in a run manifest of another task) yields to the command.
fn read_config(
    config: &std::path::Path,
    task: Task,
    out: Option<PathBuf>,
    threads: Option<usize>,
) -> Result<ConfigFile> {
    let mut file = ConfigFile::read(config)?;
    if file.task.is_some_and(|t| t != task) {
        log::warn!(
            "config file names task {:?}; running {task:?}",
            file.task.unwrap()
        );
        file.task = None;
    }
    if out.is_some() {
        file.out = out;
    }
    if threads.is_some() {
        file.threads = threads;
    }
    Ok(file)
}

/// Executes one command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            n,
            shape,
            seed,
            out,
            patch,
        } => {
            pipeline::gen_synth(n, parse_shape(&shape)?, seed, patch, &out)?;
            println!("wrote {n} patients to {}", out.display());
        }
        Command::Pretrain {
            config,
            out,
            threads,
            paper_scale,
            dry_run,
        } => {
            let cfg: RunConfig = read_config(&config, Task::Pretrain, out, threads)?
                .resolve(Task::Pretrain, paper_scale)?;
            let dir = pipeline::out_dir(&cfg)?.to_path_buf();
            if dry_run {
                pipeline::dry_run(&cfg, &dir)?;
                println!("wrote run manifest to {}", dir.display());
                return Ok(());
            }
            let result = pipeline::run_pretrain(&cfg)?;
            println!(
                "pre-training finished: epoch-1 loss {:.5}, final loss {:.5}; outputs in {}",
                result.epoch_losses[0],
                result.epoch_losses.last().copied().unwrap_or(f64::NAN),
                dir.display()
            );
        }
        Command::Finetune {
            task,
            subset,
            init,
            config,
            out,
            threads,
            paper_scale,
        } => {
            let task = Task::from(task);
            let mut file = read_config(&config, task, out, threads)?;
            file.subset = Some(parse_modalities(&subset)?);
            file.init = Some(init);
            let cfg = file.resolve(task, paper_scale)?;
            let result = pipeline::run_finetune(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&result.report).expect("report serializes")
            );
        }
        Command::Reconstruct {
            ckpt,
            source,
            targets,
            patient,
            data,
            out,
        } => {
            let rec = pipeline::run_reconstruct(
                &ckpt,
                &data,
                &patient,
                &parse_modalities(&source)?,
                &parse_modalities(&targets)?,
                &out,
            )?;
            for (m, mse) in &rec.masked_mse {
                println!("{m}: masked-region MSE {mse:.5}");
            }
            println!("outputs in {}", out.display());
        }
        Command::Consistency {
            ckpt,
            data,
            out,
            threads,
        } => {
            let m = pipeline::run_consistency(&ckpt, &data, &out, threads)?;
            let by_size = m.similarity_to_full_by_size();
            println!(
                "mean similarity to the full set by subset size: 1 → {:.4}, 2 → {:.4}, 3 → {:.4}",
                by_size[0], by_size[1], by_size[2]
            );
            println!("outputs in {}", out.display());
        }
    }
    Ok(())
}
