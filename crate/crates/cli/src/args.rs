use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{self, Model};
use crate::config::{Paths, RunConfig};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "poac", version, about = "Prompt optimization for abstract concepts, end to end on a synthetic world")]
pub struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set diffusion.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Run seed; overrides the config file and POAC_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Put every artifact under this directory.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Load checkpoints even when their config hash differs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Base,
    Refl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the prompt-pair corpus and the world embedding.
    BuildData,
    /// Fine-tune the prompt rewriter on the corpus.
    TrainPlm,
    /// Pretrain the conditional denoiser.
    PretrainDiffusion,
    /// Fine-tune the pretrained denoiser with reward feedback.
    ReflFinetune,
    /// Rewrite an abstract prompt.
    OptimizePrompt {
        #[arg(long = "in", value_name = "TEXT")]
        input: String,
        /// Sample from the top k tokens instead of greedy decoding.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Sample images for a prompt as JSON lines.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, value_enum, default_value_t = ModelArg::Base)]
        model: ModelArg,
        /// Rewrite the prompt first.
        #[arg(long)]
        optimize: bool,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score BASE, POAC and POAC_REFL and compare them.
    Evaluate,
}

/// What a finished command wants printed and its exit status.
pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut sets = Vec::new();
        if let Some(dir) = &self.workdir {
            let p = Paths::under(dir);
            sets.push(format!("paths.corpus={}", p.corpus.display()));
            sets.push(format!("paths.checkpoints={}", p.checkpoints.display()));
            sets.push(format!("paths.reports={}", p.reports.display()));
        }
        sets.extend(self.sets.iter().cloned());
        RunConfig::load(self.config.as_deref(), &sets, self.seed)
    }

    pub fn run(&self) -> Result<Outcome> {
        let cfg = self.run_config()?;
        let ok = |stdout: String| Outcome { stdout, code: 0 };
        Ok(match &self.command {
            Command::BuildData => ok(commands::build_data(&cfg)?),
            Command::TrainPlm => ok(commands::train_plm(&cfg)?),
            Command::PretrainDiffusion => ok(commands::pretrain_diffusion(&cfg)?),
            Command::ReflFinetune => ok(commands::refl_finetune_cmd(&cfg, self.force)?),
            Command::OptimizePrompt { input, top_k } => ok(commands::optimize_prompt(&cfg, input, *top_k, self.force)?),
            Command::Generate {
                prompt,
                n,
                model,
                optimize,
                out,
            } => {
                let model = match model {
                    ModelArg::Base => Model::Pretrained,
                    ModelArg::Refl => Model::Refl,
                };
                let lines = commands::generate(&cfg, prompt, *n, model, *optimize, self.force)?;
                match out {
                    Some(p) => {
                        crate::store::write_atomic(p, lines.as_bytes())?;
                        ok(format!("{n} samples -> {}", p.display()))
                    }
                    None => ok(lines.trim_end().to_string()),
                }
            }
            Command::Evaluate => {
                let r = commands::evaluate(&cfg, self.force)?;
                let mut s = r.csv.trim_end().to_string();
                if r.verdict.pass {
                    s.push_str("\nverdict: PASS");
                } else {
                    s.push_str(&format!("\nverdict: FAIL ({})", r.verdict.reasons.join("; ")));
                }
                Outcome {
                    stdout: s,
                    code: if r.verdict.pass { 0 } else { 2 },
                }
            }
        })
    }
}
