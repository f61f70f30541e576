//! CLI verbs over the experiment library.
//!
//! Exit codes: 0 success, 2 configuration errors (bad config file, unknown
//! names, would-overwrite), 3 runtime failures.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use ttslab_core::config::ExperimentConfig;
use ttslab_core::experiment::{
    cmd_ablate, cmd_eval, cmd_export_embeddings, cmd_finetune, cmd_gen_corpus, cmd_pretrain,
    cmd_synth, OutputLayout,
};
use ttslab_core::training::ABLATION_NAMES;
use ttslab_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "ttslab",
    about = "Desk-scale multilingual TTS laboratory: text-only pretraining, \
             fine-tuning with parameter freezing, zero-shot synthesis, and \
             oracle-based intelligibility evaluation."
)]
pub struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus, oracle, registry, and vocabulary.
    GenCorpus,
    /// Run MLM pretraining on the text corpus.
    Pretrain {
        /// Continue from the existing pretraining checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune the TTS model on the paired corpus.
    Finetune,
    /// Synthesize one utterance and write features plus diagnostics.
    Synth {
        /// Text to synthesize.
        text: String,
        /// Language code.
        language: String,
        /// `target_mean` or `cross:<code>`.
        #[arg(long, default_value = "target_mean")]
        speaker: String,
    },
    /// Evaluate the fine-tuned model over the evaluation corpus.
    Eval,
    /// Run the base configuration plus ablations and emit a comparison table.
    Ablate {
        /// Ablation names (defaults to all four).
        #[arg(long)]
        names: Vec<String>,
    },
    /// Export per-utterance embedding means as TSV.
    ExportEmb,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

/// Execute a parsed command; returns the human-readable summary to print.
pub fn execute(cli: &Cli) -> Result<String> {
    let config = load_config(cli)?;
    let layout = OutputLayout::new(&config);
    match &cli.command {
        Command::GenCorpus => {
            let layout = cmd_gen_corpus(&config, cli.force)?;
            Ok(format!(
                "corpus written to {} (config hash {})",
                layout.corpus.display(),
                &config.hash()[..12]
            ))
        }
        Command::Pretrain { resume } => {
            let ckpt = cmd_pretrain(&config, &layout, *resume)?;
            Ok(format!(
                "pretrained {} steps -> {}",
                ckpt.meta.step,
                layout.pretrain_ckpt().display()
            ))
        }
        Command::Finetune => {
            let ckpt = cmd_finetune(&config, &layout)?;
            Ok(format!(
                "fine-tuned {} steps (freeze: {}) -> {}",
                ckpt.meta.step,
                ckpt.meta.provenance.freeze.as_deref().unwrap_or("none"),
                layout.finetune_ckpt().display()
            ))
        }
        Command::Synth {
            text,
            language,
            speaker,
        } => {
            let outcome = cmd_synth(&config, &layout, text, language, speaker)?;
            Ok(format!(
                "mode: {}\n{} frames ({}) -> {}",
                outcome.mode,
                outcome.frames,
                if outcome.stopped_naturally {
                    "stopped naturally"
                } else {
                    "truncated at max_frames"
                },
                outcome.feature_path.display()
            ))
        }
        Command::Eval => {
            let report = cmd_eval(&config, &layout)?;
            let mut summary = format!(
                "evaluated {} syntheses -> {}\n",
                report.records.len(),
                layout.report_jsonl().display()
            );
            summary.push_str(&report.aggregate_tsv());
            Ok(summary)
        }
        Command::Ablate { names } => {
            let names: Vec<String> = if names.is_empty() {
                ABLATION_NAMES.iter().map(|s| s.to_string()).collect()
            } else {
                names.clone()
            };
            let rows = cmd_ablate(&config, &layout, &names)?;
            let table = std::fs::read_to_string(layout.ablation_table())
                .map_err(|e| Error::io(layout.ablation_table().display().to_string(), e))?;
            Ok(format!("{} variants evaluated\n{table}", rows.len()))
        }
        Command::ExportEmb => {
            let path = cmd_export_embeddings(&config, &layout)?;
            Ok(format!("embeddings -> {}", path.display()))
        }
    }
}

/// Exit code for an error: 2 for configuration problems, 3 for runtime
/// failures.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::WouldOverwrite(_)
        | Error::UnknownLanguage { .. } => 2,
        _ => 3,
    }
}
