//! Command-line front end. Every subcommand prints one JSON document on
//! stdout and writes its artifacts under an output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CscError, Result};
use crate::report::{verify_claims, SuiteOptions};
use crate::run::{self, TrainOptions, Variant, CHECKPOINT_DIR, CONFIG_ECHO};
use crate::synth::Corpus;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_REFUSED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "csc", version, about = "Contrastive separative coding on a synthetic speaker corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
        /// Corpus seed, overriding the config file.
        #[arg(long)]
        corpus_seed: Option<u64>,
    },
    /// Train on a corpus, checkpointing after every epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory; defaults to the config's eval.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
        /// Comma-separated variants (csc, infonce, meanpool), one run each.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Training seed; takes precedence over CSC_SEED and the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Speaker verification on the unseen test speakers.
    Eval {
        /// Run directory or checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the loss identity and mutual information oracle suite.
    VerifyClaims {
        /// Add this to the right-hand side of the scorer identity.
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
        #[arg(long, default_value_t = SuiteOptions::default().seed)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention curves of one mixture as CSV and SVG.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Example id in the corpus manifest.
        #[arg(long)]
        example: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &CscError) -> u8 {
    match e {
        CscError::Refused(_) => EXIT_REFUSED,
        CscError::Config(_) | CscError::Checkpoint(_) | CscError::UnknownSpeaker(_) | CscError::Io(_) | CscError::Json(_) => EXIT_CONFIG,
        _ => EXIT_CHECK_FAILED,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

/// Accepts either a run directory or the checkpoint directory inside it.
fn checkpoint_dir(path: &Path) -> PathBuf {
    if checkpoint::manifest_path(path).exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_DIR)
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[derive(Serialize)]
struct SynthOutput<'a> {
    corpus: &'a Path,
    speakers: usize,
    utterances: usize,
    examples: usize,
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    run_dir: &'a Path,
    #[serde(flatten)]
    summary: run::TrainSummary,
}

/// Runs one command and returns the process exit code.
pub fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Synth { config, out, force, corpus_seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = corpus_seed {
                cfg.corpus.seed = s;
            }
            cfg.validate()?;
            if out.join(run::CORPUS_MANIFEST).exists() && !force {
                return Err(CscError::Refused(out.join(run::CORPUS_MANIFEST).display().to_string()));
            }
            let corpus = Corpus::generate(&cfg.corpus)?;
            run::write_corpus(&corpus, &out, force)?;
            run::echo_config(&cfg, &out)?;
            let m = &corpus.manifest;
            print_json(&SynthOutput { corpus: &out, speakers: m.speakers.len(), utterances: m.utterances.len(), examples: m.examples.len() })?;
            Ok(EXIT_OK)
        }
        Command::Train { config, corpus, out, resume, force, ablate, epochs, lr, lambda, seed, stop_after } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = lambda {
                cfg.train.lambda = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.eval.output_dir));
            let corpus = run::read_corpus(&corpus)?;
            let cfg = run::bind_corpus(&cfg, &corpus)?;
            let opts = TrainOptions { resume, force, max_epochs: stop_after };
            match ablate {
                Some(list) => {
                    let variants = Variant::parse_list(&list)?;
                    run::echo_config(&cfg, &out)?;
                    print_json(&run::run_ablation(&cfg, &corpus, &variants, &out, opts)?)?;
                }
                None => {
                    let (_, summary) = run::train_run(&cfg, &corpus, &out, opts)?;
                    print_json(&TrainOutput { run_dir: &out, summary })?;
                }
            }
            Ok(EXIT_OK)
        }
        Command::Eval { checkpoint: ckpt, corpus, config, out } => {
            let dir = checkpoint_dir(&ckpt);
            let t = checkpoint::load(&dir)?;
            let echoed = dir.parent().map(|p| p.join(CONFIG_ECHO)).filter(|p| p.exists());
            let cfg = load_config(config.as_deref().or(echoed.as_deref()))?;
            let corpus = run::read_corpus(&corpus)?;
            if corpus.manifest.config.sources != t.model.sources() {
                return Err(CscError::Config(format!("corpus mixes {} sources, checkpoint separates {}", corpus.manifest.config.sources, t.model.sources())));
            }
            let out = out.unwrap_or_else(|| dir.parent().unwrap_or(Path::new(".")).join("eval"));
            let outcome = run::eval_run(&t.model, &t.store, &corpus, &cfg.eval.policy(), &out)?;
            print_json(&outcome.summary)?;
            Ok(EXIT_OK)
        }
        Command::VerifyClaims { perturb, seed, out } => {
            let report = verify_claims(&SuiteOptions { perturb, seed, ..SuiteOptions::default() })?;
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            print_json(&report)?;
            Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::AttnDump { checkpoint: ckpt, corpus, example, out } => {
            let t = checkpoint::load(&checkpoint_dir(&ckpt))?;
            let corpus = run::read_corpus(&corpus)?;
            if example >= corpus.manifest.examples.len() {
                return Err(CscError::Config(format!("corpus has no example {example}")));
            }
            let trace = run::attn_dump(&t.model, &t.store, &corpus, example, &out)?;
            #[derive(Serialize)]
            struct AttnOutput {
                example: usize,
                segments: usize,
                sources: usize,
                row_sum_error: f64,
                energy_dominance: f64,
            }
            print_json(&AttnOutput {
                example,
                segments: trace.curves.first().map_or(0, Vec::len),
                sources: trace.curves.len(),
                row_sum_error: trace.row_sum_error,
                energy_dominance: trace.energy_dominance(),
            })?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&CscError::Refused("x".into())), EXIT_REFUSED);
        assert_eq!(exit_code(&CscError::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&CscError::NanLoss { epoch: 0, step: 1, detail: String::new() }), EXIT_CHECK_FAILED);
    }

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["csc", "train", "--corpus", "c", "--ablate", "csc,meanpool", "--resume"]).unwrap();
        assert!(matches!(cli.command, Command::Train { resume: true, ablate: Some(_), .. }));
        let cli = Cli::try_parse_from(["csc", "verify-claims", "--perturb", "1e-3"]).unwrap();
        assert!(matches!(cli.command, Command::VerifyClaims { perturb, .. } if perturb == 1e-3));
        assert!(Cli::try_parse_from(["csc", "attn-dump", "--checkpoint", "x"]).is_err());
    }
}
