//! On-disk runs: corpus directories, training with per-epoch checkpoints
//! and a metrics log, evaluation artifacts and ablation tables.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::PoolKind;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::csc::LossKind;
use crate::error::{CscError, Result};
use crate::metrics::{attention_trace, eer, roc, summarize, trial_scores, verification_trials, write_trials_csv, AttentionTrace, TrialPolicy, VerificationSummary};
use crate::model::CscModel;
use crate::params::ParamStore;
use crate::plot::{attention_svg, roc_svg};
use crate::synth::{Corpus, Manifest, Split};
use crate::train::{load_split, separation_quality, JsonlSink, SeparationQuality, StepRecord, Trainer};

pub const CORPUS_MANIFEST: &str = "manifest.json";
pub const CORPUS_WAVEFORMS: &str = "waveforms.bin";
pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_SUMMARY: &str = "train_summary.json";

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes the effective configuration next to a command's outputs.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.to_toml()?)?;
    Ok(())
}

// ----------------------------------------------------------------- corpus

pub fn write_corpus(corpus: &Corpus, dir: &Path, force: bool) -> Result<()> {
    let manifest = dir.join(CORPUS_MANIFEST);
    if manifest.exists() && !force {
        return Err(CscError::Refused(manifest.display().to_string()));
    }
    fs::create_dir_all(dir)?;
    let waveforms = dir.join(CORPUS_WAVEFORMS);
    if corpus.manifest.config.store_waveforms {
        let mut w = BufWriter::new(File::create(&waveforms)?);
        for u in &corpus.clean {
            for x in &u.samples {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    } else if waveforms.exists() {
        fs::remove_file(&waveforms)?;
    }
    write_json(&manifest, &corpus.manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(CORPUS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CscError::Config(format!("cannot read corpus manifest {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CscError::Config(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

/// Loads a corpus directory, rendering waveforms from their seeds unless
/// they were stored.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let m = read_manifest(dir)?;
    if !m.config.store_waveforms {
        return Corpus::render(m);
    }
    let bytes = fs::read(dir.join(CORPUS_WAVEFORMS))?;
    let n = m.config.samples_per_utterance();
    if bytes.len() != 8 * n * m.utterances.len() {
        return Err(CscError::Config(format!("{} has {} bytes, expected {}", CORPUS_WAVEFORMS, bytes.len(), 8 * n * m.utterances.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Corpus::with_waveforms(m, values.chunks(n).map(<[f64]>::to_vec).collect())
}

/// The run config with its corpus table replaced by the corpus actually on
/// disk, revalidated so a mismatched model is reported before training.
pub fn bind_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    cfg.corpus = corpus.manifest.config.clone();
    cfg.validate()?;
    Ok(cfg)
}

// --------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    /// Mean losses over the steps of the final epoch.
    pub final_si_snr_loss: f64,
    pub final_csc_loss: f64,
    pub valid: SeparationQuality,
}

/// Reads step records back from a metrics log, skipping diagnostic lines.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("event").is_none() {
            out.push(serde_json::from_value(v)?);
        }
    }
    Ok(out)
}

/// Drops log lines from epochs at or after `epoch`, so a resumed run
/// rewrites them rather than duplicating them.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("epoch").and_then(serde_json::Value::as_u64).is_some_and(|e| (e as usize) < epoch) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    pub force: bool,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<usize>,
}

/// Trains into `out`: config echo, metrics log, a checkpoint after every
/// epoch and a closing summary.
pub fn train_run(cfg: &RunConfig, corpus: &Corpus, out: &Path, opts: TrainOptions) -> Result<(Trainer, TrainSummary)> {
    let cfg = bind_corpus(cfg, corpus)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let log = out.join(METRICS_LOG);
    let mut trainer = if opts.resume && checkpoint::manifest_path(&ckpt).exists() {
        let t = checkpoint::load(&ckpt)?;
        if t.model.cfg != cfg.model || t.cfg != cfg.train {
            return Err(CscError::Config(format!("checkpoint in {} was trained with a different model or train config", ckpt.display())));
        }
        if t.bank.len() != cfg.corpus.n_speakers {
            return Err(CscError::Config(format!("checkpoint bank has {} speakers, corpus has {}", t.bank.len(), cfg.corpus.n_speakers)));
        }
        truncate_metrics(&log, t.epoch)?;
        t
    } else {
        if (checkpoint::manifest_path(&ckpt).exists() || log.exists()) && !opts.force {
            return Err(CscError::Refused(out.display().to_string()));
        }
        if log.exists() {
            fs::remove_file(&log)?;
        }
        Trainer::new(&cfg.model, &cfg.train, cfg.corpus.n_speakers)?
    };
    echo_config(&cfg, out)?;

    let train = load_split(corpus, Split::Train)?;
    let mut sink = JsonlSink(BufWriter::new(OpenOptions::new().create(true).append(true).open(&log)?));
    let stop = opts.max_epochs.map_or(cfg.train.epochs, |n| (trainer.epoch + n).min(cfg.train.epochs));
    while trainer.epoch < stop {
        trainer.run_epoch(&train, &mut sink)?;
        checkpoint::save(&trainer, &ckpt)?;
    }
    drop(sink);

    let records = read_metrics(&log)?;
    let last = trainer.epoch.saturating_sub(1);
    let tail: Vec<&StepRecord> = records.iter().filter(|r| r.epoch == last).collect();
    let mean = |f: fn(&StepRecord) -> f64| if tail.is_empty() { f64::NAN } else { tail.iter().map(|r| f(r)).sum::<f64>() / tail.len() as f64 };
    let valid = separation_quality(&trainer.model, &trainer.store, &load_split(corpus, Split::Valid)?)?;
    let summary = TrainSummary {
        epochs: trainer.epoch,
        steps: trainer.step,
        final_si_snr_loss: mean(|r| r.si_snr_loss),
        final_csc_loss: mean(|r| r.csc_loss),
        valid,
    };
    write_json(&out.join(TRAIN_SUMMARY), &summary)?;
    Ok((trainer, summary))
}

// ------------------------------------------------------------- evaluation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub summary: VerificationSummary,
    pub trials: usize,
}

/// Verification trials on the unseen test speakers: `summary.json`,
/// `trials.csv` and `roc.svg` in `out`.
pub fn eval_run(model: &CscModel, store: &ParamStore, corpus: &Corpus, policy: &TrialPolicy, out: &Path) -> Result<EvalOutcome> {
    let trials = verification_trials(model, store, corpus, policy)?;
    let summary = summarize(&trials)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("summary.json"), &summary)?;
    write_trials_csv(BufWriter::new(File::create(out.join("trials.csv"))?), &trials)?;
    let scores = trial_scores(&trials);
    let curve = roc(&scores)?;
    fs::write(out.join("roc.svg"), roc_svg(&curve, eer(&scores)?, "speaker verification on unseen speakers"))?;
    Ok(EvalOutcome { summary, trials: trials.len() })
}

/// Attention curves of one mixture as CSV and SVG.
pub fn attn_dump(model: &CscModel, store: &ParamStore, corpus: &Corpus, example: usize, out: &Path) -> Result<AttentionTrace> {
    let trace = attention_trace(model, store, corpus, example)?;
    fs::create_dir_all(out)?;
    trace.write_csv(BufWriter::new(File::create(out.join(format!("attention_{example}.csv")))?))?;
    fs::write(out.join(format!("attention_{example}.svg")), attention_svg(&trace, &format!("cross attention, mixture {example}")))?;
    Ok(trace)
}

// --------------------------------------------------------------- ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Csc,
    Infonce,
    Meanpool,
}

impl Variant {
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(|v| match v.trim() {
                "csc" => Ok(Self::Csc),
                "infonce" => Ok(Self::Infonce),
                "meanpool" => Ok(Self::Meanpool),
                other => Err(CscError::Config(format!("unknown ablation variant {other:?}"))),
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Csc => "csc",
            Self::Infonce => "infonce",
            Self::Meanpool => "meanpool",
        }
    }

    /// The run config with only the marked component changed.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut cfg = cfg.clone();
        let (loss, pool) = match self {
            Self::Csc => (LossKind::Csc, PoolKind::Attention),
            Self::Infonce => (LossKind::Infonce, PoolKind::Attention),
            Self::Meanpool => (LossKind::Csc, PoolKind::Mean),
        };
        cfg.model.loss = loss;
        cfg.model.pool = pool;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub eer: f64,
    pub auc: f64,
    /// Mean validation SI-SNR of the separated sources, in dB.
    pub final_si_snr: f64,
}

pub fn write_ablation_csv(mut w: impl Write, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "variant,eer,auc,final_si_snr")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e},{:e}", r.variant.name(), r.eer, r.auc, r.final_si_snr)?;
    }
    Ok(())
}

/// One training run per variant under `out/<variant>`, all from the same
/// corpus and seeds, followed by `out/ablation.csv`.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus, variants: &[Variant], out: &Path, opts: TrainOptions) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let vcfg = v.apply(cfg);
        let dir: PathBuf = out.join(v.name());
        let (t, summary) = train_run(&vcfg, corpus, &dir, opts)?;
        let ev = eval_run(&t.model, &t.store, corpus, &vcfg.eval.policy(), &dir.join("eval"))?;
        rows.push(AblationRow { variant: v, eer: ev.summary.eer, auc: ev.summary.auc, final_si_snr: summary.valid.si_snr });
    }
    write_ablation_csv(BufWriter::new(File::create(out.join("ablation.csv"))?), &rows)?;
    Ok(rows)
}
