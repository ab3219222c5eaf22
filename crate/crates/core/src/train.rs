//! Joint objective, the speech-to-speaker PIT schedule, and the optimizer loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::csc::{contrastive_loss, reg_loss, sq_dist, GlobalSpeakerBank, LossKind};
use crate::encoder::Geometry;
use crate::error::{CscError, Result};
use crate::model::{CscModel, MaskMode, ModelConfig, Separation};
use crate::params::{Bound, ParamStore};
use crate::pit::{si_snr, si_snr_var, upit_assign, PitAssignment, PitMode};
use crate::synth::{derive_seed, Corpus, MixtureExample, Split};

const TAG_INIT: u64 = 0x494e_4954;
const TAG_BANK: u64 = 0x4241_4e4b;
const TAG_SHUFFLE: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the contrastive and regularization terms.
    pub lambda: f64,
    /// First epoch (0-based) whose permutation comes from the speaker loss.
    pub pit_switch_epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lambda: 10.0, pit_switch_epoch: 3, lr: 1e-3, batch_size: 1, epochs: 10, seed: 1234, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CscError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.pit_switch_epoch == 0 {
            return bad("pit_switch_epoch must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("eps must be positive and clip_norm non-negative");
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ Adam

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update from the accumulated grads multiplied by `scale`.
    pub fn step(&mut self, store: &mut ParamStore, scale: f64) -> Result<()> {
        let all = vec![true; store.len()];
        self.step_masked(store, scale, &all)
    }

    /// As [`Adam::step`], touching only parameters whose flag is set.
    pub fn step_masked(&mut self, store: &mut ParamStore, scale: f64, active: &[bool]) -> Result<()> {
        if self.m.len() != store.len() || active.len() != store.len() {
            return Err(CscError::Contract("optimizer state does not match the parameter store".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn grad_norm(store: &ParamStore) -> f64 {
    store.tensors().iter().filter_map(|t| t.grad()).flatten().map(|g| g * g).sum::<f64>().sqrt()
}

// ------------------------------------------------------------ joint loss

/// The joint objective for one mixture, recorded on a tape.
pub struct JointLoss {
    pub total: Var,
    pub speech: Var,
    pub contrastive: Var,
    pub reg: Var,
    pub assignment: PitAssignment,
    pub mode: PitMode,
    /// Permutations whose speech loss was evaluated: C! before the switch,
    /// one after it.
    pub speech_evaluations: usize,
    pub separation: Separation,
}

/// Permutation-selection criterion of the speaker loss: the numerator term
/// of the contrastive loss for estimate `c` labelled as source `c'`.
pub fn speaker_criterion(kind: LossKind, zs: &[&[f64]], targets: &[&[f64]], alpha: f64) -> Vec<Vec<f64>> {
    zs.iter()
        .map(|z| {
            targets
                .iter()
                .map(|e| match kind {
                    LossKind::Csc => alpha * sq_dist(z, e),
                    LossKind::Infonce => -z.iter().zip(*e).map(|(a, b)| a * b).sum::<f64>(),
                })
                .collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    tape: &mut Tape,
    p: &Bound,
    model: &CscModel,
    geo: &Geometry,
    ex: &MixtureExample,
    bank: &[Var],
    mode: PitMode,
    lambda: f64,
) -> Result<JointLoss> {
    let c = model.sources();
    if ex.sources.len() != c || ex.speaker_ids.len() != c {
        return Err(CscError::Contract(format!("model separates {c} sources, example has {}", ex.sources.len())));
    }
    if let Some(&n) = ex.speaker_ids.iter().find(|&&n| n >= bank.len()) {
        return Err(CscError::UnknownSpeaker(n));
    }
    let sep = model.forward(tape, p, geo, &ex.mixture, MaskMode::Learned)?;
    let alpha = model.alpha.var(tape, p)?;
    let refs = ex.sources.iter().map(|s| tape.constant(&[s.len()], s.clone())).collect::<Result<Vec<_>>>()?;

    let (assignment, snrs, speech_evaluations) = match mode {
        PitMode::Speech => {
            let mut grid = vec![vec![]; c];
            for (i, row) in grid.iter_mut().enumerate() {
                for &r in &refs {
                    row.push(si_snr_var(tape, sep.estimates[i], r)?);
                }
            }
            let neg: Vec<Vec<f64>> = grid.iter().map(|r| r.iter().map(|&v| -tape.scalar(v)).collect()).collect();
            let a = upit_assign(&neg)?;
            let picked = a.perm.iter().enumerate().map(|(i, &j)| grid[i][j]).collect();
            let evals = a.evaluations;
            (a, picked, evals)
        }
        PitMode::Speaker => {
            let zs: Vec<&[f64]> = sep.embeddings.iter().map(|&z| tape.value(z)).collect();
            let es: Vec<&[f64]> = ex.speaker_ids.iter().map(|&n| tape.value(bank[n])).collect();
            let a = upit_assign(&speaker_criterion(model.cfg.loss, &zs, &es, tape.scalar(alpha)))?;
            let picked = a.perm.iter().enumerate().map(|(i, &j)| si_snr_var(tape, sep.estimates[i], refs[j])).collect::<Result<Vec<_>>>()?;
            (a, picked, 1)
        }
    };

    let snr = tape.concat_rows(&snrs)?;
    let snr = tape.mean(snr)?;
    let speech = tape.neg(snr)?;
    let labelled: Vec<(Var, usize)> = assignment.perm.iter().enumerate().map(|(i, &j)| (sep.embeddings[i], ex.speaker_ids[j])).collect();
    let contrastive = contrastive_loss(tape, model.cfg.loss, &labelled, bank, alpha)?;
    let reg = reg_loss(tape, &sep.embeddings)?;
    let aux = tape.add(contrastive, reg)?;
    let aux = tape.scale(aux, lambda)?;
    let total = tape.add(speech, aux)?;
    Ok(JointLoss { total, speech, contrastive, reg, assignment, mode, speech_evaluations, separation: sep })
}

// --------------------------------------------------------------- logging

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub mode: PitMode,
    pub si_snr_loss: f64,
    pub csc_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    /// Examples in the step whose permutation differs from their previous visit.
    pub pi_changed: usize,
    pub wall_ms: f64,
}

impl StepRecord {
    /// The deterministic part of a record (everything but timing).
    pub fn losses(&self) -> [f64; 4] {
        [self.si_snr_loss, self.csc_loss, self.reg_loss, self.total]
    }
}

/// Diagnostic written when a step produces a non-finite value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub event: String,
    pub epoch: usize,
    pub step: usize,
    pub example_ids: Vec<usize>,
    pub detail: String,
}

pub trait MetricsSink {
    fn step(&mut self, record: &StepRecord) -> Result<()>;
    fn abort(&mut self, record: &AbortRecord) -> Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub steps: Vec<StepRecord>,
    pub aborts: Vec<AbortRecord>,
}

impl MetricsSink for MemorySink {
    fn step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }

    fn abort(&mut self, record: &AbortRecord) -> Result<()> {
        self.aborts.push(record.clone());
        Ok(())
    }
}

/// Appends one JSON object per line.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> JsonlSink<W> {
    fn line<T: Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn step(&mut self, record: &StepRecord) -> Result<()> {
        self.line(record)
    }

    fn abort(&mut self, record: &AbortRecord) -> Result<()> {
        self.line(record)
    }
}

// --------------------------------------------------------------- trainer

/// Per-step details not written to the metrics log.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub record: StepRecord,
    pub example_ids: Vec<usize>,
    pub perms: Vec<Vec<usize>>,
    pub speech_evaluations: Vec<usize>,
}

/// Shuffle-stream position, enough to rebuild the generator exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// 128-bit word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| CscError::Checkpoint(format!("bad rng position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: CscModel,
    pub store: ParamStore,
    pub bank: GlobalSpeakerBank,
    pub opt: Adam,
    rng: ChaCha8Rng,
    shuffle_seed: u64,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Last permutation chosen per training example.
    pub last_perm: BTreeMap<usize, Vec<usize>>,
    geometry: Option<Geometry>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, n_speakers: usize) -> Result<Self> {
        cfg.validate()?;
        if n_speakers == 0 {
            return Err(CscError::Config("training needs at least one speaker".into()));
        }
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_INIT]));
        let model = CscModel::new(model_cfg, &mut store, &mut init)?;
        let mut bank_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_BANK]));
        let bank = GlobalSpeakerBank::new(&mut bank_rng, n_speakers, model_cfg.encoder.feature_dim);
        let opt = Adam::new(&store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        let shuffle_seed = derive_seed(cfg.seed, &[TAG_SHUFFLE]);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            bank,
            opt,
            rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
            shuffle_seed,
            epoch: 0,
            step: 0,
            last_perm: BTreeMap::new(),
            geometry: None,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(self.shuffle_seed, &self.rng)
    }

    pub fn set_rng_state(&mut self, state: &RngState) -> Result<()> {
        self.rng = state.restore()?;
        self.shuffle_seed = state.seed;
        Ok(())
    }

    pub fn mode(&self) -> PitMode {
        PitMode::for_epoch(self.epoch, self.cfg.pit_switch_epoch)
    }

    fn geometry(&mut self, samples: usize) -> Result<&Geometry> {
        if self.geometry.as_ref().is_none_or(|g| g.samples != samples) {
            self.geometry = Some(self.model.geometry(samples)?);
        }
        Ok(self.geometry.as_ref().expect("just built"))
    }

    /// One optimizer step over a batch, followed by the bank updates.
    pub fn train_step(&mut self, batch: &[(usize, &MixtureExample)], mode: PitMode) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(CscError::EmptyBatch);
        }
        let start = Instant::now();
        let samples = batch[0].1.mixture.len();
        self.geometry(samples)?;
        let geo = self.geometry.take().expect("cached");
        let out = self.train_step_inner(batch, mode, &geo, start);
        self.geometry = Some(geo);
        out
    }

    fn train_step_inner(&mut self, batch: &[(usize, &MixtureExample)], mode: PitMode, geo: &Geometry, start: Instant) -> Result<StepReport> {
        let (epoch, step) = (self.epoch, self.step);
        let abort = move |detail: String| CscError::NanLoss { epoch, step, detail };
        self.store.zero_grads();
        let mut sums = [0.0; 4];
        let mut pending = Vec::with_capacity(batch.len());
        let mut perms = Vec::with_capacity(batch.len());
        let mut evals = Vec::with_capacity(batch.len());
        for &(id, ex) in batch {
            let mut tape = Tape::new();
            let result = (|| {
                let p = self.store.bind(&mut tape)?;
                let bank = self.bank.bind(&mut tape, &p, &self.model.gar)?;
                let j = joint_loss(&mut tape, &p, &self.model, geo, ex, &bank, mode, self.cfg.lambda)?;
                let grads = tape.backward(j.total)?;
                Ok::<_, CscError>((p, j, grads))
            })();
            let (p, j, grads) = match result {
                Ok(v) => v,
                Err(CscError::NonFinite { op }) => return Err(abort(format!("non-finite value in {op} on example {id}"))),
                Err(e) => return Err(e),
            };
            let vals = [tape.scalar(j.speech), tape.scalar(j.contrastive), tape.scalar(j.reg), tape.scalar(j.total)];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(abort(format!("non-finite loss on example {id}")));
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            self.store.absorb_grads(&p, &grads)?;
            let zs: Vec<Vec<f64>> = j.separation.embeddings.iter().map(|&z| tape.value(z).to_vec()).collect();
            let speakers: Vec<usize> = j.assignment.perm.iter().map(|&k| ex.speaker_ids[k]).collect();
            pending.push((zs, speakers));
            perms.push(j.assignment.perm);
            evals.push(j.speech_evaluations);
        }

        let b = batch.len() as f64;
        let mut scale = 1.0 / b;
        let norm = grad_norm(&self.store) * scale;
        if !norm.is_finite() {
            return Err(abort("non-finite gradient".into()));
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            scale *= self.cfg.clip_norm / norm;
        }
        self.opt.step(&mut self.store, scale)?;
        for (zs, speakers) in &pending {
            for (z, &n) in zs.iter().zip(speakers) {
                self.bank.update(&self.store, &self.model.gar, n, z)?;
            }
        }
        self.bank.check_healthy().map_err(|e| abort(e.to_string()))?;

        let mut changed = 0;
        for (&(id, _), perm) in batch.iter().zip(&perms) {
            if self.last_perm.insert(id, perm.clone()).is_some_and(|old| &old != perm) {
                changed += 1;
            }
        }
        let record = StepRecord {
            epoch: self.epoch,
            step: self.step,
            mode,
            si_snr_loss: sums[0] / b,
            csc_loss: sums[1] / b,
            reg_loss: sums[2] / b,
            total: sums[3] / b,
            pi_changed: changed,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(StepReport { record, example_ids: batch.iter().map(|b| b.0).collect(), perms, speech_evaluations: evals })
    }

    /// Runs one epoch over `data` in a freshly shuffled order.
    pub fn run_epoch(&mut self, data: &[(usize, MixtureExample)], sink: &mut dyn MetricsSink) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(CscError::EmptyBatch);
        }
        let mode = self.mode();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<(usize, &MixtureExample)> = chunk.iter().map(|&i| (data[i].0, &data[i].1)).collect();
            match self.train_step(&batch, mode) {
                Ok(r) => {
                    sink.step(&r.record)?;
                    reports.push(r);
                }
                Err(CscError::NanLoss { epoch, step, detail }) => {
                    sink.abort(&AbortRecord { event: "nan_abort".into(), epoch, step, example_ids: batch.iter().map(|b| b.0).collect(), detail: detail.clone() })?;
                    return Err(CscError::NanLoss { epoch, step, detail });
                }
                Err(e) => return Err(e),
            }
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// Runs the remaining epochs up to the configured count, calling
    /// `after_epoch` once each epoch completes.
    pub fn fit(
        &mut self,
        data: &[(usize, MixtureExample)],
        sink: &mut dyn MetricsSink,
        mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(data, sink)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

/// Renders the mixtures of one split, paired with their example ids.
pub fn load_split(corpus: &Corpus, split: Split) -> Result<Vec<(usize, MixtureExample)>> {
    corpus.ids(split).into_iter().map(|id| Ok((id, corpus.example(id)?))).collect()
}

// ------------------------------------------------------------ evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationQuality {
    pub examples: usize,
    /// Mean SI-SNR of the estimates under the best permutation.
    pub si_snr: f64,
    /// Mean SI-SNR of the unprocessed mixture against each source.
    pub mixture_si_snr: f64,
    pub improvement: f64,
}

/// SI-SNR of estimates against references under the permutation maximizing
/// the mean, plus that permutation.
pub fn best_permutation_si_snr(estimates: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<f64>)> {
    let grid = estimates.iter().map(|e| refs.iter().map(|r| si_snr(e, r)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    let neg: Vec<Vec<f64>> = grid.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let a = upit_assign(&neg)?;
    let snr = a.perm.iter().enumerate().map(|(i, &j)| grid[i][j]).collect();
    Ok((a.perm, snr))
}

pub fn separation_quality(model: &CscModel, store: &ParamStore, data: &[(usize, MixtureExample)]) -> Result<SeparationQuality> {
    if data.is_empty() {
        return Err(CscError::EmptyBatch);
    }
    let geo = model.geometry(data[0].1.mixture.len())?;
    let (mut est_sum, mut mix_sum, mut n) = (0.0, 0.0, 0usize);
    for (_, ex) in data {
        let inf = model.infer(store, &geo, &ex.mixture)?;
        let (_, snr) = best_permutation_si_snr(&inf.estimates, &ex.sources)?;
        for (j, s) in snr.iter().enumerate() {
            est_sum += s;
            mix_sum += si_snr(&ex.mixture, &ex.sources[j])?;
            n += 1;
        }
    }
    let (si, mix) = (est_sum / n as f64, mix_sum / n as f64);
    Ok(SeparationQuality { examples: data.len(), si_snr: si, mixture_si_snr: mix, improvement: si - mix })
}
