//! Verification trials on unseen speakers, ROC, AUC and EER.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::max_row_sum_error;
use crate::csc::sq_dist;
use crate::encoder::Geometry;
use crate::error::{CscError, Result};
use crate::model::CscModel;
use crate::params::ParamStore;
use crate::synth::{derive_seed, Corpus, Split};
use crate::train::best_permutation_si_snr;

const TAG_TRIALS: u64 = 0x5452_4941;

/// Similarity of a probe to an enrollment vector: `-||z - e||^2`.
pub fn score_trial(e: &[f64], z: &[f64]) -> Result<f64> {
    if e.len() != z.len() {
        return Err(CscError::Shape { op: "score_trial", detail: format!("{} vs {}", e.len(), z.len()) });
    }
    Ok(-sq_dist(z, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll_speaker: usize,
    pub probe_speaker: usize,
    pub probe_example: usize,
    pub target: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roc {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

fn class_counts(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CscError::SingleClass(format!("{pos} targets and {neg} non-targets")));
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(CscError::NonFinite { op: "roc" });
    }
    Ok((pos, neg))
}

/// Threshold sweep from the highest score down; equal scores form one step,
/// so ties contribute half credit to the trapezoidal area.
pub fn roc(scores: &[(f64, bool)]) -> Result<Roc> {
    let (pos, neg) = class_counts(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let (x0, y0) = *points.last().unwrap();
        let (x1, y1) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
        i = j;
    }
    Ok(Roc { points, auc })
}

/// Rate where false acceptance equals false rejection, interpolating along
/// the ROC segment that crosses it.
pub fn eer(scores: &[(f64, bool)]) -> Result<f64> {
    let pts = roc(scores)?.points;
    let gap = |p: &(f64, f64)| p.0 - (1.0 - p.1);
    for w in pts.windows(2) {
        let (d0, d1) = (gap(&w[0]), gap(&w[1]));
        if d1 >= 0.0 {
            if d1 == 0.0 {
                return Ok(w[1].0);
            }
            let t = -d0 / (d1 - d0);
            return Ok(w[0].0 + t * (w[1].0 - w[0].0));
        }
    }
    unreachable!("the curve ends at (1, 1) where the gap is +1")
}

pub fn trial_scores(trials: &[Trial]) -> Vec<(f64, bool)> {
    trials.iter().map(|t| (t.score, t.target)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub eer: f64,
    pub auc: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn summarize(trials: &[Trial]) -> Result<VerificationSummary> {
    let s = trial_scores(trials);
    let n_target = s.iter().filter(|t| t.1).count();
    Ok(VerificationSummary { eer: eer(&s)?, auc: roc(&s)?.auc, n_target, n_nontarget: s.len() - n_target })
}

/// Writes `trial_id,label,score` rows.
pub fn write_trials_csv(mut w: impl Write, trials: &[Trial]) -> Result<()> {
    writeln!(w, "trial_id,label,score")?;
    for (i, t) in trials.iter().enumerate() {
        writeln!(w, "{i},{},{}", u8::from(t.target), t.score)?;
    }
    Ok(())
}

// ------------------------------------------------------------ trials

/// Starting state of the aggregator when enrolling an unseen speaker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnrollStart {
    #[default]
    Zero,
    /// The mean of the enrollment embeddings.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialPolicy {
    /// Utterances per test speaker reserved for enrollment.
    pub enroll_utterances: usize,
    pub enroll_start: EnrollStart,
    pub seed: u64,
}

impl Default for TrialPolicy {
    fn default() -> Self {
        Self { enroll_utterances: 3, enroll_start: EnrollStart::Zero, seed: 7 }
    }
}

/// A separated embedding attributed to one speaker's clean utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Attributed {
    pub speaker: usize,
    pub utterance: usize,
    pub example: usize,
    pub z: Vec<f64>,
}

/// Embeddings of every test mixture, each matched to a source by the
/// permutation that maximizes SI-SNR against the clean references.
pub fn test_embeddings(model: &CscModel, store: &ParamStore, corpus: &Corpus) -> Result<Vec<Attributed>> {
    let ids = corpus.ids(Split::Test);
    let Some(&first) = ids.first() else {
        return Err(CscError::Contract("corpus has no test mixtures".into()));
    };
    let geo = model.geometry(corpus.example(first)?.mixture.len())?;
    let mut out = Vec::new();
    for id in ids {
        let ex = corpus.example(id)?;
        let rec = &corpus.manifest.examples[id];
        let inf = model.infer(store, &geo, &ex.mixture)?;
        let (perm, _) = best_permutation_si_snr(&inf.estimates, &ex.sources)?;
        for (c, &j) in perm.iter().enumerate() {
            out.push(Attributed { speaker: rec.speaker_ids[j], utterance: rec.utterance_ids[j], example: id, z: inf.embeddings[c].clone() });
        }
    }
    Ok(out)
}

/// Enrollment vectors and probe lists per speaker, split by utterance.
pub struct Enrollment {
    pub vectors: BTreeMap<usize, Vec<f64>>,
    pub probes: Vec<Attributed>,
    pub enrolled_utterances: BTreeMap<usize, Vec<usize>>,
}

pub fn enroll(model: &CscModel, store: &ParamStore, embeddings: &[Attributed], policy: &TrialPolicy) -> Result<Enrollment> {
    let mut by_speaker: BTreeMap<usize, Vec<&Attributed>> = BTreeMap::new();
    for a in embeddings {
        by_speaker.entry(a.speaker).or_default().push(a);
    }
    let mut vectors = BTreeMap::new();
    let mut probes = Vec::new();
    let mut enrolled_utterances = BTreeMap::new();
    for (&spk, items) in &by_speaker {
        let mut utts: Vec<usize> = items.iter().map(|a| a.utterance).collect();
        utts.sort_unstable();
        utts.dedup();
        if utts.len() <= policy.enroll_utterances || items.len() < 2 {
            return Err(CscError::Contract(format!("speaker {spk} has too few usable mixtures ({} utterances)", utts.len())));
        }
        let held: Vec<usize> = utts[..policy.enroll_utterances].to_vec();
        let (enr, rest): (Vec<&Attributed>, Vec<&Attributed>) = items.iter().partition(|a| held.contains(&a.utterance));
        let zs: Vec<Vec<f64>> = enr.iter().map(|a| a.z.clone()).collect();
        let e = match policy.enroll_start {
            EnrollStart::Zero => model.gar.enroll(store, &zs)?,
            EnrollStart::Mean => {
                let d = zs[0].len();
                let mut e: Vec<f64> = (0..d).map(|k| zs.iter().map(|z| z[k]).sum::<f64>() / zs.len() as f64).collect();
                for z in &zs {
                    e = model.gar.step(store, z, &e)?;
                }
                e
            }
        };
        vectors.insert(spk, e);
        probes.extend(rest.into_iter().cloned());
        enrolled_utterances.insert(spk, held);
    }
    Ok(Enrollment { vectors, probes, enrolled_utterances })
}

/// All same-speaker (enrollment, probe) pairs plus an equal number of
/// different-speaker pairs drawn without replacement.
pub fn build_trials(enrollment: &Enrollment, seed: u64) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    let mut impostors = Vec::new();
    for p in &enrollment.probes {
        for (&spk, e) in &enrollment.vectors {
            let t = Trial { enroll_speaker: spk, probe_speaker: p.speaker, probe_example: p.example, target: spk == p.speaker, score: score_trial(e, &p.z)? };
            if t.target {
                trials.push(t);
            } else {
                impostors.push(t);
            }
        }
    }
    let n = trials.len();
    if n == 0 || impostors.len() < n {
        return Err(CscError::SingleClass(format!("{n} target and {} candidate non-target trials", impostors.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_TRIALS]));
    let mut pick = sample(&mut rng, impostors.len(), n).into_vec();
    pick.sort_unstable();
    trials.extend(pick.into_iter().map(|i| impostors[i].clone()));
    Ok(trials)
}

/// Full protocol: embed test mixtures, enroll, build and score trials.
pub fn verification_trials(model: &CscModel, store: &ParamStore, corpus: &Corpus, policy: &TrialPolicy) -> Result<Vec<Trial>> {
    let emb = test_embeddings(model, store, corpus)?;
    let enr = enroll(model, store, &emb, policy)?;
    build_trials(&enr, policy.seed)
}

/// Attention curves of one mixture next to the energy of the matched clean
/// source in each key segment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionTrace {
    pub example: usize,
    /// `curves[c][s]`: mean over query rows of the attention on segment `s`
    /// for separated source `c`.
    pub curves: Vec<Vec<f64>>,
    /// `energies[c][s]`: energy of the clean source matched to output `c`
    /// over the samples spanned by segment `s`.
    pub energies: Vec<Vec<f64>>,
    /// Largest deviation of an attention row sum from one.
    pub row_sum_error: f64,
}

impl AttentionTrace {
    /// Fraction of segments where the source with more energy also has the
    /// higher curve. Only meaningful for two sources.
    pub fn energy_dominance(&self) -> f64 {
        let s = self.curves.first().map_or(0, Vec::len);
        if s == 0 || self.curves.len() != 2 {
            return 0.0;
        }
        let agree = (0..s).filter(|&i| (self.curves[0][i] > self.curves[1][i]) == (self.energies[0][i] > self.energies[1][i])).count();
        agree as f64 / s as f64
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let c = self.curves.len();
        let mut header = vec!["segment_index".to_string()];
        header.extend((0..c).map(|i| format!("source_{i}_weight")));
        header.extend((0..c).map(|i| format!("source_{i}_energy")));
        writeln!(w, "{}", header.join(","))?;
        for s in 0..self.curves.first().map_or(0, Vec::len) {
            let mut row = vec![s.to_string()];
            row.extend(self.curves.iter().map(|v| format!("{:e}", v[s])));
            row.extend(self.energies.iter().map(|v| format!("{:e}", v[s])));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Sample span `[start, end)` covered by each segment of the encoder layout.
pub fn segment_spans(geo: &Geometry, window: usize, hop: usize) -> Vec<(usize, usize)> {
    let l = geo.layout;
    (0..l.segments)
        .map(|s| {
            let first = s * l.hop;
            let last = (first + l.k).min(l.frames) - 1;
            (first * hop, (last * hop + window).min(geo.samples))
        })
        .collect()
}

pub fn attention_trace(model: &CscModel, store: &ParamStore, corpus: &Corpus, example: usize) -> Result<AttentionTrace> {
    let ex = corpus.example(example)?;
    let geo = model.geometry(ex.mixture.len())?;
    let inf = model.infer(store, &geo, &ex.mixture)?;
    let curves = inf.attention_curves().ok_or_else(|| CscError::Unsupported("mean pooling has no attention map".into()))?;
    let row_sum_error = inf.attention.iter().flatten().map(max_row_sum_error).fold(0.0, f64::max);
    let (perm, _) = best_permutation_si_snr(&inf.estimates, &ex.sources)?;
    let enc = &model.cfg.encoder;
    let spans = segment_spans(&geo, enc.window, enc.hop);
    let energies = perm.iter().map(|&j| spans.iter().map(|&(a, b)| ex.sources[j][a..b].iter().map(|x| x * x).sum()).collect()).collect();
    Ok(AttentionTrace { example, curves, energies, row_sum_error })
}
