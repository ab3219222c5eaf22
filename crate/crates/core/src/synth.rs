//! Deterministic corpus of harmonic "speakers" and their mixtures.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CscError, Result};

pub const HARMONICS: usize = 10;
pub const MANIFEST_VERSION: u32 = 1;

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p)))
}

const TAG_SPEAKER: u64 = 1;
const TAG_UTTERANCE: u64 = 2;
const TAG_EXAMPLE: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpeaker {
    pub speaker_id: usize,
    /// Fundamental frequency interval in Hz.
    pub fundamental_range: (f64, f64),
    /// Relative harmonic gains, unit L2 norm.
    pub harmonic_amplitudes: Vec<f64>,
    pub vibrato_rate: f64,
    /// Relative frequency excursion of the vibrato.
    pub vibrato_depth: f64,
    pub seed: u64,
}

impl SyntheticSpeaker {
    /// Parameters are a pure function of `(corpus_seed, speaker_id)`.
    pub fn generate(corpus_seed: u64, speaker_id: usize) -> Self {
        let seed = derive_seed(corpus_seed, &[TAG_SPEAKER, speaker_id as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = (85f64.ln() + rng.random::<f64>() * (300f64.ln() - 85f64.ln())).exp();
        let tilt = rng.random_range(0.3..1.2);
        // one broad resonance gives each voice a distinct spectral shape
        let peak = rng.random_range(1.0..HARMONICS as f64);
        let mut amps: Vec<f64> = (1..=HARMONICS)
            .map(|h| {
                let h = h as f64;
                let res = (-(h - peak).powi(2) / 4.0).exp();
                h.powf(-tilt) * (0.25 + rng.random::<f64>()) * (0.3 + 2.0 * res)
            })
            .collect();
        let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= norm);
        Self {
            speaker_id,
            fundamental_range: (center * 0.94, center * 1.06),
            harmonic_amplitudes: amps,
            vibrato_rate: rng.random_range(4.0..7.0),
            vibrato_depth: rng.random_range(0.005..0.02),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: usize,
    pub utterance_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: Vec<f64>,
    /// Scaled sources; the first is the target.
    pub sources: Vec<Vec<f64>>,
    pub speaker_ids: Vec<usize>,
    pub sir_db: f64,
}

fn envelope(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    // syllable-like bursts separated by short pauses
    let mut env = vec![0.03f64; n];
    let mut t = (rng.random_range(0.0..0.08) * sr) as usize;
    while t < n {
        let len = (rng.random_range(0.10..0.28) * sr) as usize;
        let amp = rng.random_range(0.4..1.0);
        for i in 0..len.min(n - t) {
            let w = 0.5 - 0.5 * (TAU * i as f64 / len as f64).cos();
            env[t + i] = env[t + i].max(amp * w);
        }
        t += len + (rng.random_range(0.02..0.12) * sr) as usize;
    }
    env
}

pub fn render_utterance(speaker: &SyntheticSpeaker, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Utterance> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(CscError::Contract(format!("utterance duration must be positive, got {duration_s}")));
    }
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(CscError::Contract("utterance rounds to zero samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(speaker.seed, &[seed]));
    let (lo, hi) = speaker.fundamental_range;
    let f0 = rng.random_range(lo..hi);
    let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.random_range(0.0..TAU)).collect();
    let vib_phase = rng.random_range(0.0..TAU);
    // slow pitch glide across the utterance
    let glide = rng.random_range(-0.04..0.04);
    let env = envelope(&mut rng, n, sr);

    let nyquist = sr / 2.0;
    let mut phi = 0.0;
    let mut samples = Vec::with_capacity(n);
    for (i, e) in env.iter().enumerate() {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + glide * t / duration_s) * (1.0 + speaker.vibrato_depth * (TAU * speaker.vibrato_rate * t + vib_phase).sin());
        let mut s = 0.0;
        for (h, (a, p)) in speaker.harmonic_amplitudes.iter().zip(&phases).enumerate() {
            let k = (h + 1) as f64;
            if k * f >= nyquist {
                break;
            }
            s += a * (k * phi + p).sin();
        }
        samples.push(e * s);
        phi += TAU * f / sr;
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(CscError::DegenerateSignal("rendered utterance is silent".into()));
    }
    samples.iter_mut().for_each(|x| *x *= 0.9 / peak);
    Ok(Utterance { samples, sample_rate, speaker_id: speaker.speaker_id, utterance_id: 0 })
}

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Gain that brings `interferer` to `sir_db` below `target`.
pub fn sir_gain(target: &[f64], interferer: &[f64], sir_db: f64) -> Result<f64> {
    let (pt, pi) = (power(target), power(interferer));
    if !(pt > 0.0 && pi > 0.0) {
        return Err(CscError::DegenerateSignal("zero-power input to mixing".into()));
    }
    Ok((pt / (pi * 10f64.powf(sir_db / 10.0))).sqrt())
}

pub fn mix_at_sir(target: &Utterance, interferer: &Utterance, sir_db: f64) -> Result<MixtureExample> {
    mix_sources(target, &[interferer], sir_db)
}

/// Mixes one target with any number of interferers, each scaled to
/// `sir_db` relative to the target. Summation is the last float op, so
/// `mixture - sum(sources)` is exactly zero.
pub fn mix_sources(target: &Utterance, interferers: &[&Utterance], sir_db: f64) -> Result<MixtureExample> {
    if interferers.is_empty() {
        return Err(CscError::Contract("a mixture needs at least two sources".into()));
    }
    let mut ids = vec![target.speaker_id];
    let mut sources = vec![target.samples.clone()];
    for u in interferers {
        if u.samples.len() != target.samples.len() || u.sample_rate != target.sample_rate {
            return Err(CscError::Contract("mixed utterances must share length and sample rate".into()));
        }
        if ids.contains(&u.speaker_id) {
            return Err(CscError::Contract(format!("speaker {} appears twice in one mixture", u.speaker_id)));
        }
        let g = sir_gain(&target.samples, &u.samples, sir_db)?;
        ids.push(u.speaker_id);
        sources.push(u.samples.iter().map(|x| g * x).collect());
    }
    let mixture = (0..target.samples.len()).map(|t| sources.iter().map(|s| s[t]).sum()).collect();
    Ok(MixtureExample { mixture, sources, speaker_ids: ids, sir_db })
}

pub fn achieved_sir_db(target: &[f64], scaled_interferer: &[f64]) -> f64 {
    10.0 * (power(target) / power(scaled_interferer)).log10()
}

// ----------------------------------------------------------------- corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Training speakers, shared by the train and validation splits.
    pub n_speakers: usize,
    /// Held-out speakers for the test split.
    pub n_test_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Extra utterances per training speaker rendered for validation only.
    pub valid_utterances_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub sources: usize,
    pub sir_min_db: f64,
    pub sir_max_db: f64,
    pub train_mixtures: usize,
    pub valid_mixtures: usize,
    /// Write waveforms as raw f64 files instead of regenerating from seeds.
    pub store_waveforms: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            n_speakers: 8,
            n_test_speakers: 4,
            utterances_per_speaker: 5,
            valid_utterances_per_speaker: 2,
            duration_s: 1.0,
            sample_rate: 8000,
            sources: 2,
            sir_min_db: 0.0,
            sir_max_db: 5.0,
            train_mixtures: 200,
            valid_mixtures: 32,
            store_waveforms: false,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CscError::Config(m));
        if self.n_speakers < 2 {
            return bad(format!("need at least 2 training speakers, got {}", self.n_speakers));
        }
        if self.sources < 2 || self.sources > self.n_speakers {
            return bad(format!("sources must lie in [2, n_speakers], got {}", self.sources));
        }
        if self.n_test_speakers != 0 && self.n_test_speakers < self.sources {
            return bad(format!("{} test speakers cannot fill {}-source mixtures", self.n_test_speakers, self.sources));
        }
        if self.utterances_per_speaker == 0 {
            return bad("utterances_per_speaker must be positive".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) || self.sample_rate == 0 {
            return bad("duration and sample rate must be positive".into());
        }
        if !(self.sir_min_db <= self.sir_max_db && self.sir_min_db.is_finite() && self.sir_max_db.is_finite()) {
            return bad(format!("bad SIR range [{}, {}]", self.sir_min_db, self.sir_max_db));
        }
        Ok(())
    }

    pub fn samples_per_utterance(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utterance_id: usize,
    pub speaker_id: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub example_id: usize,
    pub split: Split,
    /// Utterances in source order; the first is the target.
    pub utterance_ids: Vec<usize>,
    pub speaker_ids: Vec<usize>,
    pub sir_db: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: CorpusConfig,
    pub speakers: Vec<SyntheticSpeaker>,
    pub train_speakers: Vec<usize>,
    pub test_speakers: Vec<usize>,
    pub utterances: Vec<UtteranceRecord>,
    pub examples: Vec<ExampleRecord>,
}

impl Manifest {
    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CscError::Config(format!("manifest: {m}")));
        if self.version != MANIFEST_VERSION {
            return bad(format!("version {} unsupported", self.version));
        }
        self.config.validate()?;
        if self.train_speakers.iter().any(|s| self.test_speakers.contains(s)) {
            return bad("train and test speakers overlap".into());
        }
        for (i, s) in self.speakers.iter().enumerate() {
            let norm: f64 = s.harmonic_amplitudes.iter().map(|a| a * a).sum::<f64>().sqrt();
            if s.speaker_id != i || (norm - 1.0).abs() > 1e-9 {
                return bad(format!("speaker {i} malformed"));
            }
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.utterance_id != i || u.speaker_id >= self.speakers.len() {
                return bad(format!("utterance {i} malformed"));
            }
        }
        for (i, e) in self.examples.iter().enumerate() {
            let ok = e.example_id == i
                && e.utterance_ids.len() == self.config.sources
                && e.speaker_ids.len() == e.utterance_ids.len()
                && e.utterance_ids.iter().zip(&e.speaker_ids).all(|(&u, &s)| self.utterances.get(u).is_some_and(|r| r.speaker_id == s))
                && (self.config.sir_min_db..=self.config.sir_max_db).contains(&e.sir_db);
            let distinct = e.speaker_ids.iter().enumerate().all(|(a, x)| !e.speaker_ids[..a].contains(x));
            if !ok || !distinct {
                return bad(format!("example {i} malformed"));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ExampleRecord> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Example ids grouped by the speakers they contain.
    pub fn examples_by_speaker(&self, split: Split) -> std::collections::BTreeMap<usize, Vec<usize>> {
        let mut map = std::collections::BTreeMap::<usize, Vec<usize>>::new();
        for e in self.split(split) {
            for &s in &e.speaker_ids {
                map.entry(s).or_default().push(e.example_id);
            }
        }
        map
    }
}

fn pick_other(rng: &mut ChaCha8Rng, pool: &[usize], exclude: &[usize]) -> usize {
    loop {
        let s = pool[rng.random_range(0..pool.len())];
        if !exclude.contains(&s) {
            return s;
        }
    }
}

/// Builds the manifest. Each clean utterance of a split is used in turn as
/// the target and mixed with random utterances of other speakers.
pub fn build_corpus(config: &CorpusConfig) -> Result<Manifest> {
    config.validate()?;
    let total = config.n_speakers + config.n_test_speakers;
    let speakers: Vec<_> = (0..total).map(|i| SyntheticSpeaker::generate(config.seed, i)).collect();
    let train_speakers: Vec<usize> = (0..config.n_speakers).collect();
    let test_speakers: Vec<usize> = (config.n_speakers..total).collect();

    let mut utterances = Vec::new();
    let mut add_utts = |spk: &[usize], count: usize, split: Split, offset: usize| {
        for &s in spk {
            for k in 0..count {
                let seed = derive_seed(config.seed, &[TAG_UTTERANCE, s as u64, (offset + k) as u64]);
                utterances.push(UtteranceRecord { utterance_id: utterances.len(), speaker_id: s, seed, split });
            }
        }
    };
    add_utts(&train_speakers, config.utterances_per_speaker, Split::Train, 0);
    add_utts(&train_speakers, config.valid_utterances_per_speaker, Split::Valid, config.utterances_per_speaker);
    add_utts(&test_speakers, config.utterances_per_speaker, Split::Test, 0);

    let mut examples = Vec::new();
    let plan = [
        (Split::Train, &train_speakers, config.train_mixtures),
        (Split::Valid, &train_speakers, config.valid_mixtures),
        (Split::Test, &test_speakers, config.n_test_speakers * config.utterances_per_speaker),
    ];
    for (split, pool, count) in plan {
        let pool_utts: Vec<&UtteranceRecord> = utterances.iter().filter(|u| u.split == split).collect();
        if pool_utts.is_empty() {
            continue;
        }
        for k in 0..count {
            let example_id = examples.len();
            let seed = derive_seed(config.seed, &[TAG_EXAMPLE, example_id as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = pool_utts[k % pool_utts.len()];
            let mut spk = vec![target.speaker_id];
            let mut utt = vec![target.utterance_id];
            for _ in 1..config.sources {
                let s = pick_other(&mut rng, pool, &spk);
                let choices: Vec<&&UtteranceRecord> = pool_utts.iter().filter(|u| u.speaker_id == s).collect();
                utt.push(choices[rng.random_range(0..choices.len())].utterance_id);
                spk.push(s);
            }
            let sir_db = if config.sir_max_db > config.sir_min_db {
                rng.random_range(config.sir_min_db..=config.sir_max_db)
            } else {
                config.sir_min_db
            };
            examples.push(ExampleRecord { example_id, split, utterance_ids: utt, speaker_ids: spk, sir_db, seed });
        }
    }

    let m = Manifest { version: MANIFEST_VERSION, config: config.clone(), speakers, train_speakers, test_speakers, utterances, examples };
    m.validate()?;
    Ok(m)
}

/// Manifest plus rendered clean utterances.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub clean: Vec<Utterance>,
}

impl Corpus {
    pub fn render(manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        let cfg = &manifest.config;
        let clean = manifest
            .utterances
            .iter()
            .map(|r| {
                let mut u = render_utterance(&manifest.speakers[r.speaker_id], cfg.duration_s, cfg.sample_rate, r.seed)?;
                u.utterance_id = r.utterance_id;
                Ok(u)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, clean })
    }

    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        Self::render(build_corpus(config)?)
    }

    /// Replaces rendered utterances with stored waveforms, checking lengths.
    pub fn with_waveforms(manifest: Manifest, waveforms: Vec<Vec<f64>>) -> Result<Self> {
        let n = manifest.config.samples_per_utterance();
        if waveforms.len() != manifest.utterances.len() || waveforms.iter().any(|w| w.len() != n) {
            return Err(CscError::Config("stored waveforms do not match the manifest".into()));
        }
        let clean = manifest
            .utterances
            .iter()
            .zip(waveforms)
            .map(|(r, samples)| Utterance { samples, sample_rate: manifest.config.sample_rate, speaker_id: r.speaker_id, utterance_id: r.utterance_id })
            .collect();
        Ok(Self { manifest, clean })
    }

    pub fn example(&self, id: usize) -> Result<MixtureExample> {
        let rec = self.manifest.examples.get(id).ok_or_else(|| CscError::Contract(format!("no example {id}")))?;
        let target = &self.clean[rec.utterance_ids[0]];
        let others: Vec<&Utterance> = rec.utterance_ids[1..].iter().map(|&u| &self.clean[u]).collect();
        mix_sources(target, &others, rec.sir_db)
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.manifest.split(split).map(|e| e.example_id).collect()
    }
}

#[cfg(test)]
mod tests {
    use rustfft::{num_complex::Complex, FftPlanner};

    use super::*;

    fn spectrum(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf[..x.len() / 2].iter().map(|c| c.norm()).collect()
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn speakers_are_pure_functions_of_seed() {
        assert_eq!(SyntheticSpeaker::generate(7, 3), SyntheticSpeaker::generate(7, 3));
        assert_ne!(SyntheticSpeaker::generate(7, 3), SyntheticSpeaker::generate(8, 3));
        let s = SyntheticSpeaker::generate(7, 3);
        let n: f64 = s.harmonic_amplitudes.iter().map(|a| a * a).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let s = SyntheticSpeaker::generate(1, 0);
        let a = render_utterance(&s, 0.5, 8000, 11).unwrap();
        let b = render_utterance(&s, 0.5, 8000, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 4000);
        let peak = a.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!((peak - 0.9).abs() < 1e-12);
        assert!(render_utterance(&s, 0.0, 8000, 1).is_err());
        assert!(render_utterance(&s, -1.0, 8000, 1).is_err());
    }

    #[test]
    fn same_speaker_spectra_correlate_more_than_different() {
        let (mut same, mut diff) = (0.0, 0.0);
        for i in 0..100u64 {
            let a = SyntheticSpeaker::generate(5, (2 * i) as usize);
            let b = SyntheticSpeaker::generate(5, (2 * i + 1) as usize);
            let x1 = spectrum(&render_utterance(&a, 0.25, 8000, 3 * i).unwrap().samples);
            let x2 = spectrum(&render_utterance(&a, 0.25, 8000, 3 * i + 1).unwrap().samples);
            let y = spectrum(&render_utterance(&b, 0.25, 8000, 3 * i + 2).unwrap().samples);
            same += corr(&x1, &x2);
            diff += corr(&x1, &y);
        }
        assert!(same > diff, "same {same} vs diff {diff}");
    }

    fn utt(samples: Vec<f64>, speaker_id: usize) -> Utterance {
        Utterance { samples, sample_rate: 8000, speaker_id, utterance_id: 0 }
    }

    #[test]
    fn mixing_gains() {
        let a = utt(vec![1.0, -1.0, 1.0, -1.0], 0);
        let b = utt(vec![-1.0, -1.0, 1.0, 1.0], 1);
        let m = mix_at_sir(&a, &b, 0.0).unwrap();
        assert_eq!(m.sources[1], b.samples);
        let m = mix_at_sir(&a, &b, 20.0 * 2f64.log10()).unwrap();
        for (x, y) in m.sources[1].iter().zip(&b.samples) {
            assert!((x - 0.5 * y).abs() < 1e-15);
        }
        assert!(mix_at_sir(&a, &utt(vec![0.0; 4], 1), 0.0).is_err());
        assert!(mix_at_sir(&a, &utt(vec![1.0; 4], 0), 0.0).is_err());
        assert!(mix_at_sir(&a, &utt(vec![1.0; 3], 1), 0.0).is_err());
    }

    #[test]
    fn mixture_is_exact_sum_and_sir_is_achieved() {
        let cfg = CorpusConfig { duration_s: 0.1, train_mixtures: 20, valid_mixtures: 4, ..Default::default() };
        let corpus = Corpus::generate(&cfg).unwrap();
        for e in &corpus.manifest.examples {
            let m = corpus.example(e.example_id).unwrap();
            for t in 0..m.mixture.len() {
                assert_eq!(m.mixture[t] - (m.sources[0][t] + m.sources[1][t]), 0.0);
            }
            assert!((achieved_sir_db(&m.sources[0], &m.sources[1]) - e.sir_db).abs() < 1e-9);
        }
    }

    #[test]
    fn corpus_structure() {
        let cfg = CorpusConfig { duration_s: 0.05, train_mixtures: 1000, ..Default::default() };
        let m = build_corpus(&cfg).unwrap();
        assert!(m.train_speakers.iter().all(|s| !m.test_speakers.contains(s)));
        for e in m.split(Split::Test) {
            assert!(e.speaker_ids.iter().all(|s| m.test_speakers.contains(s)));
        }
        for e in m.split(Split::Train).chain(m.split(Split::Valid)) {
            assert!(e.speaker_ids.iter().all(|s| m.train_speakers.contains(s)));
        }
        let sirs: Vec<f64> = m.split(Split::Train).map(|e| e.sir_db).collect();
        assert_eq!(sirs.len(), 1000);
        let mean = sirs.iter().sum::<f64>() / 1000.0;
        assert!(sirs.iter().all(|&s| (0.0..=5.0).contains(&s)));
        assert!((2.3..=2.7).contains(&mean), "mean SIR {mean}");

        let again = serde_json::to_vec(&build_corpus(&cfg).unwrap()).unwrap();
        assert_eq!(serde_json::to_vec(&m).unwrap(), again);
    }

    #[test]
    fn speaker_grouping_matches_generator() {
        let cfg = CorpusConfig { duration_s: 0.05, ..Default::default() };
        let m = build_corpus(&cfg).unwrap();
        let groups = m.examples_by_speaker(Split::Train);
        for (spk, ids) in groups {
            for id in ids {
                let e = &m.examples[id];
                assert!(e.speaker_ids.contains(&spk));
                let pos = e.speaker_ids.iter().position(|&s| s == spk).unwrap();
                assert_eq!(m.utterances[e.utterance_ids[pos]].speaker_id, spk);
            }
        }
    }

    #[test]
    fn config_errors() {
        let cfg = CorpusConfig { n_speakers: 1, ..Default::default() };
        assert!(matches!(build_corpus(&cfg), Err(CscError::Config(_))));
        let cfg = CorpusConfig { sources: 3, n_test_speakers: 2, ..Default::default() };
        assert!(matches!(build_corpus(&cfg), Err(CscError::Config(_))));
    }
}
