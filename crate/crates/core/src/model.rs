//! The full network: shared bottom, separation and speaker heads, cross
//! attention pooling, FiLM-coupled masking and the waveform decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{row_mean, PoolKind, Qkv};
use crate::autodiff::{Tape, Tensor, Var};
use crate::csc::{AlphaParam, GarCell, LossKind};
use crate::encoder::{BlockStack, EncoderConfig, Film, Geometry, WaveformDecoder, WaveformEncoder};
use crate::error::{CscError, Result};
use crate::params::{glorot, Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of separated sources C.
    pub sources: usize,
    pub alpha_init: f64,
    pub pool: PoolKind,
    pub loss: LossKind,
    /// Softmax temperature of the attention logits.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            sources: 2,
            alpha_init: 1.0,
            pool: PoolKind::Attention,
            loss: LossKind::Csc,
            temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.sources == 0 {
            return Err(CscError::Config("sources must be at least 1".into()));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(CscError::Config("alpha_init must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CscError::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// How the separation masks are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Learned,
    /// Every mask fixed at one, turning the model into an autoencoder.
    Ones,
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize) -> Self {
        Self {
            w: store.add(format!("{prefix}.weight"), glorot(rng, d, d)),
            b: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn sigmoid(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        let y = tape.add_rowvec(y, p[self.b])?;
        tape.sigmoid(y)
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Separation {
    /// One waveform per source, each as long as the input.
    pub estimates: Vec<Var>,
    /// One `[D]` separative embedding per source.
    pub embeddings: Vec<Var>,
    /// `[S, S]` attention map per source (attention pooling only).
    pub attention: Vec<Option<Var>>,
    /// `[S*K, D]` separation mask per source.
    pub masks: Vec<Var>,
    /// Encoder output `[F, D]`.
    pub encoded: Var,
}

/// Plain values from an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub estimates: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
    pub attention: Vec<Option<Tensor>>,
}

impl Inference {
    /// Per-source mean over query rows of the attention map: one weight per
    /// key segment.
    pub fn attention_curves(&self) -> Option<Vec<Vec<f64>>> {
        self.attention.iter().map(|a| a.as_ref().map(row_mean)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CscModel {
    pub cfg: ModelConfig,
    pub encoder: WaveformEncoder,
    pub decoder: WaveformDecoder,
    pub g_enc: BlockStack,
    pub g_ss: BlockStack,
    pub g_spk: BlockStack,
    pre_masks: Vec<Dense>,
    masks: Vec<Dense>,
    pub qkv: Qkv,
    pub film: Film,
    pub alpha: AlphaParam,
    pub gar: GarCell,
}

impl CscModel {
    /// Registers every parameter in `store` in a fixed order.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let d = e.feature_dim;
        let encoder = WaveformEncoder::new(store, rng, e);
        let decoder = WaveformDecoder::new(store, rng, e);
        let g_enc = BlockStack::new(store, rng, "g_enc", e, e.blocks_enc);
        let g_ss = BlockStack::new(store, rng, "g_ss", e, e.blocks_ss);
        let g_spk = BlockStack::new(store, rng, "g_spk", e, e.blocks_spk);
        let pre_masks = (0..cfg.sources).map(|c| Dense::new(store, rng, &format!("spk_gate.{c}"), d)).collect();
        let masks = (0..cfg.sources).map(|c| Dense::new(store, rng, &format!("mask.{c}"), d)).collect();
        let mut qkv = Qkv::new(store, rng, "attn", d);
        qkv.temperature = cfg.temperature;
        let film = Film::new(store, "film", d);
        let alpha = AlphaParam::new(store, cfg.alpha_init);
        let gar = GarCell::new(store, rng, d);
        Ok(Self { cfg: cfg.clone(), encoder, decoder, g_enc, g_ss, g_spk, pre_masks, masks, qkv, film, alpha, gar })
    }

    pub fn sources(&self) -> usize {
        self.cfg.sources
    }

    pub fn geometry(&self, samples: usize) -> Result<Geometry> {
        Geometry::new(&self.cfg.encoder, samples)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, geo: &Geometry, x: &[f64], mode: MaskMode) -> Result<Separation> {
        let (s, k) = (geo.layout.segments, geo.layout.k);
        let d = self.cfg.encoder.feature_dim;

        let encoded = self.encoder.forward(tape, p, geo, x)?;
        let seg = tape.linear_map(encoded, geo.segment.clone())?;
        let seg_flat = tape.reshape(seg, &[s * k, d])?;
        let shared = self.g_enc.forward(tape, p, geo, seg)?;
        let speech = self.g_ss.forward(tape, p, geo, shared)?;
        let shared_flat = tape.reshape(shared, &[s * k, d])?;
        let speech_flat = tape.reshape(speech, &[s * k, d])?;
        let queries = tape.linear_map(shared, geo.pool.clone())?;

        let mut out = Separation { estimates: vec![], embeddings: vec![], attention: vec![], masks: vec![], encoded };
        for c in 0..self.cfg.sources {
            // speaker-space features of source c from gated shared features
            let gate = self.pre_masks[c].sigmoid(tape, p, speech_flat)?;
            let gated = tape.mul(gate, shared_flat)?;
            let gated = tape.reshape(gated, &[s, k, d])?;
            let spk = self.g_spk.forward(tape, p, geo, gated)?;
            let keys = tape.linear_map(spk, geo.pool.clone())?;
            let (z, a) = self.qkv.embed(tape, p, self.cfg.pool, queries, keys)?;

            let mask = match mode {
                MaskMode::Learned => {
                    let h = self.film.modulate(tape, p, speech_flat, z)?;
                    self.masks[c].sigmoid(tape, p, h)?
                }
                MaskMode::Ones => tape.constant(&[s * k, d], vec![1.0; s * k * d])?,
            };
            let masked = tape.mul(mask, seg_flat)?;
            let masked = tape.reshape(masked, &[s, k, d])?;
            let feats = tape.linear_map(masked, geo.overlap_add.clone())?;
            out.estimates.push(self.decoder.forward(tape, p, geo, feats)?);
            out.embeddings.push(z);
            out.attention.push(a);
            out.masks.push(mask);
        }
        Ok(out)
    }

    /// Forward pass with frozen parameters, returning plain values.
    pub fn infer(&self, store: &ParamStore, geo: &Geometry, x: &[f64]) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape)?;
        let sep = self.forward(&mut tape, &p, geo, x, MaskMode::Learned)?;
        Ok(Inference {
            estimates: sep.estimates.iter().map(|&v| tape.value(v).to_vec()).collect(),
            embeddings: sep.embeddings.iter().map(|&v| tape.value(v).to_vec()).collect(),
            attention: sep.attention.iter().map(|a| a.map(|v| tape.tensor(v))).collect(),
        })
    }

    /// Separated waveforms only.
    pub fn separate(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let geo = self.geometry(x.len())?;
        Ok(self.infer(store, &geo, x)?.estimates)
    }

    /// Parameters of the shared bottom (waveform encoder and g_enc).
    pub fn shared_bottom_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| {
                let n = store.name(id);
                n.starts_with("g_enc.") || n == "front.encoder.weight"
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::csc::{csc_loss, reg_loss, GlobalSpeakerBank};
    use crate::pit::{si_snr, si_snr_var};
    use crate::synth::{render_utterance, SyntheticSpeaker};

    fn small_cfg(sources: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { feature_dim: 8, segment_len: 8, window: 8, hop: 4, blocks_enc: 1, blocks_spk: 1, blocks_ss: 1, q: 16 },
            sources,
            ..ModelConfig::default()
        }
    }

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let spk = SyntheticSpeaker::generate(seed, 0);
        let mut u = render_utterance(&spk, n as f64 / 8000.0, 8000, seed).unwrap().samples;
        u.resize(n, 0.0);
        u
    }

    #[test]
    fn output_contract() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CscModel::new(&small_cfg(2), &mut store, &mut rng).unwrap();
        let x = signal(400, 1);
        let geo = model.geometry(x.len()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let sep = model.forward(&mut tape, &p, &geo, &x, MaskMode::Learned).unwrap();
        assert_eq!(sep.estimates.len(), 2);
        for &e in &sep.estimates {
            assert_eq!(tape.value(e).len(), x.len());
        }
        for &m in &sep.masks {
            assert!(tape.value(m).iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for a in sep.attention.iter().flatten() {
            assert!(crate::attention::max_row_sum_error(&tape.tensor(*a)) < 1e-9);
        }
        let inf = model.infer(&store, &geo, &x).unwrap();
        let curves = inf.attention_curves().unwrap();
        assert_eq!(curves[0].len(), geo.layout.segments);
        assert!((curves[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(inf.estimates[1], tape.value(sep.estimates[1]));
    }

    #[test]
    fn shared_bottom_receives_both_losses() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = CscModel::new(&small_cfg(2), &mut store, &mut rng).unwrap();
        let bank = GlobalSpeakerBank::new(&mut rng, 3, 8);
        let x = signal(400, 3);
        let r = signal(400, 4);
        let geo = model.geometry(x.len()).unwrap();
        let shared = model.shared_bottom_params(&store);
        assert!(shared.len() > 1);

        let grad_norm = |speech: bool| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape).unwrap();
            let sep = model.forward(&mut tape, &p, &geo, &x, MaskMode::Learned).unwrap();
            let loss = if speech {
                let rv = tape.constant(&[r.len()], r.clone()).unwrap();
                let s = si_snr_var(&mut tape, sep.estimates[0], rv).unwrap();
                tape.neg(s).unwrap()
            } else {
                let ev = bank.bind(&mut tape, &p, &model.gar).unwrap();
                let a = model.alpha.var(&mut tape, &p).unwrap();
                let zs = [(sep.embeddings[0], 0), (sep.embeddings[1], 2)];
                let l = csc_loss(&mut tape, &zs, &ev, a).unwrap();
                let reg = reg_loss(&mut tape, &[sep.embeddings[0], sep.embeddings[1]]).unwrap();
                tape.add(l, reg).unwrap()
            };
            let g = tape.backward(loss).unwrap();
            shared.iter().map(|&id| g.get_or_zeros(p[id], store.get(id).len()).iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        };
        assert!(grad_norm(true) > 0.0);
        assert!(grad_norm(false) > 0.0);
    }

    #[test]
    fn autoencoder_with_unit_masks() {
        let cfg = ModelConfig {
            encoder: EncoderConfig { feature_dim: 16, blocks_enc: 0, blocks_ss: 0, blocks_spk: 0, ..small_cfg(1).encoder },
            ..small_cfg(1)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = CscModel::new(&cfg, &mut store, &mut rng).unwrap();
        let x = signal(800, 6);
        let geo = model.geometry(x.len()).unwrap();
        let front = [model.encoder.weight, model.decoder.weight];
        let mut opt = crate::train::Adam::new(&store, 0.03, 0.9, 0.999, 1e-8);
        let train_only: Vec<bool> = store.ids().map(|id| front.contains(&id)).collect();
        for _ in 0..50 {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape).unwrap();
            let sep = model.forward(&mut tape, &p, &geo, &x, MaskMode::Ones).unwrap();
            let xv = tape.constant(&[x.len()], x.clone()).unwrap();
            // squared error, since SI-SNR cannot see a sign flip
            let diff = tape.sub(sep.estimates[0], xv).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let loss = tape.mean(sq).unwrap();
            let g = tape.backward(loss).unwrap();
            store.zero_grads();
            store.absorb_grads(&p, &g).unwrap();
            opt.step_masked(&mut store, 1.0, &train_only).unwrap();
        }
        let est = model.separate(&store, &x).unwrap().remove(0);
        let n = x.len() as f64;
        let (mx, me) = (x.iter().sum::<f64>() / n, est.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(&est).map(|(a, b)| (a - mx) * (b - me)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let ve: f64 = est.iter().map(|b| (b - me).powi(2)).sum();
        let corr = cov / (vx * ve).sqrt();
        assert!(corr > 0.99, "correlation {corr}, si-snr {}", si_snr(&est, &x).unwrap());
    }

    #[test]
    fn mean_pool_has_no_attention() {
        let cfg = ModelConfig { pool: PoolKind::Mean, ..small_cfg(2) };
        let mut store = ParamStore::new();
        let model = CscModel::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let x = signal(300, 8);
        let inf = model.infer(&store, &model.geometry(x.len()).unwrap(), &x).unwrap();
        assert!(inf.attention.iter().all(Option::is_none));
        assert!(inf.attention_curves().is_none());
    }
}
