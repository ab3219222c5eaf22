//! Waveform front end, 50%-overlap segmentation, the residual dual-axis
//! recurrent block used by every encoder stack, and FiLM conditioning.
//!
//! Feature maps are stored time-major: an encoded waveform is `[F, D]`
//! (one row per frame) and a segmented map is `[S, K, D]`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseMap, SparseMapBuilder, Tape, Tensor, Var};
use crate::error::{CscError, Result};
use crate::params::{glorot, uniform, Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature dimension D.
    pub feature_dim: usize,
    /// Segment length K (frames per segment); must be even.
    pub segment_len: usize,
    /// Waveform frame length in samples.
    pub window: usize,
    /// Frame hop in samples.
    pub hop: usize,
    pub blocks_enc: usize,
    pub blocks_spk: usize,
    pub blocks_ss: usize,
    /// Group count kept in configs; the recurrent block does not use it.
    #[serde(default = "default_q")]
    pub q: usize,
}

fn default_q() -> usize {
    16
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { feature_dim: 16, segment_len: 16, window: 8, hop: 4, blocks_enc: 2, blocks_spk: 1, blocks_ss: 1, q: 16 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CscError::Config(m.to_string()));
        if self.feature_dim == 0 || self.segment_len == 0 || self.window == 0 || self.hop == 0 {
            return bad("feature_dim, segment_len, window and hop must be positive");
        }
        if self.hop > self.window {
            return bad("hop must not exceed window");
        }
        if self.segment_len % 2 != 0 {
            return bad("segment_len must be even");
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        (self.feature_dim / 2).max(1)
    }
}

// ---------------------------------------------------------------- framing

pub fn frame_count(len: usize, window: usize, hop: usize) -> Result<usize> {
    if len < window {
        return Err(CscError::Contract(format!("waveform of {len} samples is shorter than the {window}-sample window")));
    }
    Ok((len - window) / hop + 1)
}

/// Waveform `[T]` to frames `[F, window]`.
pub fn framing_map(len: usize, window: usize, hop: usize) -> Result<SparseMap> {
    let f = frame_count(len, window, hop)?;
    let index: Vec<Option<usize>> = (0..f).flat_map(|i| (0..window).map(move |w| Some(i * hop + w))).collect();
    SparseMap::gather(len, &[f, window], &index)
}

/// Frames `[F, window]` summed back into a waveform `[T]`.
pub fn frame_overlap_add_map(len: usize, window: usize, hop: usize) -> Result<SparseMap> {
    let f = frame_count(len, window, hop)?;
    let mut b = SparseMapBuilder::new(f * window, &[len]);
    for t in 0..len {
        let lo = (t + 1).saturating_sub(window).div_ceil(hop);
        let hi = (t / hop).min(f - 1);
        b.row((lo..=hi).filter(|&i| t >= i * hop && t - i * hop < window).map(|i| (i * window + (t - i * hop), 1.0)));
    }
    b.build()
}

// ----------------------------------------------------------- segmentation

/// Geometry of 50%-overlap chunking of `frames` rows into segments of `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub frames: usize,
    pub k: usize,
    pub hop: usize,
    pub segments: usize,
}

impl SegmentLayout {
    pub fn new(frames: usize, k: usize) -> Result<Self> {
        if k == 0 || k % 2 != 0 {
            return Err(CscError::Config(format!("segment length {k} must be even and positive")));
        }
        if frames == 0 {
            return Err(CscError::Contract("cannot segment an empty feature map".into()));
        }
        let hop = k / 2;
        Ok(Self { frames, k, hop, segments: frames.div_ceil(hop) })
    }

    /// `[F, D]` to zero-padded `[S, K, D]`.
    pub fn segment_map(&self, d: usize) -> Result<SparseMap> {
        let mut index = Vec::with_capacity(self.segments * self.k * d);
        for s in 0..self.segments {
            for j in 0..self.k {
                let f = s * self.hop + j;
                for c in 0..d {
                    index.push((f < self.frames).then_some(f * d + c));
                }
            }
        }
        SparseMap::gather(self.frames * d, &[self.segments, self.k, d], &index)
    }

    /// `[S, K, D]` back to `[F, D]`, averaging the overlapping entries and
    /// dropping the padding.
    pub fn overlap_add_map(&self, d: usize) -> Result<SparseMap> {
        let mut b = SparseMapBuilder::new(self.segments * self.k * d, &[self.frames, d]);
        for f in 0..self.frames {
            let owners: Vec<(usize, usize)> = (0..self.segments)
                .filter(|&s| f >= s * self.hop && f - s * self.hop < self.k)
                .map(|s| (s, f - s * self.hop))
                .collect();
            let w = 1.0 / owners.len() as f64;
            for c in 0..d {
                b.row(owners.iter().map(|&(s, j)| ((s * self.k + j) * d + c, w)));
            }
        }
        b.build()
    }

    /// Mean over the K axis: `[S, K, D]` to `[S, D]`.
    pub fn pool_map(&self, d: usize) -> Result<SparseMap> {
        let w = 1.0 / self.k as f64;
        let mut b = SparseMapBuilder::new(self.segments * self.k * d, &[self.segments, d]);
        for s in 0..self.segments {
            for c in 0..d {
                b.row((0..self.k).map(|j| ((s * self.k + j) * d + c, w)));
            }
        }
        b.build()
    }
}

/// Segments an `[F, D]` tensor into `[S, K, D]`.
pub fn segment(f: &Tensor, k: usize) -> Result<Tensor> {
    let (frames, d) = (f.rows(), f.cols());
    let layout = SegmentLayout::new(frames, k)?;
    let out = layout.segment_map(d)?.apply(f.data());
    Tensor::new(&[layout.segments, k, d], out)
}

/// Inverse of [`segment`] for a map that originally had `frames` rows.
pub fn overlap_add(x: &Tensor, frames: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(CscError::Shape { op: "overlap_add", detail: format!("expected [S, K, D], got {s:?}") });
    }
    let layout = SegmentLayout::new(frames, s[1])?;
    if layout.segments != s[0] {
        return Err(CscError::Shape { op: "overlap_add", detail: format!("{} segments cannot cover {frames} frames", s[0]) });
    }
    let out = layout.overlap_add_map(s[2])?.apply(x.data());
    Tensor::new(&[frames, s[2]], out)
}

/// Tape-side sparse maps for one input length, built once per forward.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub samples: usize,
    pub frames: usize,
    pub layout: SegmentLayout,
    pub framing: Arc<SparseMap>,
    pub frame_ola: Arc<SparseMap>,
    pub segment: Arc<SparseMap>,
    pub overlap_add: Arc<SparseMap>,
    pub pool: Arc<SparseMap>,
    /// `[S, K, X]` <-> `[K, S, X]` for X in {D, 2H}.
    pub to_intra: Arc<SparseMap>,
    pub from_intra: Arc<SparseMap>,
}

impl Geometry {
    pub fn new(cfg: &EncoderConfig, samples: usize) -> Result<Self> {
        let frames = frame_count(samples, cfg.window, cfg.hop)?;
        let layout = SegmentLayout::new(frames, cfg.segment_len)?;
        let d = cfg.feature_dim;
        let h2 = 2 * cfg.hidden();
        let (s, k) = (layout.segments, layout.k);
        Ok(Self {
            samples,
            frames,
            layout,
            framing: Arc::new(framing_map(samples, cfg.window, cfg.hop)?),
            frame_ola: Arc::new(frame_overlap_add_map(samples, cfg.window, cfg.hop)?),
            segment: Arc::new(layout.segment_map(d)?),
            overlap_add: Arc::new(layout.overlap_add_map(d)?),
            pool: Arc::new(layout.pool_map(d)?),
            to_intra: Arc::new(SparseMap::permute3([s, k, d], [1, 0, 2])?),
            from_intra: Arc::new(SparseMap::permute3([k, s, h2], [1, 0, 2])?),
        })
    }
}

// ---------------------------------------------------------- front end

/// Learnable frame-wise linear map to D features followed by rectification.
#[derive(Clone, Debug)]
pub struct WaveformEncoder {
    pub weight: ParamId,
}

impl WaveformEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Self {
        Self { weight: store.add("front.encoder.weight", glorot(rng, cfg.window, cfg.feature_dim)) }
    }

    /// Waveform to `[F, D]` pre-activations (before rectification).
    pub fn preactivation(&self, tape: &mut Tape, p: &Bound, geo: &Geometry, x: &[f64]) -> Result<Var> {
        if x.len() != geo.samples {
            return Err(CscError::Contract(format!("geometry built for {} samples, got {}", geo.samples, x.len())));
        }
        let wave = tape.constant(&[x.len()], x.to_vec())?;
        let frames = tape.linear_map(wave, geo.framing.clone())?;
        tape.matmul(frames, p[self.weight])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, geo: &Geometry, x: &[f64]) -> Result<Var> {
        let pre = self.preactivation(tape, p, geo, x)?;
        tape.relu(pre)
    }
}

/// Frame-wise linear map from D features back to waveform frames, then
/// overlap-added into samples.
#[derive(Clone, Debug)]
pub struct WaveformDecoder {
    pub weight: ParamId,
}

impl WaveformDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Self {
        Self { weight: store.add("front.decoder.weight", glorot(rng, cfg.feature_dim, cfg.window)) }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, geo: &Geometry, feats: Var) -> Result<Var> {
        let frames = tape.matmul(feats, p[self.weight])?;
        tape.linear_map(frames, geo.frame_ola.clone())
    }
}

// ------------------------------------------------------- recurrent block

/// Parameters of one gated recurrent unit direction.
#[derive(Clone, Debug)]
pub struct GruParams {
    w_z: ParamId,
    w_r: ParamId,
    w_n: ParamId,
    u_z: ParamId,
    u_r: ParamId,
    u_n: ParamId,
    b_z: ParamId,
    b_r: ParamId,
    b_n: ParamId,
    b_hn: ParamId,
}

impl GruParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut m = |name: &str, shape: &[usize]| store.add(format!("{prefix}.{name}"), uniform(rng, shape, bound));
        Self {
            w_z: m("w_z", &[input, hidden]),
            w_r: m("w_r", &[input, hidden]),
            w_n: m("w_n", &[input, hidden]),
            u_z: m("u_z", &[hidden, hidden]),
            u_r: m("u_r", &[hidden, hidden]),
            u_n: m("u_n", &[hidden, hidden]),
            b_z: m("b_z", &[hidden]),
            b_r: m("b_r", &[hidden]),
            b_n: m("b_n", &[hidden]),
            b_hn: m("b_hn", &[hidden]),
        }
    }

    /// Runs over `steps` time steps of a `[steps * batch, in]` input laid out
    /// step-major. Returns `[steps * batch, hidden]` in the same order.
    pub fn run(&self, tape: &mut Tape, p: &Bound, x: Var, steps: usize, batch: usize, reverse: bool) -> Result<Var> {
        let hidden = tape.shape(p[self.u_z])[0];
        let xz = tape.matmul(x, p[self.w_z])?;
        let xz = tape.add_rowvec(xz, p[self.b_z])?;
        let xr = tape.matmul(x, p[self.w_r])?;
        let xr = tape.add_rowvec(xr, p[self.b_r])?;
        let xn = tape.matmul(x, p[self.w_n])?;
        let xn = tape.add_rowvec(xn, p[self.b_n])?;
        let mut h = tape.constant(&[batch, hidden], vec![0.0; batch * hidden])?;
        let mut outs = vec![h; steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
        for t in order {
            let zx = tape.slice_rows(xz, t * batch, batch)?;
            let zh = tape.matmul(h, p[self.u_z])?;
            let z = tape.add(zx, zh)?;
            let z = tape.sigmoid(z)?;
            let rx = tape.slice_rows(xr, t * batch, batch)?;
            let rh = tape.matmul(h, p[self.u_r])?;
            let r = tape.add(rx, rh)?;
            let r = tape.sigmoid(r)?;
            let nx = tape.slice_rows(xn, t * batch, batch)?;
            let nh = tape.matmul(h, p[self.u_n])?;
            let nh = tape.add_rowvec(nh, p[self.b_hn])?;
            let rn = tape.mul(r, nh)?;
            let n = tape.add(nx, rn)?;
            let n = tape.tanh(n)?;
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(n, zd)?;
            outs[t] = h;
        }
        tape.concat_rows(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct BiGru {
    fwd: GruParams,
    bwd: GruParams,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            fwd: GruParams::new(store, rng, &format!("{prefix}.fwd"), input, hidden),
            bwd: GruParams::new(store, rng, &format!("{prefix}.bwd"), input, hidden),
        }
    }

    pub fn run(&self, tape: &mut Tape, p: &Bound, x: Var, steps: usize, batch: usize) -> Result<Var> {
        let f = self.fwd.run(tape, p, x, steps, batch, false)?;
        let b = self.bwd.run(tape, p, x, steps, batch, true)?;
        tape.concat_cols(f, b)
    }
}

/// Residual block: layer norm, bidirectional GRU along the intra-segment
/// axis, bidirectional GRU along the inter-segment axis, linear projection.
/// The projection starts at zero so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct SequenceBlock {
    ln_gain: ParamId,
    ln_bias: ParamId,
    intra: BiGru,
    inter: BiGru,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl SequenceBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.feature_dim;
        let h = cfg.hidden();
        Self {
            ln_gain: store.add(format!("{prefix}.ln.gain"), Tensor::full(&[d], 1.0)),
            ln_bias: store.add(format!("{prefix}.ln.bias"), Tensor::zeros(&[d])),
            intra: BiGru::new(store, rng, &format!("{prefix}.intra"), d, h),
            inter: BiGru::new(store, rng, &format!("{prefix}.inter"), 2 * h, h),
            proj_w: store.add(format!("{prefix}.proj.weight"), Tensor::zeros(&[2 * h, d])),
            proj_b: store.add(format!("{prefix}.proj.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn proj_weight(&self) -> ParamId {
        self.proj_w
    }

    /// `x` is `[S, K, D]`; the output has the same shape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, geo: &Geometry, x: Var) -> Result<Var> {
        let (s, k) = (geo.layout.segments, geo.layout.k);
        let d = tape.shape(x)[2];
        let flat = tape.reshape(x, &[s * k, d])?;
        let normed = tape.layer_norm_rows(flat, 1e-5)?;
        let normed = tape.mul_rowvec(normed, p[self.ln_gain])?;
        let normed = tape.add_rowvec(normed, p[self.ln_bias])?;

        let intra_in = tape.linear_map(normed, geo.to_intra.clone())?;
        let intra_in = tape.reshape(intra_in, &[k * s, d])?;
        let intra = self.intra.run(tape, p, intra_in, k, s)?;
        let h2 = tape.shape(intra)[1];
        let intra = tape.reshape(intra, &[k, s, h2])?;
        let inter_in = tape.linear_map(intra, geo.from_intra.clone())?;
        let inter_in = tape.reshape(inter_in, &[s * k, h2])?;
        let inter = self.inter.run(tape, p, inter_in, s, k)?;

        let out = tape.matmul(inter, p[self.proj_w])?;
        let out = tape.add_rowvec(out, p[self.proj_b])?;
        let out = tape.add(out, flat)?;
        tape.reshape(out, &[s, k, d])
    }
}

/// A stack of blocks applied in order.
#[derive(Clone, Debug)]
pub struct BlockStack {
    pub blocks: Vec<SequenceBlock>,
}

impl BlockStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &EncoderConfig, count: usize) -> Self {
        Self { blocks: (0..count).map(|i| SequenceBlock::new(store, rng, &format!("{prefix}.{i}"), cfg)).collect() }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, geo: &Geometry, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, p, geo, x)?;
        }
        Ok(x)
    }
}

// ------------------------------------------------------------------- FiLM

/// Feature-wise affine conditioning `h' = gamma(z) * h + beta(z)`, with
/// gamma and beta affine in z. Initialized to the identity map.
#[derive(Clone, Debug)]
pub struct Film {
    pub w_gamma: ParamId,
    pub b_gamma: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
}

impl Film {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            w_gamma: store.add(format!("{prefix}.w_gamma"), Tensor::zeros(&[d, d])),
            b_gamma: store.add(format!("{prefix}.b_gamma"), Tensor::full(&[d], 1.0)),
            w_beta: store.add(format!("{prefix}.w_beta"), Tensor::zeros(&[d, d])),
            b_beta: store.add(format!("{prefix}.b_beta"), Tensor::zeros(&[d])),
        }
    }

    /// `h` has D as its last axis; `z` is `[D]`.
    pub fn modulate(&self, tape: &mut Tape, p: &Bound, h: Var, z: Var) -> Result<Var> {
        let d = *tape.shape(h).last().unwrap();
        if tape.value(z).len() != d {
            return Err(CscError::Shape { op: "film", detail: format!("embedding dim {} vs feature dim {d}", tape.value(z).len()) });
        }
        let zrow = tape.reshape(z, &[1, d])?;
        let gamma = tape.matmul(zrow, p[self.w_gamma])?;
        let gamma = tape.reshape(gamma, &[d])?;
        let gamma = tape.add(gamma, p[self.b_gamma])?;
        let beta = tape.matmul(zrow, p[self.w_beta])?;
        let beta = tape.reshape(beta, &[d])?;
        let beta = tape.add(beta, p[self.b_beta])?;
        let scaled = tape.mul_rowvec(h, gamma)?;
        tape.add_rowvec(scaled, beta)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::{check, Coords};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { feature_dim: 4, segment_len: 4, window: 4, hop: 2, blocks_enc: 1, blocks_spk: 1, blocks_ss: 1, q: 16 }
    }

    #[test]
    fn frame_count_arithmetic() {
        assert_eq!(frame_count(8000, 8, 4).unwrap(), 1999);
        assert_eq!(frame_count(8, 8, 4).unwrap(), 1);
        assert_eq!(frame_count(13, 4, 2).unwrap(), (13 - 4) / 2 + 1);
        assert!(frame_count(7, 8, 4).is_err());
    }

    #[test]
    fn zero_waveform_encodes_to_zero() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::new();
        let enc = WaveformEncoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg);
        let geo = Geometry::new(&cfg, 64).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let y = enc.forward(&mut tape, &p, &geo, &[0.0; 64]).unwrap();
        assert_eq!(tape.shape(y), &[frame_count(64, 8, 4).unwrap(), 16]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_count_when_frames_equal_k() {
        let f = Tensor::matrix(8, 2, (0..16).map(f64::from).collect()).unwrap();
        let s = segment(&f, 8).unwrap();
        assert_eq!(s.shape(), &[2, 8, 2]);
        assert!(segment(&f, 5).is_err());
    }

    #[test]
    fn segment_round_trip_exact() {
        let f = Tensor::matrix(37, 3, (0..111).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let back = overlap_add(&segment(&f, 6).unwrap(), 37).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn segment_round_trip_property(
            k in prop::sample::select(vec![4usize, 8, 16]),
            frames in 1usize..80,
            d in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = uniform(&mut rng, &[frames, d], 3.0);
            let back = overlap_add(&segment(&f, k).unwrap(), frames).unwrap();
            for (a, b) in back.data().iter().zip(f.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_overlap_add_is_adjoint_of_framing() {
        // <framing(x), y> == <x, ola(y)>
        let (len, w, h) = (23, 4, 2);
        let fr = framing_map(len, w, h).unwrap();
        let ola = frame_overlap_add_map(len, w, h).unwrap();
        let x: Vec<f64> = (0..len).map(|i| (i as f64).cos()).collect();
        let y: Vec<f64> = (0..fr.out_shape().iter().product::<usize>()).map(|i| (i as f64 * 0.3).sin()).collect();
        let lhs: f64 = fr.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(ola.apply(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn block_is_shape_preserving_identity_at_init() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let block = SequenceBlock::new(&mut store, &mut ChaCha8Rng::seed_from_u64(3), "b", &cfg);
        let geo = Geometry::new(&cfg, 30).unwrap();
        let (s, k) = (geo.layout.segments, geo.layout.k);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = uniform(&mut ChaCha8Rng::seed_from_u64(4), &[s, k, 4], 1.0);
        let xv = tape.leaf(&x).unwrap();
        let y = block.forward(&mut tape, &p, &geo, xv).unwrap();
        assert_eq!(tape.shape(y), x.shape());
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn block_gradcheck() {
        let cfg = tiny_cfg();
        for inst in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);
            let mut store = ParamStore::new();
            let block = SequenceBlock::new(&mut store, &mut rng, "b", &cfg);
            // move the projection off zero so every parameter carries gradient
            let pw = block.proj_weight();
            *store.get_mut(pw) = uniform(&mut rng, store.get(pw).shape(), 0.5).with_grad();
            let geo = Geometry::new(&cfg, 20).unwrap();
            let (s, k) = (geo.layout.segments, geo.layout.k);
            let x = uniform(&mut rng, &[s, k, 4], 1.0);
            let mut inputs = store.tensors().to_vec();
            inputs.push(x);
            let n = store.len();
            let r = check(
                &inputs,
                |t, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let y = block.forward(t, &p, &geo, v[n])?;
                    let y = t.tanh(y)?;
                    t.sum(y)
                },
                1e-5,
                Coords::Sample { n: 6, seed: inst },
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn encoder_gradcheck() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = WaveformEncoder::new(&mut store, &mut rng, &cfg);
        let geo = Geometry::new(&cfg, 24).unwrap();
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.9).sin()).collect();
        // keep every pre-activation clear of the rectifier kink
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let pre = enc.preactivation(&mut tape, &p, &geo, &x).unwrap();
        assert!(tape.value(pre).iter().all(|v| v.abs() > 1e-4));
        let r = check(
            store.tensors(),
            |t, v| {
                let p = Bound::from_vars(v.to_vec());
                let y = enc.forward(t, &p, &geo, &x)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            },
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn film_identity_at_init_and_forced_gamma() {
        let mut store = ParamStore::new();
        let film = Film::new(&mut store, "film", 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let h = tape.constant(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let z = tape.constant(&[3], vec![0.3, 0.7, -0.2]).unwrap();
        let y = film.modulate(&mut tape, &p, h, z).unwrap();
        assert_eq!(tape.value(y), tape.value(h));

        *store.get_mut(film.b_gamma) = Tensor::full(&[3], 2.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let h = tape.constant(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let z = tape.constant(&[3], vec![0.3, 0.7, -0.2]).unwrap();
        let y = film.modulate(&mut tape, &p, h, z).unwrap();
        let want: Vec<f64> = tape.value(h).iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(y), &want[..]);

        let bad = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        assert!(film.modulate(&mut tape, &p, h, bad).is_err());
    }

    #[test]
    fn film_passes_gradient_to_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let film = Film::new(&mut store, "film", 3);
        *store.get_mut(film.w_gamma) = uniform(&mut rng, &[3, 3], 1.0);
        *store.get_mut(film.w_beta) = uniform(&mut rng, &[3, 3], 1.0);
        let h = uniform(&mut rng, &[4, 3], 1.0);
        let z = uniform(&mut rng, &[3], 1.0);
        let params = store.tensors().to_vec();
        let n = params.len();
        let mut inputs = params;
        inputs.push(h);
        inputs.push(z);
        let r = check(
            &inputs,
            |t, v| {
                let p = Bound::from_vars(v[..n].to_vec());
                let y = film.modulate(t, &p, v[n], v[n + 1])?;
                let y = t.tanh(y)?;
                t.sum(y)
            },
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");

        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let hv = tape.leaf(&inputs[n]).unwrap();
        let zv = tape.param(&inputs[n + 1]).unwrap();
        let y = film.modulate(&mut tape, &p, hv, zv).unwrap();
        let y = tape.tanh(y).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(zv).unwrap().iter().any(|v| v.abs() > 1e-6));
    }
}
