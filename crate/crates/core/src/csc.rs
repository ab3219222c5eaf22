//! Contrastive separative coding: the Gaussian-kernel density-ratio
//! scorer, the contrastive loss over all global speaker vectors, the
//! InfoNCE comparison form, the norm regularizer, and the recurrent
//! speaker bank.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp_slice, CustomOp, Tape, Tensor, Var};
use crate::error::{CscError, Result};
use crate::params::{normal, uniform, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Csc,
    Infonce,
}

fn check_dims(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(CscError::Shape { op, detail: format!("{} vs {}", a.len(), b.len()) });
    }
    Ok(())
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `exp(-alpha ||z - e||^2)`.
pub fn density_score(z: &[f64], e: &[f64], alpha: f64) -> Result<f64> {
    check_dims("density_score", z, e)?;
    if !(alpha > 0.0) {
        return Err(CscError::Contract(format!("alpha must be positive, got {alpha}")));
    }
    Ok((-alpha * sq_dist(z, e)).exp())
}

fn check_batch<'a>(op: &'static str, batch: &'a [(&'a [f64], usize)], bank: &[Vec<f64>]) -> Result<()> {
    if batch.is_empty() {
        return Err(CscError::EmptyBatch);
    }
    for (z, n) in batch {
        if *n >= bank.len() {
            return Err(CscError::UnknownSpeaker(*n));
        }
        for e in bank {
            check_dims(op, z, e)?;
        }
    }
    Ok(())
}

/// Log-space contrastive loss: mean of `alpha d_c + LSE_n(-alpha d_n)`.
pub fn csc_loss_value(batch: &[(&[f64], usize)], bank: &[Vec<f64>], alpha: f64) -> Result<f64> {
    check_batch("csc_loss", batch, bank)?;
    let total: f64 = batch
        .iter()
        .map(|(z, c)| {
            let neg: Vec<f64> = bank.iter().map(|e| -alpha * sq_dist(z, e)).collect();
            -neg[*c] + logsumexp_slice(&neg)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// The contrastive loss evaluated literally as `-ln(f_c / sum_n f_n)`.
pub fn csc_loss_direct(batch: &[(&[f64], usize)], bank: &[Vec<f64>], alpha: f64) -> Result<f64> {
    check_batch("csc_loss", batch, bank)?;
    let mut total = 0.0;
    for (z, c) in batch {
        let scores: Vec<f64> = bank.iter().map(|e| density_score(z, e, alpha)).collect::<Result<_>>()?;
        total -= (scores[*c] / scores.iter().sum::<f64>()).ln();
    }
    Ok(total / batch.len() as f64)
}

/// The contrastive loss with `exp(Z^T E)` as the scorer, in log space.
pub fn infonce_loss_value(batch: &[(&[f64], usize)], bank: &[Vec<f64>]) -> Result<f64> {
    check_batch("infonce_loss", batch, bank)?;
    let total: f64 = batch
        .iter()
        .map(|(z, c)| {
            let logits: Vec<f64> = bank.iter().map(|e| dot(z, e)).collect();
            -logits[*c] + logsumexp_slice(&logits)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// The contrastive loss evaluated with the Gaussian density ratio
/// `exp(-alpha ||Z - E||^2 + alpha ||Z||^2)` and with the plain kernel.
/// Returns `(loss_f, loss_fhat)`.
pub fn claim2_identity(batch: &[(&[f64], usize)], bank: &[Vec<f64>], alpha: f64) -> Result<(f64, f64)> {
    let plain = csc_loss_value(batch, bank, alpha)?;
    let mut total = 0.0;
    for (z, c) in batch {
        let zz = alpha * dot(z, z);
        let logits: Vec<f64> = bank.iter().map(|e| -alpha * sq_dist(z, e) + zz).collect();
        total += -logits[*c] + logsumexp_slice(&logits);
    }
    Ok((plain, total / batch.len() as f64))
}

/// `(lhs, rhs)` of the identity relating the Gaussian kernel to the
/// InfoNCE scorer: `f(z, e) = f_nce(z, e)^(2 alpha) / exp(alpha ||z||^2 + alpha ||e||^2)`.
pub fn claim4_identity(z: &[f64], e: &[f64], alpha: f64) -> Result<(f64, f64)> {
    let lhs = density_score(z, e, alpha)?;
    let nce = dot(z, e).exp();
    let rhs = nce.powf(2.0 * alpha) / (alpha * dot(z, z) + alpha * dot(e, e)).exp();
    Ok((lhs, rhs))
}

/// Gradient of the single-example log-space loss with respect to `z`:
/// `2 alpha [(z - e_c) - sum_n p_n (z - e_n)]`, with `p` the softmax of
/// the negative scaled distances. Evaluated as `2 alpha sum_n p_n (e_n - e_c)`,
/// which avoids the cancellation when `p_c` is close to one.
pub fn csc_grad_z(z: &[f64], bank: &[Vec<f64>], c: usize, alpha: f64) -> Result<Vec<f64>> {
    check_batch("csc_grad_z", &[(z, c)], bank)?;
    let neg: Vec<f64> = bank.iter().map(|e| -alpha * sq_dist(z, e)).collect();
    let lse = logsumexp_slice(&neg);
    let mut g = vec![0.0; z.len()];
    for (n, (e, l)) in bank.iter().zip(&neg).enumerate() {
        if n == c {
            continue;
        }
        let p = (l - lse).exp();
        for ((gi, ei), ci) in g.iter_mut().zip(e).zip(&bank[c]) {
            *gi += 2.0 * alpha * p * (ei - ci);
        }
    }
    Ok(g)
}

pub fn reg_loss_value(zs: &[&[f64]]) -> Result<f64> {
    if zs.is_empty() {
        return Err(CscError::EmptyBatch);
    }
    Ok(zs.iter().map(|z| (dot(z, z).sqrt() - 1.0).powi(2)).sum::<f64>() / zs.len() as f64)
}

// ---------------------------------------------------------------- tape

/// Euclidean norm with a fixed subgradient at the origin: the unit vector
/// along `(1, ..., 1)`, so a zero embedding still receives a push.
struct L2Norm;

impl CustomOp for L2Norm {
    fn name(&self) -> &'static str {
        "l2_norm"
    }

    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let (x, n, g) = (inputs[0], output[0], grad_out[0]);
        if n > 0.0 {
            vec![x.iter().map(|v| g * v / n).collect()]
        } else {
            let u = 1.0 / (x.len() as f64).sqrt();
            vec![vec![g * u; x.len()]]
        }
    }
}

pub fn l2_norm(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.value(a).iter().map(|v| v * v).sum::<f64>().sqrt();
    tape.custom(&[a], &[1], vec![n], Arc::new(L2Norm))
}

/// Mean over the batch of `(||Z|| - 1)^2`.
pub fn reg_loss(tape: &mut Tape, zs: &[Var]) -> Result<Var> {
    if zs.is_empty() {
        return Err(CscError::EmptyBatch);
    }
    let terms = zs
        .iter()
        .map(|&z| {
            let n = l2_norm(tape, z)?;
            let d = tape.add_scalar(n, -1.0)?;
            tape.mul(d, d)
        })
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat_rows(&terms)?;
    tape.mean(all)
}

fn check_tape_batch(tape: &Tape, zs: &[(Var, usize)], bank: &[Var]) -> Result<()> {
    if zs.is_empty() {
        return Err(CscError::EmptyBatch);
    }
    for &(z, c) in zs {
        if c >= bank.len() {
            return Err(CscError::UnknownSpeaker(c));
        }
        for &e in bank {
            if tape.value(e).len() != tape.value(z).len() {
                return Err(CscError::Shape { op: "contrastive_loss", detail: format!("{} vs {}", tape.value(z).len(), tape.value(e).len()) });
            }
        }
    }
    Ok(())
}

/// Contrastive loss on the tape; `bank` holds one `[D]` var per speaker
/// and `alpha` is a `[1]` var.
pub fn csc_loss(tape: &mut Tape, zs: &[(Var, usize)], bank: &[Var], alpha: Var) -> Result<Var> {
    check_tape_batch(tape, zs, bank)?;
    let mut terms = Vec::with_capacity(zs.len());
    for &(z, c) in zs {
        let d = bank.iter().map(|&e| tape.sq_l2(z, e)).collect::<Result<Vec<_>>>()?;
        let d = tape.concat_rows(&d)?;
        let ad = tape.mul_scalar(d, alpha)?;
        let target = tape.slice_rows(ad, c, 1)?;
        let neg = tape.neg(ad)?;
        let lse = tape.logsumexp(neg)?;
        terms.push(tape.add(target, lse)?);
    }
    let all = tape.concat_rows(&terms)?;
    tape.mean(all)
}

pub fn infonce_loss(tape: &mut Tape, zs: &[(Var, usize)], bank: &[Var]) -> Result<Var> {
    check_tape_batch(tape, zs, bank)?;
    let mut terms = Vec::with_capacity(zs.len());
    for &(z, c) in zs {
        let l = bank.iter().map(|&e| tape.dot(z, e)).collect::<Result<Vec<_>>>()?;
        let l = tape.concat_rows(&l)?;
        let target = tape.slice_rows(l, c, 1)?;
        let lse = tape.logsumexp(l)?;
        terms.push(tape.sub(lse, target)?);
    }
    let all = tape.concat_rows(&terms)?;
    tape.mean(all)
}

pub fn contrastive_loss(tape: &mut Tape, kind: LossKind, zs: &[(Var, usize)], bank: &[Var], alpha: Var) -> Result<Var> {
    match kind {
        LossKind::Csc => csc_loss(tape, zs, bank, alpha),
        LossKind::Infonce => infonce_loss(tape, zs, bank),
    }
}

// --------------------------------------------------------------- alpha

/// Cluster-size parameter stored as a raw scalar; `alpha = softplus(raw)`.
#[derive(Clone, Debug)]
pub struct AlphaParam {
    pub raw: ParamId,
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl AlphaParam {
    pub fn new(store: &mut ParamStore, init: f64) -> Self {
        Self { raw: store.add("csc.alpha_raw", Tensor::scalar(inverse_softplus(init))) }
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        crate::autodiff::stable_softplus(store.get(self.raw).item())
    }

    pub fn var(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        tape.softplus(p[self.raw])
    }
}

// ----------------------------------------------------------------- g_ar

/// Gated recurrent cell summarizing a speaker's embeddings:
/// `u = sigmoid([Z; E] W_u + b_u)`, `cand = tanh([Z; E] W_c + b_c)`,
/// `E' = u * E + (1 - u) * cand`.
#[derive(Clone, Debug)]
pub struct GarCell {
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    d: usize,
}

impl GarCell {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Self {
        let bound = 1.0 / (2.0 * d as f64).sqrt();
        Self {
            w_u: store.add("gar.w_u", uniform(rng, &[2 * d, d], bound)),
            b_u: store.add("gar.b_u", Tensor::zeros(&[d])),
            w_c: store.add("gar.w_c", uniform(rng, &[2 * d, d], bound)),
            b_c: store.add("gar.b_c", Tensor::zeros(&[d])),
            d,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, e: Var) -> Result<Var> {
        let d = self.d;
        if tape.value(z).len() != d || tape.value(e).len() != d {
            return Err(CscError::Shape { op: "gar_cell", detail: format!("expected {d}-vectors") });
        }
        let zr = tape.reshape(z, &[1, d])?;
        let er = tape.reshape(e, &[1, d])?;
        let x = tape.concat_cols(zr, er)?;
        let u = tape.matmul(x, p[self.w_u])?;
        let u = tape.add_rowvec(u, p[self.b_u])?;
        let u = tape.sigmoid(u)?;
        let c = tape.matmul(x, p[self.w_c])?;
        let c = tape.add_rowvec(c, p[self.b_c])?;
        let c = tape.tanh(c)?;
        // u * E + (1 - u) * cand = cand + u * (E - cand)
        let diff = tape.sub(er, c)?;
        let ud = tape.mul(u, diff)?;
        let out = tape.add(c, ud)?;
        tape.reshape(out, &[d])
    }

    /// Numeric step with the store's current parameters.
    pub fn step(&self, store: &ParamStore, z: &[f64], e: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape)?;
        let zv = tape.constant(&[z.len()], z.to_vec())?;
        let ev = tape.constant(&[e.len()], e.to_vec())?;
        let out = self.forward(&mut tape, &p, zv, ev)?;
        Ok(tape.value(out).to_vec())
    }

    /// Runs the cell from a zero state over a sequence of embeddings.
    pub fn enroll(&self, store: &ParamStore, zs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if zs.is_empty() {
            return Err(CscError::EmptyBatch);
        }
        let mut e = vec![0.0; self.d];
        for z in zs {
            e = self.step(store, z, &e)?;
        }
        Ok(e)
    }
}

/// One global vector per training speaker, plus the inputs of its most
/// recent cell update so the row can be rebuilt on the tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankRow {
    pub e: Vec<f64>,
    pub history: Option<BankHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankHistory {
    pub e_prev: Vec<f64>,
    pub z_last: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalSpeakerBank {
    pub rows: Vec<BankRow>,
}

impl GlobalSpeakerBank {
    /// Rows start at `0.1 * N(0, 1)`.
    pub fn new(rng: &mut impl Rng, n: usize, d: usize) -> Self {
        let rows = (0..n).map(|_| BankRow { e: normal(rng, &[d], 0.1).into_data(), history: None }).collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.e.clone()).collect()
    }

    /// Tape handles for every row. A row with history is recomputed through
    /// the cell from constant inputs, so gradients reach the cell through its
    /// latest update only; other rows are constants.
    pub fn bind(&self, tape: &mut Tape, p: &Bound, cell: &GarCell) -> Result<Vec<Var>> {
        self.rows
            .iter()
            .map(|r| match &r.history {
                Some(h) => {
                    let z = tape.constant(&[h.z_last.len()], h.z_last.clone())?;
                    let e = tape.constant(&[h.e_prev.len()], h.e_prev.clone())?;
                    cell.forward(tape, p, z, e)
                }
                None => tape.constant(&[r.e.len()], r.e.clone()),
            })
            .collect()
    }

    /// Refreshes every row with history under the current cell parameters.
    pub fn refresh(&mut self, store: &ParamStore, cell: &GarCell) -> Result<()> {
        for r in &mut self.rows {
            if let Some(h) = &r.history {
                r.e = cell.step(store, &h.z_last, &h.e_prev)?;
            }
        }
        Ok(())
    }

    /// Feeds one embedding of speaker `n` through the cell.
    pub fn update(&mut self, store: &ParamStore, cell: &GarCell, n: usize, z: &[f64]) -> Result<()> {
        let row = self.rows.get_mut(n).ok_or(CscError::UnknownSpeaker(n))?;
        if z.len() != row.e.len() {
            return Err(CscError::Shape { op: "bank_update", detail: format!("{} vs {}", z.len(), row.e.len()) });
        }
        let e_prev = match &row.history {
            Some(h) => cell.step(store, &h.z_last, &h.e_prev)?,
            None => row.e.clone(),
        };
        row.e = cell.step(store, z, &e_prev)?;
        row.history = Some(BankHistory { e_prev, z_last: z.to_vec() });
        Ok(())
    }

    pub fn check_healthy(&self) -> Result<()> {
        if self.rows.iter().any(|r| r.e.iter().any(|v| !v.is_finite())) {
            return Err(CscError::NonFinite { op: "speaker_bank" });
        }
        if self.rows.iter().all(|r| r.e.iter().all(|&v| v == 0.0)) {
            return Err(CscError::Contract("speaker bank collapsed to all zeros".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::{check, Coords};

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize, s: f64) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-s..s)).collect()
    }

    #[test]
    fn density_score_cases() {
        assert_eq!(density_score(&[0.3, -1.0], &[0.3, -1.0], 7.0).unwrap(), 1.0);
        let v = density_score(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        assert!(density_score(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn density_score_monotone(
            z in prop::collection::vec(-3.0f64..3.0, 3),
            e1 in prop::collection::vec(-3.0f64..3.0, 3),
            e2 in prop::collection::vec(-3.0f64..3.0, 3),
            alpha in 0.01f64..3.0,
        ) {
            let (d1, d2) = (sq_dist(&z, &e1), sq_dist(&z, &e2));
            let (s1, s2) = (density_score(&z, &e1, alpha).unwrap(), density_score(&z, &e2, alpha).unwrap());
            prop_assert!(s1 > 0.0 && s1 <= 1.0);
            if d1 < d2 { prop_assert!(s1 >= s2); }
        }

        #[test]
        fn csc_loss_nonnegative(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, 3, 2.0)).collect();
            let z = rand_vec(&mut rng, 3, 2.0);
            let c = rng.random_range(0..n);
            prop_assert!(csc_loss_value(&[(&z, c)], &bank, 0.7).unwrap() >= 0.0);
        }
    }

    #[test]
    fn csc_loss_cases() {
        let z = [0.4, -0.2];
        assert_eq!(csc_loss_value(&[(&z, 0)], &[vec![1.0, 3.0]], 2.0).unwrap(), 0.0);
        let l = csc_loss_value(&[(&[0.0, 0.0], 1)], &[vec![1.0, 0.0], vec![0.0, -1.0]], 1.3).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = csc_loss_value(&[(&[0.0], 0)], &[vec![0.0], vec![10.0]], 1.0).unwrap();
        let want = (-100f64).exp().ln_1p();
        assert!(((l - want) / want).abs() < 1e-12);
        assert!(matches!(csc_loss_value(&[], &[vec![0.0]], 1.0), Err(CscError::EmptyBatch)));
        assert!(matches!(csc_loss_value(&[(&[0.0], 3)], &[vec![0.0]], 1.0), Err(CscError::UnknownSpeaker(3))));
    }

    #[test]
    fn infonce_cases_and_direct_oracle() {
        assert_eq!(infonce_loss_value(&[(&[0.5, 1.0], 0)], &[vec![2.0, 3.0]]).unwrap(), 0.0);
        let bank = vec![vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 5.0]];
        let l = infonce_loss_value(&[(&[1.0, 0.0], 2)], &bank).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let bank: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();
            let z = rand_vec(&mut rng, 3, 1.0);
            let direct = -(dot(&z, &bank[1]).exp() / bank.iter().map(|e| dot(&z, e).exp()).sum::<f64>()).ln();
            let l = infonce_loss_value(&[(&z, 1)], &bank).unwrap();
            assert!((l - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn claim_identities_hand_cases() {
        let (l, r) = claim4_identity(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!((l - (-1f64).exp()).abs() < 1e-15 && (r - (-1f64).exp()).abs() < 1e-15);
        let (l, r) = claim4_identity(&[0.3, 0.4], &[0.3, 0.4], 1.7).unwrap();
        assert_eq!(l, 1.0);
        assert!((r - 1.0).abs() < 1e-14);
        let (a, b) = claim2_identity(&[(&[0.2, 0.1], 0)], &[vec![1.0, 1.0]], 0.9).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn claim_identities_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let alpha = rng.random_range(0.05..2.0);
            let bank: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 5, 1.5)).collect();
            let zs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 5, 1.5)).collect();
            let batch: Vec<(&[f64], usize)> = zs.iter().map(|z| (z.as_slice(), rng.random_range(0..4))).collect();
            let (a, b) = claim2_identity(&batch, &bank, alpha).unwrap();
            assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()));
            let direct = csc_loss_direct(&batch, &bank, alpha).unwrap();
            assert!((a - direct).abs() <= 1e-9 * a.abs().max(direct.abs()));
            let (l, r) = claim4_identity(&zs[0], &bank[0], alpha).unwrap();
            assert!((l - r).abs() / l < 1e-9);
        }
    }

    #[test]
    fn descent_step_moves_away_from_the_other_speaker() {
        // the step on Z is along (E_c - E'); it always increases the distance
        // to E', and decreases the distance to E_c exactly when
        // (Z - E_c).(E' - E_c) > 0
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked_target = 0;
        for _ in 0..500 {
            let bank = vec![rand_vec(&mut rng, 3, 2.0), rand_vec(&mut rng, 3, 2.0)];
            let z = rand_vec(&mut rng, 3, 2.0);
            let (dc, do_) = (sq_dist(&z, &bank[0]), sq_dist(&z, &bank[1]));
            if dc >= do_ {
                continue;
            }
            let alpha = rng.random_range(0.1..2.0);
            let g = csc_grad_z(&z, &bank, 0, alpha).unwrap();
            let z2: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - 1e-3 * b).collect();
            assert!(sq_dist(&z2, &bank[1]) > do_);
            let along: f64 = z.iter().zip(&bank[0]).zip(&bank[1]).map(|((z, c), o)| (z - c) * (o - c)).sum();
            if along > 0.0 {
                assert!(sq_dist(&z2, &bank[0]) < dc);
                checked_target += 1;
            }
        }
        assert!(checked_target > 50);

        // one-dimensional counterexample for the unconditional statement
        let bank = vec![vec![0.0], vec![1.0]];
        let g = csc_grad_z(&[-0.5], &bank, 0, 1.0).unwrap();
        let z2 = -0.5 - 1e-3 * g[0];
        assert!(z2.abs() > 0.5);
    }

    #[test]
    fn csc_grad_z_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 4, 1.0)).collect();
        let z = rand_vec(&mut rng, 4, 1.0);
        let mut tape = Tape::new();
        let zv = tape.param(&Tensor::vector(z.clone())).unwrap();
        let ev: Vec<Var> = bank.iter().map(|e| tape.constant(&[4], e.clone()).unwrap()).collect();
        let a = tape.constant_scalar(0.8).unwrap();
        let l = csc_loss(&mut tape, &[(zv, 2)], &ev, a).unwrap();
        let want = csc_loss_value(&[(&z, 2)], &bank, 0.8).unwrap();
        assert!((tape.scalar(l) - want).abs() < 1e-14);
        let g = tape.backward(l).unwrap();
        for (x, y) in g.get(zv).unwrap().iter().zip(csc_grad_z(&z, &bank, 2, 0.8).unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_losses_gradcheck() {
        for inst in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + inst);
            let mut inputs: Vec<Tensor> = (0..5).map(|_| Tensor::vector(rand_vec(&mut rng, 3, 1.0))).collect();
            inputs.push(Tensor::scalar(rng.random_range(-1.0..1.0)));
            let r = check(
                &inputs,
                |t, v| {
                    let alpha = t.softplus(v[5])?;
                    let zs = [(v[0], 1), (v[1], 0)];
                    let csc = csc_loss(t, &zs, &v[2..5], alpha)?;
                    let nce = infonce_loss(t, &zs, &v[2..5])?;
                    let reg = reg_loss(t, &[v[0], v[1]])?;
                    let s = t.add(csc, nce)?;
                    t.add(s, reg)
                },
                1e-5,
                Coords::All,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn reg_loss_cases() {
        assert_eq!(reg_loss_value(&[&[0.6, 0.8], &[0.0, -1.0]]).unwrap(), 0.0);
        assert_eq!(reg_loss_value(&[&[0.0, 0.0, 0.0]]).unwrap(), 1.0);
        assert!(matches!(reg_loss_value(&[]), Err(CscError::EmptyBatch)));

        let mut tape = Tape::new();
        let z = tape.param(&Tensor::zeros(&[4])).unwrap();
        let l = reg_loss(&mut tape, &[z]).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        let g = tape.backward(l).unwrap();
        let z1: Vec<f64> = g.get(z).unwrap().iter().map(|gi| -0.1 * gi).collect();
        assert!(dot(&z1, &z1).sqrt() > 0.0);
    }

    #[test]
    fn alpha_is_softplus_of_raw() {
        let mut store = ParamStore::new();
        let a = AlphaParam::new(&mut store, 1.0);
        assert!((a.value(&store) - 1.0).abs() < 1e-14);
        *store.get_mut(a.raw) = Tensor::scalar(-50.0);
        assert!(a.value(&store) > 0.0);
    }

    #[test]
    fn gar_gate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cell = GarCell::new(&mut store, &mut rng, 3);
        let z = rand_vec(&mut rng, 3, 1.0);
        let e = rand_vec(&mut rng, 3, 1.0);
        *store.get_mut(cell.w_u) = Tensor::zeros(&[6, 3]);
        *store.get_mut(cell.b_u) = Tensor::full(&[3], 100.0);
        assert_eq!(cell.step(&store, &z, &e).unwrap(), e);

        *store.get_mut(cell.b_u) = Tensor::full(&[3], -100.0);
        let out = cell.step(&store, &z, &e).unwrap();
        let wc = store.get(cell.w_c).data();
        for c in 0..3 {
            let pre: f64 = z.iter().chain(&e).enumerate().map(|(k, x)| x * wc[k * 3 + c]).sum();
            assert!((out[c] - pre.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn gar_fixed_point_iteration_converges() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let cell = GarCell::new(&mut store, &mut rng, 8);
            for id in [cell.b_u, cell.b_c] {
                *store.get_mut(id) = uniform(&mut rng, &[8], 0.5);
            }
            let z = rand_vec(&mut rng, 8, 1.0);
            let mut e = vec![0.0; 8];
            let mut converged = false;
            for _ in 0..200 {
                let next = cell.step(&store, &z, &e).unwrap();
                let delta = sq_dist(&next, &e).sqrt();
                e = next;
                if delta < 1e-6 {
                    converged = true;
                    break;
                }
            }
            assert!(converged, "seed {seed}");
        }
    }

    #[test]
    fn bank_update_touches_only_its_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cell = GarCell::new(&mut store, &mut rng, 3);
        let mut bank = GlobalSpeakerBank::new(&mut rng, 4, 3);
        let before = bank.clone();
        bank.update(&store, &cell, 2, &[0.1, 0.2, 0.3]).unwrap();
        for n in [0, 1, 3] {
            assert_eq!(bank.rows[n], before.rows[n]);
        }
        assert_ne!(bank.rows[2].e, before.rows[2].e);
        assert!(matches!(bank.update(&store, &cell, 4, &[0.0; 3]), Err(CscError::UnknownSpeaker(4))));
        bank.check_healthy().unwrap();

        // the tape rebuild reproduces the stored row and carries gradient
        // into the cell parameters
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let rows = bank.bind(&mut tape, &p, &cell).unwrap();
        assert_eq!(tape.value(rows[2]), &bank.rows[2].e[..]);
        assert!(tape.requires_grad(rows[2]) && !tape.requires_grad(rows[0]));
        let s = tape.sum(rows[2]).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(p[cell.w_c]).unwrap().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn gar_gradcheck() {
        for inst in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + inst);
            let mut store = ParamStore::new();
            let cell = GarCell::new(&mut store, &mut rng, 3);
            let n = store.len();
            let mut inputs = store.tensors().to_vec();
            inputs.push(Tensor::vector(rand_vec(&mut rng, 3, 1.0)));
            inputs.push(Tensor::vector(rand_vec(&mut rng, 3, 1.0)));
            let r = check(
                &inputs,
                |t, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let e = cell.forward(t, &p, v[n], v[n + 1])?;
                    let e = t.mul(e, e)?;
                    t.sum(e)
                },
                1e-5,
                Coords::All,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
