//! Scale-invariant SNR and utterance-level permutation search.

use std::f64::consts::LN_10;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{CscError, Result};

/// Magnitude above which the SI-SNR is smoothly compressed.
pub const SOFT_KNEE_DB: f64 = 50.0;
/// Asymptotic magnitude of the capped SI-SNR.
pub const CAP_DB: f64 = 60.0;
pub const MAX_PIT_SOURCES: usize = 4;

/// Smooth, twice-differentiable clamp: identity on `[-50, 50]`, then
/// `sign(x) (50 + 10 tanh((|x| - 50) / 10))`, approaching +-60.
pub fn soft_cap(x: f64) -> (f64, f64) {
    if x.is_infinite() {
        return (x.signum() * CAP_DB, 0.0);
    }
    let a = x.abs();
    if a <= SOFT_KNEE_DB {
        return (x, 1.0);
    }
    let w = CAP_DB - SOFT_KNEE_DB;
    let t = ((a - SOFT_KNEE_DB) / w).tanh();
    (x.signum() * (SOFT_KNEE_DB + w * t), 1.0 - t * t)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Parts {
    e_hat: Vec<f64>,
    r_hat: Vec<f64>,
    c: f64,
    ps: f64,
    pe: f64,
}

fn decompose(est: &[f64], reference: &[f64]) -> Result<Parts> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(CscError::Shape { op: "si_snr", detail: format!("{} vs {} samples", est.len(), reference.len()) });
    }
    let e_hat = centered(est);
    let r_hat = centered(reference);
    let rr = dot(&r_hat, &r_hat);
    if rr == 0.0 {
        return Err(CscError::DegenerateReference("reference is zero after mean removal".into()));
    }
    let c = dot(&e_hat, &r_hat) / rr;
    let ps = c * c * rr;
    let pe: f64 = e_hat.iter().zip(&r_hat).map(|(e, r)| (e - c * r).powi(2)).sum();
    Ok(Parts { e_hat, r_hat, c, ps, pe })
}

fn raw_db(p: &Parts) -> f64 {
    match (p.ps > 0.0, p.pe > 0.0) {
        (true, true) => 10.0 * (p.ps / p.pe).log10(),
        (true, false) => f64::INFINITY,
        // orthogonal or silent estimate
        (false, _) => f64::NEG_INFINITY,
    }
}

/// Capped SI-SNR in dB.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(soft_cap(raw_db(&decompose(est, reference)?)).0)
}

struct SiSnrOp;

impl CustomOp for SiSnrOp {
    fn name(&self) -> &'static str {
        "si_snr"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let n = inputs[0].len();
        let p = decompose(inputs[0], inputs[1]).expect("validated in forward");
        let raw = raw_db(&p);
        let (_, slope) = soft_cap(raw);
        if slope == 0.0 || !raw.is_finite() {
            return vec![vec![0.0; n], vec![0.0; n]];
        }
        let k = grad_out[0] * slope * 10.0 / LN_10;
        let mut g_est = Vec::with_capacity(n);
        let mut g_ref = Vec::with_capacity(n);
        for (e, r) in p.e_hat.iter().zip(&p.r_hat) {
            let s = p.c * r;
            let err = e - s;
            g_est.push(k * (2.0 * s / p.ps - 2.0 * err / p.pe));
            g_ref.push(k * 2.0 * p.c * err * (1.0 / p.ps + 1.0 / p.pe));
        }
        // adjoint of the mean removal
        for g in [&mut g_est, &mut g_ref] {
            let m = g.iter().sum::<f64>() / n as f64;
            g.iter_mut().for_each(|v| *v -= m);
        }
        vec![g_est, g_ref]
    }
}

/// Capped SI-SNR recorded on the tape as a single fused node.
pub fn si_snr_var(tape: &mut Tape, est: Var, reference: Var) -> Result<Var> {
    let v = si_snr(tape.value(est), tape.value(reference))?;
    tape.custom(&[est, reference], &[1], vec![v], Arc::new(SiSnrOp))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PitMode {
    Speech,
    Speaker,
}

impl PitMode {
    pub fn for_epoch(epoch: usize, switch_epoch: usize) -> Self {
        if epoch < switch_epoch {
            Self::Speech
        } else {
            Self::Speaker
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitAssignment {
    /// `perm[c]` is the source matched to estimate `c`.
    pub perm: Vec<usize>,
    /// Mean matched loss.
    pub value: f64,
    /// Permutations scored to reach the decision.
    pub evaluations: usize,
}

/// Advances `p` to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot has a successor");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive minimum over permutations of `mean_c loss[c][perm[c]]`; ties
/// go to the lexicographically smallest permutation.
pub fn upit_assign(loss: &[Vec<f64>]) -> Result<PitAssignment> {
    let c = loss.len();
    if c == 0 || loss.iter().any(|r| r.len() != c) {
        return Err(CscError::Shape { op: "upit_assign", detail: "loss matrix must be square and non-empty".into() });
    }
    if c > MAX_PIT_SOURCES {
        return Err(CscError::Unsupported(format!("{c} sources exceed the exhaustive search limit of {MAX_PIT_SOURCES}")));
    }
    if loss.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CscError::NonFinite { op: "upit_assign" });
    }
    let mut perm: Vec<usize> = (0..c).collect();
    let mut best = (f64::INFINITY, perm.clone());
    let mut evaluations = 0;
    loop {
        let v = perm.iter().enumerate().map(|(i, &j)| loss[i][j]).sum::<f64>() / c as f64;
        evaluations += 1;
        if v < best.0 {
            best = (v, perm.clone());
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(PitAssignment { perm: best.1, value: best.0, evaluations })
}
