//! Cross attention from shared features onto speaker-space features, and
//! the pooled separative embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{CscError, Result};
use crate::params::{glorot, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Attention,
    Mean,
}

/// Query, key and value maps, each `x W + b` with `W` square.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub temperature: f64,
}

impl Qkv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize) -> Self {
        let mut w = |n: &str, store: &mut ParamStore| store.add(format!("{prefix}.{n}"), glorot(rng, d, d));
        let w_q = w("w_q", store);
        let w_k = w("w_k", store);
        let w_v = w("w_v", store);
        Self {
            w_q,
            w_k,
            w_v,
            b_q: store.add(format!("{prefix}.b_q"), Tensor::zeros(&[d])),
            b_k: store.add(format!("{prefix}.b_k"), Tensor::zeros(&[d])),
            b_v: store.add(format!("{prefix}.b_v"), Tensor::zeros(&[d])),
            temperature: 1.0,
        }
    }

    fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_rowvec(y, b)
    }

    pub fn value(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        Self::affine(tape, y, p[self.w_v], p[self.b_v])
    }

    /// Row-stochastic `[S_i, S_j]` map: `softmax_rows(Query(x) Key(y)^T)`.
    /// `x` is `[S_i, D]` and `y` is `[S_j, D]`.
    pub fn attention_map(&self, tape: &mut Tape, p: &Bound, x: Var, y: Var) -> Result<Var> {
        let (dx, dy) = (tape.shape(x)[1], tape.shape(y)[1]);
        let d = tape.shape(p[self.w_q])[0];
        if tape.shape(x).len() != 2 || tape.shape(y).len() != 2 || dx != d || dy != d {
            return Err(CscError::Shape { op: "attention_map", detail: format!("{:?} / {:?} with D={d}", tape.shape(x), tape.shape(y)) });
        }
        let q = Self::affine(tape, x, p[self.w_q], p[self.b_q])?;
        let k = Self::affine(tape, y, p[self.w_k], p[self.b_k])?;
        let kt = tape.transpose(k)?;
        let mut logits = tape.matmul(q, kt)?;
        if self.temperature != 1.0 {
            logits = tape.scale(logits, 1.0 / self.temperature)?;
        }
        tape.softmax_rows(logits)
    }

    /// `Z = (1/S_i) sum_i sum_j a[i, j] Value(y)[j]`, a `[D]` vector.
    pub fn attend_pool(&self, tape: &mut Tape, p: &Bound, a: Var, y: Var) -> Result<Var> {
        let (si, sj) = (tape.shape(a)[0], tape.shape(a)[1]);
        if tape.shape(y)[0] != sj {
            return Err(CscError::Shape { op: "attend_pool", detail: format!("map has {sj} columns, Y has {} rows", tape.shape(y)[0]) });
        }
        let v = self.value(tape, p, y)?;
        let avg = tape.constant(&[1, si], vec![1.0 / si as f64; si])?;
        let w = tape.matmul(avg, a)?;
        let z = tape.matmul(w, v)?;
        let d = tape.shape(z)[1];
        tape.reshape(z, &[d])
    }

    /// Uniform-weight pooling: the column mean of `Value(y)`.
    pub fn mean_pool(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        let sj = tape.shape(y)[0];
        let v = self.value(tape, p, y)?;
        let avg = tape.constant(&[1, sj], vec![1.0 / sj as f64; sj])?;
        let z = tape.matmul(avg, v)?;
        let d = tape.shape(z)[1];
        tape.reshape(z, &[d])
    }

    /// Pools `y` into a separative embedding, returning the attention map
    /// when one was formed.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, kind: PoolKind, x: Var, y: Var) -> Result<(Var, Option<Var>)> {
        match kind {
            PoolKind::Attention => {
                let a = self.attention_map(tape, p, x, y)?;
                Ok((self.attend_pool(tape, p, a, y)?, Some(a)))
            }
            PoolKind::Mean => Ok((self.mean_pool(tape, p, y)?, None)),
        }
    }
}

/// Mean over rows of an `[S_i, S_j]` map: the per-segment attention curve.
pub fn row_mean(a: &Tensor) -> Vec<f64> {
    let (r, c) = (a.rows(), a.cols());
    (0..c).map(|j| (0..r).map(|i| a.data()[i * c + j]).sum::<f64>() / r as f64).collect()
}

pub fn max_row_sum_error(a: &Tensor) -> f64 {
    a.data().chunks(a.cols()).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}
