//! Central finite-difference checking of tape gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SparseMap, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative errors, per unit of function value, so
/// coordinates whose true gradient is zero are judged by absolute error.
/// Central-difference round-off grows with `|f|`, hence the scaling.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `n` coordinates per input, drawn with `seed`.
    Sample { n: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`. The relative-error floor is
/// `REL_FLOOR * max(1, |f(inputs)|)`.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, coords: Coords) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let floor = REL_FLOOR * tape.scalar(loss).abs().max(1.0);
    let analytic: Vec<Vec<f64>> = vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zeros(*v, t.len())).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = perturbed.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = match coords {
            Coords::All => (0..t.len()).collect(),
            Coords::Sample { n, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut v = sample(&mut rng, t.len(), n.min(t.len())).into_vec();
                v.sort_unstable();
                v
            }
        };
        for j in picks {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[i][j], numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e.max(report.max_rel_err);
                if e >= report.max_rel_err {
                    report.worst = Some((i, j, analytic[i][j], numeric));
                }
            }
        }
    }
    Ok(report)
}

pub type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One primitive tape operation reduced to a scalar.
#[derive(Clone, Copy, Debug)]
pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub f: OpFn,
    /// Keep inputs at least 1e-3 away from zero, for ops with a kink there.
    pub avoid_zero: bool,
}

impl OpCase {
    /// Inputs drawn uniformly from [-1.5, 1.5].
    pub fn inputs(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.shapes
            .iter()
            .map(|s| {
                let data = (0..s.iter().product())
                    .map(|_| {
                        if self.avoid_zero {
                            let m: f64 = rng.random_range(1e-3..1.5);
                            if rng.random::<bool>() { m } else { -m }
                        } else {
                            rng.random_range(-1.5..1.5)
                        }
                    })
                    .collect();
                Tensor::new(s, data).expect("shape matches data")
            })
            .collect()
    }

    pub fn check(&self, seed: u64, h: f64) -> Result<GradReport> {
        check(&self.inputs(seed), self.f, h, Coords::All)
    }
}

/// Sum of `y` against fixed non-uniform weights, so every output entry
/// gets a distinct upstream gradient.
fn weighted(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7).sin() + 0.3).collect();
    let shape = t.shape(y).to_vec();
    let w = t.constant(&shape, w)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

const fn case(name: &'static str, shapes: &'static [&'static [usize]], f: OpFn) -> OpCase {
    OpCase { name, shapes, f, avoid_zero: false }
}

/// Every differentiable primitive of the tape.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| { let y = t.matmul(v[0], v[1])?; weighted(t, y) }),
        case("transpose", &[&[3, 2]], |t, v| { let y = t.transpose(v[0])?; weighted(t, y) }),
        case("add", &[&[2, 3], &[2, 3]], |t, v| { let y = t.add(v[0], v[1])?; weighted(t, y) }),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| { let y = t.sub(v[0], v[1])?; weighted(t, y) }),
        case("mul", &[&[2, 3], &[2, 3]], |t, v| { let y = t.mul(v[0], v[1])?; weighted(t, y) }),
        case("scale", &[&[4]], |t, v| { let y = t.scale(v[0], -1.7)?; weighted(t, y) }),
        case("neg", &[&[4]], |t, v| { let y = t.neg(v[0])?; let y = t.exp(y)?; weighted(t, y) }),
        case("add_scalar", &[&[4]], |t, v| { let y = t.add_scalar(v[0], 0.3)?; weighted(t, y) }),
        case("mul_scalar", &[&[2, 2], &[1]], |t, v| { let y = t.mul_scalar(v[0], v[1])?; weighted(t, y) }),
        case("add_rowvec", &[&[3, 2], &[2]], |t, v| { let y = t.add_rowvec(v[0], v[1])?; weighted(t, y) }),
        case("mul_rowvec", &[&[3, 2], &[2]], |t, v| { let y = t.mul_rowvec(v[0], v[1])?; weighted(t, y) }),
        case("exp", &[&[5]], |t, v| { let y = t.exp(v[0])?; weighted(t, y) }),
        case("ln", &[&[5]], |t, v| { let e = t.exp(v[0])?; let y = t.ln(e)?; let y = t.mul(y, y)?; weighted(t, y) }),
        case("sigmoid", &[&[5]], |t, v| { let y = t.sigmoid(v[0])?; weighted(t, y) }),
        case("tanh", &[&[5]], |t, v| { let y = t.tanh(v[0])?; weighted(t, y) }),
        OpCase { name: "relu", shapes: &[&[6]], f: |t, v| { let y = t.relu(v[0])?; let y = t.mul(y, y)?; weighted(t, y) }, avoid_zero: true },
        case("softplus", &[&[5]], |t, v| { let y = t.softplus(v[0])?; weighted(t, y) }),
        case("sqrt", &[&[5]], |t, v| { let e = t.exp(v[0])?; let y = t.sqrt(e)?; weighted(t, y) }),
        case("sum", &[&[2, 3]], |t, v| { let y = t.sum(v[0])?; let y = t.mul(y, y)?; t.sum(y) }),
        case("mean", &[&[2, 3]], |t, v| { let y = t.mean(v[0])?; let y = t.exp(y)?; t.sum(y) }),
        case("softmax_rows", &[&[3, 4]], |t, v| { let y = t.softmax_rows(v[0])?; weighted(t, y) }),
        case("logsumexp", &[&[6]], |t, v| t.logsumexp(v[0])),
        case("sq_l2", &[&[4], &[4]], |t, v| t.sq_l2(v[0], v[1])),
        case("dot", &[&[4], &[4]], |t, v| { let y = t.dot(v[0], v[1])?; let y = t.tanh(y)?; t.sum(y) }),
        case("concat_cols", &[&[2, 1], &[2, 3]], |t, v| { let y = t.concat_cols(v[0], v[1])?; weighted(t, y) }),
        case("concat_rows", &[&[1, 3], &[2, 3]], |t, v| { let y = t.concat_rows(&[v[0], v[1], v[0]])?; weighted(t, y) }),
        case("slice_rows", &[&[4, 2]], |t, v| { let y = t.slice_rows(v[0], 1, 2)?; weighted(t, y) }),
        case("reshape", &[&[2, 3]], |t, v| { let y = t.reshape(v[0], &[3, 2])?; let y = t.softmax_rows(y)?; weighted(t, y) }),
        case("linear_map", &[&[2, 3, 2]], |t, v| {
            let m = Arc::new(SparseMap::permute3([2, 3, 2], [1, 2, 0])?);
            let y = t.linear_map(v[0], m)?;
            let y = t.tanh(y)?;
            weighted(t, y)
        }),
        case("layer_norm_rows", &[&[3, 4]], |t, v| { let y = t.layer_norm_rows(v[0], 1e-5)?; weighted(t, y) }),
    ]
}
