//! Exact and Monte-Carlo oracles for the mutual-information bound.

use std::f64::consts::{E, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use crate::csc::sq_dist;
use crate::error::{CscError, Result};
use crate::synth::derive_seed;

const TABLE_TOL: f64 = 1e-12;

/// Speaker prior `p(n)` with a conditional table `p(z_k | n)` over a finite
/// embedding alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    pub prior: Vec<f64>,
    pub cond: Vec<Vec<f64>>,
    pub alphabet: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum Scorer {
    /// `p(z | n) / p(z)`.
    ExactRatio,
    /// `exp(-alpha ||z - e_n||^2)` with one centroid per speaker.
    Kernel { alpha: f64, centroids: Vec<Vec<f64>> },
}

impl DiscreteJoint {
    pub fn new(prior: Vec<f64>, cond: Vec<Vec<f64>>, alphabet: Vec<Vec<f64>>) -> Result<Self> {
        let j = Self { prior, cond, alphabet };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CscError::InvalidDistribution(m));
        let ok_prob = |v: &[f64]| v.iter().all(|&p| p >= 0.0 && p.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() <= TABLE_TOL;
        if self.prior.is_empty() || !ok_prob(&self.prior) {
            return bad("prior must be a probability vector".into());
        }
        if self.cond.len() != self.prior.len() {
            return bad(format!("{} conditional rows for {} speakers", self.cond.len(), self.prior.len()));
        }
        let k = self.alphabet.len();
        for (n, row) in self.cond.iter().enumerate() {
            if row.len() != k || !ok_prob(row) {
                return bad(format!("conditional row {n} is not a distribution over {k} symbols"));
            }
        }
        Ok(())
    }

    pub fn speakers(&self) -> usize {
        self.prior.len()
    }

    pub fn symbols(&self) -> usize {
        self.alphabet.len()
    }

    /// Marginal `p(z_k)`.
    pub fn marginal(&self) -> Vec<f64> {
        (0..self.symbols()).map(|k| self.prior.iter().zip(&self.cond).map(|(p, row)| p * row[k]).sum()).collect()
    }

    /// Conditional means `E[z | n]`, a natural centroid choice for the kernel scorer.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let d = self.alphabet.first().map_or(0, Vec::len);
        self.cond
            .iter()
            .map(|row| (0..d).map(|c| row.iter().zip(&self.alphabet).map(|(p, z)| p * z[c]).sum()).collect())
            .collect()
    }

    /// Joint with the same marginals but the speaker and symbol independent.
    pub fn independent(prior: Vec<f64>, symbol_dist: Vec<f64>, alphabet: Vec<Vec<f64>>) -> Result<Self> {
        let cond = vec![symbol_dist; prior.len()];
        Self::new(prior, cond, alphabet)
    }

    /// Uniform prior, each speaker mapped deterministically to its own symbol.
    pub fn bijective(n: usize) -> Result<Self> {
        let cond = (0..n).map(|i| (0..n).map(|k| if i == k { 1.0 } else { 0.0 }).collect()).collect();
        let alphabet = (0..n).map(|i| vec![i as f64, 0.0]).collect();
        Self::new(vec![1.0 / n as f64; n], cond, alphabet)
    }

    /// Random tables drawn from a flat Dirichlet, with some entries zeroed.
    /// The prior is uniform unless `random_prior` is set.
    pub fn random(rng: &mut impl Rng, n: usize, k: usize, d: usize, random_prior: bool) -> Result<Self> {
        let simplex = |rng: &mut dyn rand::RngCore, len: usize, sparse: bool| -> Vec<f64> {
            loop {
                let mut v: Vec<f64> = (0..len)
                    .map(|_| {
                        let x: f64 = Exp1.sample(rng);
                        if sparse && rng.random::<f64>() < 0.2 {
                            0.0
                        } else {
                            x
                        }
                    })
                    .collect();
                let s: f64 = v.iter().sum();
                if s > 0.0 {
                    v.iter_mut().for_each(|x| *x /= s);
                    return v;
                }
            }
        };
        let prior = if random_prior { simplex(rng, n, false) } else { vec![1.0 / n as f64; n] };
        let cond = (0..n).map(|_| simplex(rng, k, true)).collect();
        let alphabet = (0..k).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect();
        Self::new(prior, cond, alphabet)
    }
}

/// `sum_{n,k} p(n) p(z_k|n) ln[p(z_k|n) / p(z_k)]`, with `0 ln 0 = 0`.
pub fn exact_mi(j: &DiscreteJoint) -> Result<f64> {
    j.validate()?;
    let pz = j.marginal();
    let mut mi = 0.0;
    for (p, row) in j.prior.iter().zip(&j.cond) {
        for (q, m) in row.iter().zip(&pz) {
            if p * q > 0.0 {
                mi += p * q * (q / m).ln();
            }
        }
    }
    Ok(mi)
}

fn kernel_log(z: &[f64], e: &[f64], alpha: f64) -> f64 {
    -alpha * sq_dist(z, e)
}

/// Exact expectation over the joint of `-ln(s(z, n_c) / sum_n s(z, n))`.
pub fn exact_csc_loss(j: &DiscreteJoint, scorer: &Scorer) -> Result<f64> {
    j.validate()?;
    if let Scorer::Kernel { alpha, centroids } = scorer {
        if !(*alpha > 0.0) || centroids.len() != j.speakers() {
            return Err(CscError::InvalidDistribution("kernel scorer needs alpha > 0 and one centroid per speaker".into()));
        }
    }
    let n = j.speakers();
    let mut loss = 0.0;
    for k in 0..j.symbols() {
        for c in 0..n {
            let w = j.prior[c] * j.cond[c][k];
            if w == 0.0 {
                continue;
            }
            // ln(1 + sum_{n != c} s_n / s_c)
            let rest: f64 = match scorer {
                Scorer::ExactRatio => (0..n).filter(|&m| m != c).map(|m| j.cond[m][k] / j.cond[c][k]).sum(),
                Scorer::Kernel { alpha, centroids } => {
                    let z = &j.alphabet[k];
                    let lc = kernel_log(z, &centroids[c], *alpha);
                    (0..n).filter(|&m| m != c).map(|m| (kernel_log(z, &centroids[m], *alpha) - lc).exp()).sum()
                }
            };
            loss += w * rest.ln_1p();
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Claim1Report {
    pub loss: f64,
    pub mi: f64,
    pub ln_n: f64,
    /// `loss - (ln N - mi)`; the bound holds when this is non-negative.
    pub bound_gap: f64,
}

pub fn verify_claim1_with(j: &DiscreteJoint, scorer: &Scorer) -> Result<Claim1Report> {
    let loss = exact_csc_loss(j, scorer)?;
    let mi = exact_mi(j)?;
    let ln_n = (j.speakers() as f64).ln();
    Ok(Claim1Report { loss, mi, ln_n, bound_gap: loss - (ln_n - mi) })
}

pub fn verify_claim1(j: &DiscreteJoint) -> Result<Claim1Report> {
    verify_claim1_with(j, &Scorer::ExactRatio)
}

/// The three rewritten forms of the loss in the bound's derivation, each
/// under the exact density ratio `r_n = p(n | z) / p(n)`:
/// (a) `-E ln(r_c / sum_n r_n)`,
/// (b) `E ln(1 + sum_{n != c} r_n / r_c)`,
/// (c) `E ln(1 + (N - 1) p(n_c) / p(n_c | z))`.
/// (a) and (b) always agree; (c) agrees only where `r_n = 1` for every
/// non-target speaker.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProofForms {
    pub ratio_form: f64,
    pub one_plus_form: f64,
    pub independence_form: f64,
}

pub fn proof_forms(j: &DiscreteJoint) -> Result<ProofForms> {
    j.validate()?;
    let pz = j.marginal();
    let n = j.speakers();
    // posterior over speakers for each symbol, then r_n = p(n|z) / p(n)
    let ratio = |m: usize, k: usize| j.cond[m][k] / pz[k];
    let (mut a, mut b, mut c3) = (0.0, 0.0, 0.0);
    for k in 0..j.symbols() {
        for c in 0..n {
            let w = j.prior[c] * j.cond[c][k];
            if w == 0.0 {
                continue;
            }
            let rc = ratio(c, k);
            let total: f64 = (0..n).map(|m| ratio(m, k)).sum();
            a -= w * (rc / total).ln();
            let rest: f64 = (0..n).filter(|&m| m != c).map(|m| ratio(m, k)).sum();
            b += w * (rest / rc).ln_1p();
            c3 += w * ((n as f64 - 1.0) / rc).ln_1p();
        }
    }
    Ok(ProofForms { ratio_form: a, one_plus_form: b, independence_form: c3 })
}

// ----------------------------------------------------- Gaussian clusters

/// Isotropic Gaussian clusters with variance `1 / (2 alpha)` and a uniform prior.
#[derive(Clone, Debug)]
pub struct GaussianClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianReport {
    pub samples: usize,
    /// Mean contrastive loss over the draws.
    pub loss: f64,
    pub loss_se: f64,
    /// Mutual information by quadrature.
    pub mi: f64,
    pub mi_err: f64,
    pub ln_n: f64,
    /// `loss - (ln N - mi)`.
    pub gap: f64,
    /// Combined standard error of `gap`.
    pub se: f64,
    pub holds: bool,
}

/// Adaptive Simpson quadrature. Returns the integral and an error estimate.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, max_depth: u32) -> Result<(f64, f64)> {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> Option<(f64, f64)> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Some((left + right + delta / 15.0, delta.abs() / 15.0));
        }
        if depth == 0 {
            return None;
        }
        let (l, le) = rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?;
        let (r, re) = rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?;
        Some((l + r, le + re))
    }
    let (fa, fb) = (f(a), f(b));
    // start from a uniform split so narrow peaks are not missed
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    let mut total = (0.0, 0.0);
    for i in 0..pieces {
        let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
        let (f0, f1, fmid) = (if i == 0 { fa } else { f(x0) }, if i + 1 == pieces { fb } else { f(x1) }, f(0.5 * (x0 + x1)));
        let whole = simpson(f0, fmid, f1, x0, x1);
        let (v, e) = rec(f, x0, x1, f0, fmid, f1, whole, tol / pieces as f64, max_depth).ok_or_else(|| {
            CscError::Quadrature(format!("no convergence on [{x0}, {x1}] within depth {max_depth}"))
        })?;
        total.0 += v;
        total.1 += e;
    }
    Ok(total)
}

impl GaussianClusterModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.centroids.is_empty() {
            return Err(CscError::InvalidDistribution("need alpha > 0 and at least one centroid".into()));
        }
        let d = self.centroids[0].len();
        if self.centroids.iter().any(|c| c.len() != d) {
            return Err(CscError::InvalidDistribution("centroids differ in dimension".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        (0.5 / self.alpha).sqrt()
    }

    /// `I(E; Z) = h(Z) - h(Z | E)` for one-dimensional clusters, with the
    /// mixture entropy integrated numerically.
    pub fn mutual_information_1d(&self) -> Result<(f64, f64)> {
        self.validate()?;
        if self.centroids[0].len() != 1 {
            return Err(CscError::Unsupported("quadrature mutual information needs D = 1".into()));
        }
        let s = self.sigma();
        let mus: Vec<f64> = self.centroids.iter().map(|c| c[0]).collect();
        let w = 1.0 / mus.len() as f64;
        let norm = 1.0 / (s * (2.0 * PI).sqrt());
        let integrand = |x: f64| {
            let p: f64 = mus.iter().map(|m| w * norm * (-(x - m).powi(2) / (2.0 * s * s)).exp()).sum();
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        };
        let lo = mus.iter().cloned().fold(f64::INFINITY, f64::min) - 14.0 * s;
        let hi = mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 14.0 * s;
        let (h_mix, err) = adaptive_simpson(&integrand, lo, hi, 1e-11, 40)?;
        let h_cond = 0.5 * (2.0 * PI * E * s * s).ln();
        Ok((h_mix - h_cond, err))
    }

    /// Draws `(n, Z)` pairs and evaluates the contrastive loss with the
    /// model's own kernel width and centroids.
    pub fn bound_experiment(&self, samples: usize, seed: u64) -> Result<GaussianReport> {
        self.validate()?;
        if samples < 10_000 {
            return Err(CscError::Contract(format!("need at least 10^4 samples, got {samples}")));
        }
        let n = self.centroids.len();
        let s = self.sigma();
        const SHARD: usize = 4096;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for (shard, start) in (0..samples).step_by(SHARD).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[shard as u64]));
            for _ in start..(start + SHARD).min(samples) {
                let c = rng.random_range(0..n);
                let z: Vec<f64> = self.centroids[c]
                    .iter()
                    .map(|m| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        m + s * g
                    })
                    .collect();
                let lc = kernel_log(&z, &self.centroids[c], self.alpha);
                let rest: f64 = (0..n).filter(|&m| m != c).map(|m| (kernel_log(&z, &self.centroids[m], self.alpha) - lc).exp()).sum();
                let l = rest.ln_1p();
                sum += l;
                sumsq += l * l;
            }
        }
        let m = samples as f64;
        let loss = sum / m;
        let var = (sumsq / m - loss * loss).max(0.0) * m / (m - 1.0);
        let loss_se = (var / m).sqrt();
        let (mi, mi_err) = self.mutual_information_1d()?;
        let ln_n = (n as f64).ln();
        let gap = loss - (ln_n - mi);
        let se = (loss_se * loss_se + mi_err * mi_err).sqrt();
        Ok(GaussianReport { samples, loss, loss_se, mi, mi_err, ln_n, gap, se, holds: ln_n - loss <= mi + 3.0 * se })
    }
}

/// Two clusters at `-sep` and `+sep` on the line.
pub fn two_cluster_model(sep: f64, alpha: f64) -> GaussianClusterModel {
    GaussianClusterModel { centroids: vec![vec![-sep], vec![sep]], alpha }
}
