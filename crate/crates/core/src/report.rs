//! Self-contained oracle suite over the loss identities and the mutual
//! information bound, reported as JSON.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::csc::{claim2_identity, claim4_identity, csc_grad_z, csc_loss_direct, csc_loss_value, sq_dist};
use crate::error::Result;
use crate::synth::derive_seed;
use crate::verify::{proof_forms, two_cluster_model, verify_claim1, verify_claim1_with, DiscreteJoint, Scorer};

pub const IDENTITY_REL_TOL: f64 = 1e-9;
pub const EXACT_ABS_TOL: f64 = 1e-12;
pub const GAUSSIAN_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// What `worst` measures and how it is compared with `tolerance`.
    pub criterion: String,
    pub tolerance: f64,
    pub instances: usize,
    pub worst: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClaimsReport {
    pub seed: u64,
    pub perturb: f64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub instances: usize,
    pub joints: usize,
    pub gaussian_samples: usize,
    /// Added to the right-hand side of the kernel/InfoNCE identity; a
    /// negative control that must make the suite fail.
    pub perturb: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 2024, instances: 1000, joints: 100, gaussian_samples: 100_000, perturb: 0.0 }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn uniform_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

fn upper(name: &str, criterion: &str, tolerance: f64, instances: usize, worst: f64) -> Check {
    Check { name: name.into(), criterion: criterion.into(), tolerance, instances, worst, passed: worst.is_finite() && worst < tolerance }
}

struct Instance {
    alpha: f64,
    bank: Vec<Vec<f64>>,
    zs: Vec<(Vec<f64>, usize)>,
}

fn instance(rng: &mut impl Rng) -> Instance {
    let d = rng.random_range(1..=8);
    let n = rng.random_range(2..=8);
    let alpha = rng.random_range(0.05..2.0);
    let bank = (0..n).map(|_| uniform_vec(rng, d, 1.5)).collect();
    let zs = (0..rng.random_range(1..=4)).map(|_| (uniform_vec(rng, d, 1.5), rng.random_range(0..n))).collect();
    Instance { alpha, bank, zs }
}

fn instances(seed: u64, tag: u64, count: usize) -> impl Iterator<Item = Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag]));
    (0..count).map(move |_| instance(&mut rng))
}

/// The loss is unchanged when the Gaussian kernel is replaced by the
/// density ratio that adds back `alpha ||Z||^2`.
pub fn check_claim2(seed: u64, count: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for inst in instances(seed, 2, count) {
        let batch: Vec<(&[f64], usize)> = inst.zs.iter().map(|(z, c)| (z.as_slice(), *c)).collect();
        let (a, b) = claim2_identity(&batch, &inst.bank, inst.alpha)?;
        worst = worst.max(rel_err(a, b));
    }
    Ok(upper("claim2_identity", "max relative error between the loss under both scorers", IDENTITY_REL_TOL, count, worst))
}

/// The kernel equals the InfoNCE scorer raised to `2 alpha` and divided by
/// the norm terms.
pub fn check_claim4(seed: u64, count: usize, perturb: f64) -> Result<Check> {
    let mut worst = 0.0f64;
    for inst in instances(seed, 4, count) {
        let (z, c) = &inst.zs[0];
        let (lhs, rhs) = claim4_identity(z, &inst.bank[*c], inst.alpha)?;
        worst = worst.max(rel_err(lhs, rhs + perturb));
    }
    Ok(upper("claim4_identity", "max relative error between kernel and rescaled InfoNCE scorer", IDENTITY_REL_TOL, count, worst))
}

/// Log-space evaluation agrees with the literal `-ln(f_c / sum f_n)`.
pub fn check_claim3_decomposition(seed: u64, count: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for inst in instances(seed, 3, count) {
        let batch: Vec<(&[f64], usize)> = inst.zs.iter().map(|(z, c)| (z.as_slice(), *c)).collect();
        let a = csc_loss_value(&batch, &inst.bank, inst.alpha)?;
        let b = csc_loss_direct(&batch, &inst.bank, inst.alpha)?;
        worst = worst.max(rel_err(a, b));
    }
    Ok(upper("claim3_decomposition", "max relative error between log-space and direct loss paths", IDENTITY_REL_TOL, count, worst))
}

/// A small descent step on `Z` moves it away from the competing speaker,
/// and toward the target speaker whenever `(Z - E_c).(E' - E_c) > 0`.
/// `worst` counts violating instances.
pub fn check_claim3_direction(seed: u64, count: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[33]));
    let mut violations = 0usize;
    let mut checked = 0usize;
    while checked < count {
        let d = rng.random_range(1..=6);
        let bank = vec![uniform_vec(&mut rng, d, 2.0), uniform_vec(&mut rng, d, 2.0)];
        let z = uniform_vec(&mut rng, d, 2.0);
        // the statement concerns an embedding already nearer its own speaker
        if sq_dist(&z, &bank[0]) >= sq_dist(&z, &bank[1]) {
            continue;
        }
        checked += 1;
        let alpha = rng.random_range(0.1..2.0);
        let g = csc_grad_z(&z, &bank, 0, alpha)?;
        // rate of change of ||Z - E||^2 along the descent direction -g
        let rate = |e: &[f64]| -> f64 { -2.0 * g.iter().zip(&z).zip(e).map(|((g, z), e)| g * (z - e)).sum::<f64>() };
        let along: f64 = z.iter().zip(&bank[0]).zip(&bank[1]).map(|((z, c), o)| (z - c) * (o - c)).sum();
        let away = rate(&bank[1]) > 0.0;
        let toward = along <= 0.0 || rate(&bank[0]) < 0.0;
        if !(away && toward) {
            violations += 1;
        }
    }
    Ok(Check {
        name: "claim3_direction".into(),
        criterion: "count of descent directions that approach the competing speaker, or fail to approach the target when the projection condition holds".into(),
        tolerance: 0.0,
        instances: count,
        worst: violations as f64,
        passed: violations == 0,
    })
}

fn joints(seed: u64, count: usize) -> Result<Vec<DiscreteJoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    (0..count)
        .map(|i| {
            let n = [2, 3, 4, 8][i % 4];
            let k = rng.random_range(1..=16);
            DiscreteJoint::random(&mut rng, n, k, 2, false)
        })
        .collect()
}

/// `ln N - L <= I(E; Z)` on random joints, under the exact ratio and the
/// kernel scorer. `worst` is the most negative bound gap.
pub fn check_claim1_discrete(seed: u64, count: usize) -> Result<Check> {
    let mut worst = f64::INFINITY;
    for j in joints(seed, count)? {
        worst = worst.min(verify_claim1(&j)?.bound_gap);
        let kernel = Scorer::Kernel { alpha: 0.7, centroids: j.centroids() };
        worst = worst.min(verify_claim1_with(&j, &kernel)?.bound_gap);
    }
    Ok(Check {
        name: "claim1_discrete_bound".into(),
        criterion: "minimum of loss - (ln N - I) over joints; passes when >= -tolerance".into(),
        tolerance: EXACT_ABS_TOL,
        instances: count,
        worst,
        passed: worst >= -EXACT_ABS_TOL,
    })
}

/// The bound is an equality for one-to-one and for independent joints.
pub fn check_claim1_tight() -> Result<Check> {
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in [2usize, 3, 4, 8] {
        let b = DiscreteJoint::bijective(n)?;
        let ind = DiscreteJoint::independent(vec![1.0 / n as f64; n], vec![0.25, 0.75], vec![vec![0.0], vec![1.0]])?;
        for j in [b, ind] {
            worst = worst.max(verify_claim1(&j)?.bound_gap.abs());
            count += 1;
        }
    }
    Ok(upper("claim1_equality_cases", "max |loss - (ln N - I)| on bijective and independent joints", EXACT_ABS_TOL, count, worst))
}

/// The ratio form and the `ln(1 + ...)` form of the loss coincide on every
/// joint; the form that substitutes `N - 1` for the competitor sum is
/// checked only on independent joints, where it is exact.
pub fn check_proof_forms(seed: u64, count: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for j in joints(seed ^ 0x5f, count)? {
        let f = proof_forms(&j)?;
        worst = worst.max((f.ratio_form - f.one_plus_form).abs());
    }
    let ind = DiscreteJoint::independent(vec![0.2, 0.3, 0.5], vec![0.1, 0.9], vec![vec![0.0], vec![1.0]])?;
    let f = proof_forms(&ind)?;
    worst = worst.max((f.ratio_form - f.independence_form).abs());
    Ok(upper("claim1_proof_forms", "max absolute difference between rewritten forms of the loss", EXACT_ABS_TOL, count + 1, worst))
}

/// Monte Carlo bound on two one-dimensional Gaussian clusters across a
/// separation sweep. `worst` is the largest `(ln N - L) - I` in units of
/// its standard error.
pub fn check_claim1_gaussian(seed: u64, samples: usize) -> Result<Check> {
    const SWEEP: [f64; 5] = [0.0, 0.75, 1.5, 2.25, 3.0];
    let mut worst = f64::NEG_INFINITY;
    let mut passed = true;
    for (i, sep) in SWEEP.iter().enumerate() {
        let r = two_cluster_model(*sep, 0.5).bound_experiment(samples, derive_seed(seed, &[7, i as u64]))?;
        passed &= r.holds;
        let z = if r.se > 0.0 { -r.gap / r.se } else if r.gap < 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        worst = worst.max(z);
    }
    Ok(Check {
        name: "claim1_gaussian_sweep".into(),
        criterion: format!("max over separations {SWEEP:?} of (ln N - L - I) / SE with {samples} samples; passes when <= tolerance"),
        tolerance: GAUSSIAN_SIGMAS,
        instances: SWEEP.len(),
        worst,
        passed,
    })
}

pub fn verify_claims(opts: &SuiteOptions) -> Result<ClaimsReport> {
    let s = opts.seed;
    let checks = vec![
        check_claim2(s, opts.instances)?,
        check_claim3_decomposition(s, opts.instances)?,
        check_claim3_direction(s, opts.instances)?,
        check_claim4(s, opts.instances, opts.perturb)?,
        check_claim1_discrete(s, opts.joints)?,
        check_claim1_tight()?,
        check_proof_forms(s, opts.joints)?,
        check_claim1_gaussian(s, opts.gaussian_samples)?,
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(ClaimsReport { seed: s, perturb: opts.perturb, checks, passed })
}
