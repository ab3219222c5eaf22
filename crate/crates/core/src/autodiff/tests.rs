use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, op_cases, Coords};
use super::*;
use crate::error::CscError;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut t = Tape::new();
    let eye = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = t.constant(&[2, 2], vec![0.3, -2.0, 5.0, 7.5]).unwrap();
    let p = t.matmul(eye, b).unwrap();
    assert_eq!(t.value(p), t.value(b));

    let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = t.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
    let p = t.matmul(a, ones).unwrap();
    assert_eq!(t.shape(p), &[2, 1]);
    assert_eq!(t.value(p), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(t.matmul(a, b), Err(CscError::Shape { .. })));
}

#[test]
fn matmul_gradcheck_3x4_by_4x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let r = check(
        &[a, b],
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let w = t.constant(&[3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5])?;
            let q = t.mul(p, w)?;
            t.sum(q)
        },
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_hand_cases() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 2], vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
    let s = t.softmax_rows(a).unwrap();
    let v = t.value(s);
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
}

#[test]
fn sq_l2_hand_cases() {
    let mut t = Tape::new();
    let a = t.constant(&[2], vec![1.0, 0.0]).unwrap();
    let b = t.constant(&[2], vec![0.0, 1.0]).unwrap();
    let d = t.sq_l2(a, b).unwrap();
    assert_eq!(t.scalar(d), 2.0);
    let d0 = t.sq_l2(a, a).unwrap();
    assert_eq!(t.scalar(d0), 0.0);
    let c = t.constant(&[3], vec![0.0; 3]).unwrap();
    assert!(t.sq_l2(a, c).is_err());
}

#[test]
fn sq_l2_gradient_is_twice_difference() {
    let mut t = Tape::new();
    let a = t.param(&Tensor::vector(vec![0.4, -1.2, 3.0])).unwrap();
    let b = t.constant(&[3], vec![1.0, 1.0, -1.0]).unwrap();
    let d = t.sq_l2(a, b).unwrap();
    let g = t.backward(d).unwrap();
    let ga = g.get(a).unwrap();
    for (x, want) in ga.iter().zip([2.0 * (0.4 - 1.0), 2.0 * (-1.2 - 1.0), 2.0 * 4.0]) {
        assert!((x - want).abs() < 1e-15);
    }
}

#[test]
fn logsumexp_cases() {
    let mut t = Tape::new();
    let a = t.constant(&[1], vec![-3.25]).unwrap();
    let l = t.logsumexp(a).unwrap();
    assert_eq!(t.scalar(l), -3.25);
    let b = t.constant(&[2], vec![0.0, 0.0]).unwrap();
    let l = t.logsumexp(b).unwrap();
    assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
    let c = t.constant(&[2], vec![-1000.0, 0.0]).unwrap();
    let l = t.logsumexp(c).unwrap();
    assert!(t.scalar(l).abs() < 1e-300 || t.scalar(l) == 0.0);
}

#[test]
fn backward_of_sum_is_ones_and_sq_norm_is_2x() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let zero = t.constant(&[3], vec![0.0; 3]).unwrap();
    let d = t.sq_l2(x, zero).unwrap();
    let g = t.backward(d).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(t.backward(x), Err(CscError::Contract(_))));
}

#[test]
fn reused_operand_accumulates() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::vector(vec![3.0])).unwrap();
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    let s = t.sum(z).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[7.0]);
}

#[test]
fn nan_forward_is_an_error() {
    let mut t = Tape::new();
    let x = t.constant(&[1], vec![-1.0]).unwrap();
    assert!(matches!(t.ln(x), Err(CscError::NonFinite { op: "ln" })));
    assert!(matches!(t.sqrt(x), Err(CscError::NonFinite { .. })));
    assert!(t.constant(&[1], vec![f64::NAN]).is_err());
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::vector(vec![2.0])).unwrap();
    let d = t.detach(x).unwrap();
    let y = t.mul(x, d).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0]);
}

#[test]
fn permute3_round_trip() {
    let x: Vec<f64> = (0..24).map(f64::from).collect();
    let p = SparseMap::permute3([2, 3, 4], [2, 0, 1]).unwrap();
    assert_eq!(p.out_shape(), &[4, 2, 3]);
    let y = p.apply(&x);
    // y[c][a][b] == x[a][b][c]
    assert_eq!(y[3 * 6 + 1 * 3 + 2], x[1 * 12 + 2 * 4 + 3]);
    let back = SparseMap::permute3([4, 2, 3], [1, 2, 0]).unwrap();
    assert_eq!(back.apply(&y), x);
}

#[test]
fn every_op_matches_finite_differences_on_100_instances() {
    for case in op_cases() {
        let mut worst: f64 = 0.0;
        for inst in 0..100u64 {
            worst = worst.max(case.check(1000 + inst, 1e-5).unwrap().max_rel_err);
        }
        assert!(worst < 1e-4, "{}: max relative error {worst}", case.name);
    }
}

#[test]
fn relu_inputs_stay_off_the_kink() {
    let relu = op_cases().into_iter().find(|c| c.name == "relu").unwrap();
    for inst in 0..100 {
        assert!(relu.inputs(inst)[0].data().iter().all(|x| x.abs() >= 1e-3));
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let r = rows.len();
        let mut t = Tape::new();
        let a = t.constant(&[r, 5], rows.concat()).unwrap();
        let s = t.softmax_rows(a).unwrap();
        let shifted: Vec<f64> = rows.concat().iter().map(|x| x + shift).collect();
        let b = t.constant(&[r, 5], shifted).unwrap();
        let sb = t.softmax_rows(b).unwrap();
        for (row, row_b) in t.value(s).chunks(5).zip(t.value(sb).chunks(5)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0 && p <= 1.0));
            for (p, q) in row.iter().zip(row_b) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logsumexp_bounded_by_max_and_max_plus_ln_n(v in prop::collection::vec(-500.0f64..500.0, 1..20)) {
        let l = logsumexp_slice(&v);
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(l >= m);
        prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
    }
}
