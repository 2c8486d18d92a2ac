use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar probe `Σ w ⊙ y` with fixed random weights, so that no gradient
/// entry is structurally zero.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&y.shape(), &mut rng);
    y.mul(y.tape().constant(w))?.sum()
}

const TOL: f64 = 1e-4;

#[test]
fn sigmoid_at_zero_is_half() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::scalar(0.0));
    assert_eq!(x.sigmoid().unwrap().value().item(), 0.5);
}

#[test]
fn fully_masked_softmax_row_is_an_error() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2, 3]));
    let mask = Tensor::new(vec![2, 3], vec![0.0, MASK_NEG, 0.0, MASK_NEG, MASK_NEG, MASK_NEG]).unwrap();
    assert!(matches!(x.softmax(Some(&mask)), Err(Error::FullyMaskedRow { row: 1 })));
    let ok = Tensor::new(vec![2, 3], vec![0.0, MASK_NEG, 0.0, MASK_NEG, 0.0, MASK_NEG]).unwrap();
    let y = x.softmax(Some(&ok)).unwrap().value();
    assert_eq!(y.data(), &[0.5, 0.0, 0.5, 0.0, 1.0, 0.0]);
}

#[test]
fn mean_of_square_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let loss = x.mul(x).unwrap().mean().unwrap();
    let g = tape.backward(loss).unwrap().wrt(x);
    assert_eq!(g.data(), &[1.0, 2.0]);

    let report = grad_check(
        |_, v| v[0].mul(v[0])?.mean(),
        &[Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "{report:?}");
}

#[test]
fn backward_basics() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let unused = tape.param(Tensor::ones(&[2, 2]));
    let loss = x.sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
    assert_eq!(grads.wrt(unused).data(), &[0.0; 4]);

    // two paths: x·3 + x  => gradient 4
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new(vec![2], vec![1.0, 5.0]).unwrap());
    let y = x.scale(3.0).unwrap().add(x).unwrap().sum().unwrap();
    assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[4.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::ones(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::<f32>::new();
    let a = tape.param(Tensor::ones(&[2, 3]));
    let b = tape.param(Tensor::ones(&[2, 2]));
    let err = a.matmul(b).unwrap_err().to_string();
    assert!(err.starts_with("matmul"), "{err}");
    let err = a.add(b).unwrap_err().to_string();
    assert!(err.starts_with("add") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn linear_function_checks_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random(&[4, 3], &mut rng);
    let x = random(&[5, 4], &mut rng);
    let report = grad_check(|_, v| probe(v[0].matmul(v[1])?.scale(0.5)?, 3), &[x, w], 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

#[test]
fn corrupted_backward_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 4], &mut rng);
    // forward is tanh, backward pretends it is the identity
    let report = grad_check(
        |tape, v| {
            let value = v[0].value();
            let y = Tensor::new(value.shape().to_vec(), value.data().iter().map(|a| a.tanh()).collect())?;
            let y = tape.custom(&[v[0]], y, Box::new(|g, _, _| vec![g.clone()]))?;
            probe(y.scale(2.0)?, 5)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err > 1e-2, "{report:?}");
}

#[test]
fn nan_check_aborts_on_non_finite() {
    let tape = Tape::<f32>::new();
    tape.set_nan_check(true);
    let x = tape.param(Tensor::new(vec![1], vec![-1.0]).unwrap());
    assert!(matches!(x.ln_floor(-2.0), Err(Error::NonFinite { .. })));
}

#[test]
fn dropout_zero_is_identity() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::ones(&[2, 2]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = x.dropout(0.0, &mut rng).unwrap();
    assert_eq!(y.id(), x.id());
    let z = x.dropout(0.5, &mut rng).unwrap().value();
    assert!(z.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn causal_conv_matches_direct_sum() {
    let tape = Tape::<f64>::new();
    let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(vec![3, 1], vec![0.5, 0.25, 1.0]).unwrap();
    let b = Tensor::new(vec![1], vec![0.1]).unwrap();
    let y = tape
        .param(x)
        .causal_depthwise_conv1d(tape.param(w), tape.param(b))
        .unwrap()
        .value();
    // y[t] = 0.1 + 1.0·x[t] + 0.25·x[t−1] + 0.5·x[t−2]
    let want = [1.1, 2.35, 4.1, 5.85];
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn concat_and_slice_are_inverse() {
    let tape = Tape::<f32>::new();
    let a = tape.param(Tensor::from_fn(&[2, 3], |i| i as f32));
    let b = tape.param(Tensor::from_fn(&[2, 2], |i| 10.0 + i as f32));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(c.shape(), vec![2, 5]);
    assert_eq!(c.value().row(1), &[3.0, 4.0, 5.0, 12.0, 13.0]);
    assert_eq!(*c.slice(1, 3, 2).unwrap().value(), *b.value());
}

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..5, 1usize..6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn elementwise_ops_pass_grad_check((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[r, c], &mut rng);
        let b = random(&[r, c], &mut rng);
        let row = random(&[c], &mut rng);
        let rep = grad_check(|_, v| {
            let s = v[0].add(v[1])?.mul(v[0].sub(v[1])?)?;
            let s = s.add_row(v[2])?.mul_row(v[2])?.scale(0.7)?.add_scalar(0.3)?;
            let s = s.sigmoid()?.add(v[0].swish()?)?;
            probe(s, seed ^ 1)
        }, &[a, b, row], 1e-5).unwrap();
        prop_assert!(rep.max_rel_err < TOL, "{:?}", rep);
    }

    #[test]
    fn kinked_ops_pass_grad_check_away_from_kinks((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep |x| ≥ 0.1 so central differences never straddle a kink
        let a = Tensor::from_fn(&[r, c], |_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { v } else { -v }
        });
        let rep = grad_check(|_, v| {
            let s = v[0].relu()?.add(v[0].abs()?)?;
            let pos = v[0].abs()?.add_scalar(0.5)?.ln_floor(1e-10)?;
            probe(s.add(pos)?, seed)
        }, &[a], 1e-5).unwrap();
        prop_assert!(rep.max_rel_err < TOL, "{:?}", rep);
    }

    #[test]
    fn matmul_transpose_reshape_pass_grad_check((m, k, seed) in dims(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[n, k], &mut rng);
        let bias = random(&[n], &mut rng);
        let rep = grad_check(|_, v| {
            let y = v[0].affine(v[1].transpose()?, v[2])?;
            let y = y.reshape(&[m * n])?.reshape(&[n, m])?;
            probe(y, seed)
        }, &[a, b, bias], 1e-5).unwrap();
        prop_assert!(rep.max_rel_err < TOL, "{:?}", rep);
    }

    #[test]
    fn structural_ops_pass_grad_check((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[r, c], &mut rng);
        let b = random(&[r, c + 1], &mut rng);
        let idx: Vec<usize> = (0..r + 2).map(|i| (i * 7 + 3) % r).collect();
        let rep = grad_check(|tape, v| {
            let cat = tape.concat(&[v[0], v[1]], 1)?;
            let rows = tape.concat(&[cat, cat.scale(2.0)?], 0)?;
            let part = rows.slice(1, 1, c)?.slice(0, r / 2, r)?;
            let gathered = part.gather_rows(&idx)?;
            let total = probe(gathered, seed)?;
            total.add(v[0].mean()?)?.add(v[1].sum()?.scale(0.1)?)
        }, &[a, b], 1e-5).unwrap();
        prop_assert!(rep.max_rel_err < TOL, "{:?}", rep);
    }

    #[test]
    fn softmax_layer_norm_glu_pass_grad_check((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = c + 1;
        let a = random(&[r, 2 * c], &mut rng);
        let gamma = Tensor::from_fn(&[2 * c], |_| rng.random_range(0.5..1.5));
        let beta = random(&[2 * c], &mut rng);
        // causal mask: column j visible to row i iff j ≤ i
        let mask = Tensor::from_fn(&[r, 2 * c], |i| if i % (2 * c) <= i / (2 * c) { 0.0 } else { MASK_NEG });
        let rep = grad_check(|_, v| {
            let n = v[0].layer_norm(v[1], v[2], 1e-5)?;
            let s = n.softmax(Some(&mask))?;
            let g = v[0].glu()?;
            Ok(probe(s, seed)?.add(probe(g, seed ^ 7)?)?)
        }, &[a, gamma, beta], 1e-5).unwrap();
        prop_assert!(rep.max_rel_err < TOL, "{:?}", rep);
    }

    #[test]
    fn causal_conv_passes_grad_check((t, c, seed) in dims(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[t, c], &mut rng);
        let w = random(&[k, c], &mut rng);
        let b = random(&[c], &mut rng);
        let rep = grad_check(|_, v| probe(v[0].causal_depthwise_conv1d(v[1], v[2])?, seed), &[x, w, b], 1e-5).unwrap();
        prop_assert!(rep.max_rel_err < TOL, "{:?}", rep);
    }

    #[test]
    fn forward_is_deterministic((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[r, c], &mut rng).cast::<f32>();
        let run = || {
            let tape = Tape::<f32>::new();
            let x = tape.param(a.clone());
            let y = x.matmul(x.transpose().unwrap()).unwrap().softmax(None).unwrap();
            (*y.value()).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
