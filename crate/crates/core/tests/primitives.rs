//! Every tape primitive against central finite differences (f64, h = 1e-4).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinklab_core::tensor::{grad_check, GradCheckOptions, Tape, Tensor, Unary, Var};
use sinklab_core::Result;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Checks `Σ w ⊙ f(params)` where `w` is a fixed random weighting of the output.
fn check<B>(seed: u64, params: Vec<Tensor<f64>>, build: B)
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |p: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = weights
            .get_or_insert_with(|| random(&shape, &mut rng, -1.0, 1.0))
            .clone();
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        let root = tape.sum_all(prod)?;
        let value = tape.value(root).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape
            .backward(root, p.len())?
            .into_iter()
            .zip(p)
            .map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = eval(&params, true).unwrap();
    let report = grad_check(
        |p| eval(p, false).map(|(v, _)| v),
        &analytic,
        &params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn matmul_and_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random(&[5, 4], &mut rng, -1.0, 1.0) } else { random(&[4, 5], &mut rng, -1.0, 1.0) };
        let b = if tb { random(&[3, 5], &mut rng, -1.0, 1.0) } else { random(&[5, 3], &mut rng, -1.0, 1.0) };
        check(2, vec![a, b], |t, v| t.matmul_t(v[0], ta, v[1], tb));
    }
}

#[test]
fn arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random(&[3, 4], &mut rng, -1.0, 1.0), random(&[3, 4], &mut rng, -1.0, 1.0));
    let row = random(&[1, 4], &mut rng, -1.0, 1.0);
    check(4, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check(5, vec![a.clone(), b], |t, v| t.mul(v[0], v[1]));
    check(6, vec![a.clone(), row], |t, v| t.add_row(v[0], v[1]));
    check(7, vec![a.clone()], |t, v| t.scale(v[0], 0.37));
    check(8, vec![a], |t, v| t.add_scalar(v[0], 1.5));
}

#[test]
fn unary_kinds() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in [
        Unary::Sigmoid,
        Unary::Elu,
        Unary::Exp,
        Unary::Relu,
        Unary::Gelu,
        Unary::Swish,
        Unary::Abs,
        Unary::MaxAbsOne,
    ] {
        // keep inputs away from kinks at 0 and ±1
        let x = random(&[4, 5], &mut rng, -2.0, 2.0).map(|v| {
            let v = if v.abs() < 0.05 { v + 0.1 } else { v };
            if (v.abs() - 1.0).abs() < 0.05 { v * 1.1 } else { v }
        });
        check(10, vec![x], move |t, v| t.unary(v[0], kind));
    }
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[3, 6], &mut rng, -2.0, 2.0);
    let g = random(&[6], &mut rng, 0.5, 1.5);
    let b = random(&[6], &mut rng, -0.5, 0.5);
    check(12, vec![x.clone(), g.clone()], |t, v| t.rms_norm(v[0], v[1], 1e-6));
    check(13, vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6));
}

#[test]
fn softmax_with_and_without_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[4, 4], &mut rng, -2.0, 2.0);
    check(15, vec![x.clone()], |t, v| t.softmax(v[0], None));
    let mut mask = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        for j in i + 1..4 {
            mask.set(i, j, -1e30);
        }
    }
    check(16, vec![x], move |t, v| t.softmax(v[0], Some(&mask)));
}

#[test]
fn row_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[3, 5], &mut rng, -1.0, 1.0);
    let z = random(&[3, 1], &mut rng, 0.5, 2.0);
    check(18, vec![x.clone()], |t, v| t.row_sum(v[0]));
    check(19, vec![x.clone(), z], |t, v| t.div_rows(v[0], v[1]));
    check(20, vec![x], |t, v| t.sum_all(v[0]));
}

#[test]
fn indexing_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let table = random(&[6, 3], &mut rng, -1.0, 1.0);
    check(22, vec![table], |t, v| t.gather(v[0], &[2, 0, 2, 5]));
    let scalars = random(&[5, 1], &mut rng, -1.0, 1.0);
    check(23, vec![scalars], |t, v| {
        t.gather_scalars(v[0], vec![Some(0), None, Some(4), Some(0), Some(2), None], 2, 3)
    });
    let (a, b) = (random(&[3, 2], &mut rng, -1.0, 1.0), random(&[3, 4], &mut rng, -1.0, 1.0));
    check(24, vec![b.clone()], |t, v| t.slice_cols(v[0], 1, 2));
    check(25, vec![a.clone(), b.clone()], |t, v| t.concat_cols(&[v[0], v[1]]));
    let c = random(&[2, 4], &mut rng, -1.0, 1.0);
    check(26, vec![b, c], |t, v| t.concat_rows(&[v[0], v[1]]));
    check(27, vec![a], |t, v| t.pad_cols(v[0], 5));
}

#[test]
fn rotary_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let x = random(&[3, 4], &mut rng, -1.0, 1.0);
    let angles: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
    let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
    check(29, vec![x], move |t, v| t.rotary(v[0], cos.clone(), sin.clone()));
}

#[test]
fn cross_entropy_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let logits = random(&[4, 6], &mut rng, -2.0, 2.0);
    check(31, vec![logits], |t, v| t.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)]));
}

#[test]
fn unused_parameter_has_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(0, Tensor::full(&[2, 2], 1.0));
    let _unused = tape.param(1, Tensor::full(&[2, 2], 1.0));
    let s = tape.sum_all(a).unwrap();
    let grads = tape.backward(s, 2).unwrap();
    assert!(grads[0].is_some());
    assert!(grads[1].is_none());
}

#[test]
fn exp_overflow_is_reported() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1], 200.0));
    assert!(matches!(
        tape.unary(x, Unary::Exp),
        Err(sinklab_core::Error::Overflow { .. })
    ));
}

#[test]
fn pointwise_values() {
    assert_eq!(Unary::Sigmoid.apply(0.0f64), 0.5);
    assert_eq!(Unary::Elu.apply(0.0f64) + 1.0, 1.0);
    assert!((Unary::Swish.apply(1.0f64) - 0.73106).abs() < 1e-5);
}
