use proptest::prelude::*;
use tensorgrad::{Conv2dParams, OpKind, Tape, Tensor, TensorError};

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn averaging_kernel_preserves_constant_image() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 0.37));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = tape.conv2d(x, w, Conv2dParams::reflect(1, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 5, 5]);
    for &v in tape.value(y).data() {
        assert!((v - 0.37).abs() < 1e-6, "{v}");
    }
}

#[test]
fn identity_matmul() {
    let mut tape = Tape::<f32>::new();
    let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let a = t(&[3, 3], &[1., -2., 3., 4., 5., -6., 7., 8., 9.5]);
    let av = tape.constant(a.clone());
    let y = tape.matmul(eye, av).unwrap();
    assert_eq!(tape.value(y), &a);
}

#[test]
fn single_window_conv() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let w = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
    let y = tape.conv2d(x, w, Conv2dParams::new(1, 0)).unwrap();
    assert_eq!(tape.value(y), &t(&[1, 1, 1, 1], &[5.]));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq, 0).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn log_softmax_gradient_at_origin() {
    let mut tape = Tape::<f32>::new();
    let z = tape.leaf(t(&[1, 2], &[0., 0.]), true);
    let ls = tape.log_softmax(z).unwrap();
    let pick = tape.constant(t(&[1, 2], &[1., 0.]));
    let sel = tape.mul(ls, pick).unwrap();
    let s = tape.sum(sel, 0).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(z).unwrap().data();
    assert!((g[0] - 0.5).abs() < 1e-7 && (g[1] + 0.5).abs() < 1e-7, "{g:?}");
}

#[test]
fn product_rule() {
    let (xv, yv) = (t(&[3], &[1., -2., 0.5]), t(&[3], &[4., 3., -1.]));
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(xv.clone(), true);
    let y = tape.leaf(yv.clone(), true);
    let p = tape.mul(x, y).unwrap();
    let s = tape.sum(p, 0).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &yv);
    assert_eq!(tape.grad(y).unwrap(), &xv);
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[2], &[1., 2.]), true);
    let y = tape.scalar_mul(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    let s = tape.sum(y, 0).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s), Err(TensorError::TapeConsumed));
    assert!(tape.is_consumed());
}

#[test]
fn leaf_gradients_accumulate_across_outputs() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[2], &[1., 2.]), true);
    let s1 = tape.sum(x, 0).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s2 = tape.sum(sq, 0).unwrap();
    tape.backward(s1).unwrap();
    tape.backward(s2).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3., 5.]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_is_linear_in_the_output() {
    let xv = t(&[3], &[0.3, -0.7, 1.1]);
    let grad_of = |which: u8| {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(xv.clone(), true);
        let a = {
            let sq = tape.mul(x, x).unwrap();
            tape.sum(sq, 0).unwrap()
        };
        let b = {
            let s = tape.silu(x).unwrap();
            tape.sum(s, 0).unwrap()
        };
        let out = match which {
            0 => a,
            1 => b,
            _ => tape.add(a, b).unwrap(),
        };
        tape.backward(out).unwrap();
        tape.grad(x).unwrap().clone()
    };
    let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..3 {
        assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-6);
    }
}

#[test]
fn vjp_does_not_consume() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[2], &[1., 3.]), true);
    let y = tape.mul(x, x).unwrap();
    let g1 = tape.vjp(y, &t(&[2], &[1., 0.]), &[x]).unwrap();
    let g2 = tape.vjp(y, &t(&[2], &[0., 1.]), &[x]).unwrap();
    assert_eq!(g1[0].data(), &[2., 0.]);
    assert_eq!(g2[0].data(), &[0., 6.]);
    assert!(!tape.is_consumed());
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]"), "{err}");
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(tape.sub(a, c), Err(TensorError::Shape { op: "sub", .. })));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(t(&[1], &[f32::MAX]));
    let err = tape.scalar_mul(a, 10.0).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "scalar_mul" });
}

#[test]
fn constants_record_no_gradient_path() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(t(&[2], &[1., 2.]));
    let b = tape.relu(a).unwrap();
    assert!(!tape.requires_grad(b));
    assert_eq!(tape.count_ops(OpKind::Relu), 1);
}

#[test]
fn group_norm_normalizes_each_group() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 4, 2, 2], |i| (i as f32).powi(2) * 0.1));
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.group_norm(x, g, b, 2).unwrap();
    for grp in tape.value(y).data().chunks(8) {
        let mean: f32 = grp.iter().sum::<f32>() / 8.0;
        let var: f32 = grp.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3, "{mean} {var}");
    }
}

fn conv_output(x: &Tensor, w: &Tensor) -> Tensor {
    let mut tape = Tape::<f32>::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, Conv2dParams::new(2, 1)).unwrap();
    tape.value(y).clone()
}

proptest! {
    #[test]
    fn primitives_are_pure(data in proptest::collection::vec(-2.0f32..2.0, 32), wdata in proptest::collection::vec(-1.0f32..1.0, 18)) {
        let x = t(&[1, 2, 4, 4], &data);
        let w = t(&[1, 2, 3, 3], &wdata);
        let a = conv_output(&x, &w);
        let b = conv_output(&x, &w);
        prop_assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn transposed_conv_is_the_adjoint_of_conv(
        x in proptest::collection::vec(-1.0f64..1.0, 2 * 6 * 6),
        y in proptest::collection::vec(-1.0f64..1.0, 3 * 3 * 3),
        w in proptest::collection::vec(-1.0f64..1.0, 3 * 2 * 4 * 4),
    ) {
        // <conv(x, w), y> == <x, conv_t(y, w)> with matching geometry
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![1, 2, 6, 6], x.clone()).unwrap());
        let wv = tape.constant(Tensor::new(vec![3, 2, 4, 4], w.clone()).unwrap());
        let yv = tape.constant(Tensor::new(vec![1, 3, 3, 3], y.clone()).unwrap());
        let cx = tape.conv2d(xv, wv, Conv2dParams::new(2, 1)).unwrap();
        let ty = tape.conv_transpose2d(yv, wv, 2, 1).unwrap();
        prop_assert_eq!(tape.shape(cx), &[1, 3, 3, 3]);
        prop_assert_eq!(tape.shape(ty), &[1, 2, 6, 6]);
        let lhs: f64 = tape.value(cx).data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = tape.value(ty).data().iter().zip(&x).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}
