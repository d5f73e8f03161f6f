//! Finite-difference verification of the autodiff primitives, plus
//! second-order (gradient-of-gradient) checks.

use ndarray::{ArrayD, IxDyn};
use tinygan::gradcheck::{central_diff, rel_error};
use tinygan::rng::Rng;
use tinygan::tensor::{grad_values, gradients, Var};

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> ArrayD<f64> {
    rng.normal_tensor(shape, 1.0)
}

/// Checks d/dx of `build` (a scalar-valued graph of one input) against
/// central differences.
fn check_unary<F>(shape: &[usize], build: F, tol: f64)
where
    F: Fn(&Var) -> Var,
{
    let mut rng = Rng::from_seed(17, 0);
    let x0 = rand_tensor(&mut rng, shape);
    let x = Var::leaf(x0.clone());
    let y = build(&x);
    assert_eq!(y.len(), 1, "loss must be scalar");
    let analytic = grad_values(&y, &[&x]).remove(0);
    let numeric = central_diff(|xv| build(&Var::constant(xv.clone())).item(), &x0, 1e-5);
    let err = rel_error(&analytic, &numeric);
    assert!(err < tol, "gradient mismatch: rel err {err}");
}

#[test]
fn add_mul_broadcast_grads() {
    check_unary(&[3, 4], |x| {
        let b = Var::constant(ArrayD::from_elem(IxDyn(&[4]), 0.7));
        x.add(&b).mul(x).sum_all()
    }, 1e-7);
    check_unary(&[2, 3, 1], |x| {
        let b = Var::constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 5]), vec![1., 2., 3., 4., 5.]).unwrap());
        x.mul(&b).square().mean_all()
    }, 1e-7);
}

#[test]
fn div_sub_grads() {
    check_unary(&[4, 2], |x| {
        let c = Var::constant(ArrayD::from_elem(IxDyn(&[4, 2]), 2.5));
        x.sub(&c).div(&x.square().add_scalar(1.0)).sum_all()
    }, 1e-6);
}

#[test]
fn unary_chain_grads() {
    check_unary(&[6], |x| x.exp().ln().sigmoid().sum_all(), 1e-6);
    check_unary(&[6], |x| x.square().add_scalar(0.5).sqrt().sum_all(), 1e-6);
    check_unary(&[6], |x| x.softplus().sum_all(), 1e-6);
    check_unary(&[8], |x| x.leaky_relu(0.2).sum_all(), 1e-6);
    check_unary(&[8], |x| x.scale(3.0).abs().mean_all(), 1e-6);
}

#[test]
fn matmul_grads() {
    let mut rng = Rng::from_seed(3, 0);
    let a0 = rand_tensor(&mut rng, &[3, 4]);
    let b0 = rand_tensor(&mut rng, &[4, 2]);
    let a = Var::leaf(a0.clone());
    let b = Var::leaf(b0.clone());
    let y = a.matmul(&b).square().sum_all();
    let grads = grad_values(&y, &[&a, &b]);
    let na = central_diff(
        |av| {
            Var::constant(av.clone()).matmul(&Var::constant(b0.clone())).square().sum_all().item()
        },
        &a0,
        1e-5,
    );
    let nb = central_diff(
        |bv| {
            Var::constant(a0.clone()).matmul(&Var::constant(bv.clone())).square().sum_all().item()
        },
        &b0,
        1e-5,
    );
    assert!(rel_error(&grads[0], &na) < 1e-7);
    assert!(rel_error(&grads[1], &nb) < 1e-7);
}

#[test]
fn conv2d_grads_both_args() {
    let mut rng = Rng::from_seed(5, 0);
    let x0 = rand_tensor(&mut rng, &[2, 3, 5, 5]);
    let w0 = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let build = |xv: &ArrayD<f64>, wv: &ArrayD<f64>| {
        Var::constant(xv.clone())
            .conv2d(&Var::constant(wv.clone()), 1)
            .square()
            .mean_all()
            .item()
    };
    let x = Var::leaf(x0.clone());
    let w = Var::leaf(w0.clone());
    let y = x.conv2d(&w, 1).square().mean_all();
    let grads = grad_values(&y, &[&x, &w]);
    let nx = central_diff(|xv| build(xv, &w0), &x0, 1e-5);
    let nw = central_diff(|wv| build(&x0, wv), &w0, 1e-5);
    assert!(rel_error(&grads[0], &nx) < 1e-6, "conv dx");
    assert!(rel_error(&grads[1], &nw) < 1e-6, "conv dw");
}

#[test]
fn conv2d_1x1_and_no_pad() {
    let mut rng = Rng::from_seed(6, 0);
    let x0 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let w0 = rand_tensor(&mut rng, &[3, 2, 1, 1]);
    let x = Var::leaf(x0.clone());
    let w = Var::leaf(w0.clone());
    let y = x.conv2d(&w, 0).abs().sum_all();
    let grads = grad_values(&y, &[&x, &w]);
    let nx = central_diff(
        |xv| Var::constant(xv.clone()).conv2d(&Var::constant(w0.clone()), 0).abs().sum_all().item(),
        &x0,
        1e-5,
    );
    assert!(rel_error(&grads[0], &nx) < 1e-6);
    let nw = central_diff(
        |wv| Var::constant(x0.clone()).conv2d(&Var::constant(wv.clone()), 0).abs().sum_all().item(),
        &w0,
        1e-5,
    );
    assert!(rel_error(&grads[1], &nw) < 1e-6);
}

#[test]
fn resample_and_shape_grads() {
    check_unary(&[1, 2, 4, 4], |x| x.upsample2x().square().sum_all(), 1e-7);
    check_unary(&[1, 2, 4, 4], |x| x.avgpool2x().square().sum_all(), 1e-7);
    check_unary(&[3, 4], |x| x.reshape(&[2, 6]).slice_axis(1, 1, 3).sum_all(), 1e-7);
    check_unary(&[2, 5], |x| {
        let a = x.slice_axis(1, 0, 2);
        let b = x.slice_axis(1, 2, 3);
        Var::concat(1, &[b, a]).square().sum_all()
    }, 1e-7);
}

#[test]
fn softmax_and_normalize_grads() {
    check_unary(&[3, 5], |x| {
        let p = x.softmax_rows();
        p.mul(&p).sum_all()
    }, 1e-6);
    check_unary(&[4, 3], |x| {
        let n = x.l2_normalize_rows(1e-8);
        n.matmul(&n.t()).square().mean_all()
    }, 1e-6);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::from_seed(9, 0);
    let x = Var::constant(rand_tensor(&mut rng, &[5, 7]));
    let p = x.softmax_rows();
    for row in p.value().rows() {
        let s: f64 = row.sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn second_order_through_conv() {
    // f(w) = || d/dx sum(conv(x, w)^2) ||^2 — checks that the backward pass
    // itself is differentiable (as required by the R1 penalty).
    let mut rng = Rng::from_seed(11, 0);
    let x0 = rand_tensor(&mut rng, &[1, 2, 3, 3]);
    let w0 = rand_tensor(&mut rng, &[2, 2, 3, 3]);

    let f = |wv: &ArrayD<f64>| {
        let x = Var::leaf(x0.clone());
        let w = Var::constant(wv.clone());
        let y = x.conv2d(&w, 1).square().sum_all();
        let gx = gradients(&y, &[&x]).remove(0).unwrap();
        gx.square().sum_all()
    };

    let w = Var::leaf(w0.clone());
    let x = Var::leaf(x0.clone());
    let y = x.conv2d(&w, 1).square().sum_all();
    let gx = gradients(&y, &[&x]).remove(0).unwrap();
    let penalty = gx.square().sum_all();
    let analytic = grad_values(&penalty, &[&w]).remove(0);

    let numeric = central_diff(|wv| f(wv).item(), &w0, 1e-5);
    let err = rel_error(&analytic, &numeric);
    assert!(err < 1e-5, "second-order mismatch: {err}");
}

#[test]
fn second_order_through_mlp() {
    let mut rng = Rng::from_seed(13, 0);
    let x0 = rand_tensor(&mut rng, &[4, 3]);
    let w0 = rand_tensor(&mut rng, &[3, 3]);
    let f = |wv: &ArrayD<f64>| {
        let x = Var::leaf(x0.clone());
        let w = Var::constant(wv.clone());
        let y = x.matmul(&w).leaky_relu(0.2).square().sum_all();
        let gx = gradients(&y, &[&x]).remove(0).unwrap();
        gx.square().mean_all()
    };
    let x = Var::leaf(x0.clone());
    let w = Var::leaf(w0.clone());
    let y = x.matmul(&w).leaky_relu(0.2).square().sum_all();
    let gx = gradients(&y, &[&x]).remove(0).unwrap();
    let analytic = grad_values(&gx.square().mean_all(), &[&w]).remove(0);
    let numeric = central_diff(|wv| f(wv).item(), &w0, 1e-5);
    assert!(rel_error(&analytic, &numeric) < 1e-6);
}

#[test]
fn constants_build_no_graph() {
    let a = Var::constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
    let b = Var::constant(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
    let c = a.mul(&b).add(&a).conv2d(&Var::constant(ArrayD::from_elem(IxDyn(&[1, 2, 1, 1]), 1.0)), 0);
    // c exists only if shapes worked out; it must not require gradients.
    let _ = c;
    let d = a.mul(&b);
    assert!(!d.requires());
}

#[test]
fn deep_graph_drops_without_overflow() {
    let mut x = Var::leaf(ArrayD::from_elem(IxDyn(&[4]), 0.5));
    let root = x.clone();
    for _ in 0..200_000 {
        x = x.add_scalar(1.0e-9);
    }
    drop(x);
    drop(root);
}

#[test]
fn gradient_accumulates_over_reuse() {
    let x = Var::leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
    let y = x.mul(&x).sum_all(); // y = sum(x^2), dy/dx = 2x = 4
    let g = grad_values(&y, &[&x]).remove(0);
    for v in g.iter() {
        assert!((v - 4.0).abs() < 1e-12);
    }
}

#[test]
fn determinism_bitwise() {
    let run = || {
        let mut rng = Rng::from_seed(23, 1);
        let x = Var::leaf(rng.normal_tensor(&[2, 3, 8, 8], 1.0));
        let w = Var::leaf(rng.normal_tensor(&[4, 3, 3, 3], 0.3));
        let y = x.conv2d(&w, 1).leaky_relu(0.2).avgpool2x().square().mean_all();
        let g = grad_values(&y, &[&x, &w]);
        (y.item(), g[0].clone(), g[1].clone())
    };
    let (y1, gx1, gw1) = run();
    let (y2, gx2, gw2) = run();
    assert_eq!(y1.to_bits(), y2.to_bits());
    assert_eq!(
        gx1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        gx2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        gw1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        gw2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
