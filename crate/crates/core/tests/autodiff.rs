use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal_core::autodiff::{
    check_against_differences, gradient_check, Graph, ParamStore, Reduce, Tensor, Unary,
};
use xmodal_core::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.values()[i * k + p] * b.values()[p * n + j];
            }
        }
    }
    out
}

fn naive_conv(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (x * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += input.values()[(ic * h + iy as usize) * w + ix as usize]
                                * kernel.values()[((oc * c + ic) * kh + i) * kw + j];
                        }
                    }
                }
                out[(oc * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn add_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 4], &mut rng);
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let z = g.constant(Tensor::zeros_like(&x));
    let s = g.add(a, z).unwrap();
    assert_eq!(g.value(s).values(), x.values());
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[5]).unwrap());
    let y = g.sigmoid(x);
    assert!(g.value(y).values().iter().all(|&v| v == 0.5));
}

#[test]
fn exp_log_round_trip() {
    let grid: Vec<f64> = (0..200).map(|i| 0.1 + 9.9 * i as f64 / 199.0).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[200], grid.clone()).unwrap());
    let l = g.log(x);
    let e = g.exp(l);
    assert!(max_abs_diff(g.value(e).values(), &grid) < 1e-12);
}

#[test]
fn log_clamps_non_positive_inputs() {
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::new(&[2], vec![0.0, -3.0])
            .unwrap()
            .with_requires_grad(),
    );
    let l = g.log(x);
    let expected = 1e-12f64.ln();
    assert!(g.value(l).values().iter().all(|&v| v == expected));
    let s = g.sum(l);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[3, 2]).unwrap());
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(g.matmul(a, a), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn scalar_broadcasts_both_ways() {
    let mut g = Graph::new();
    let a = g.leaf(
        Tensor::new(&[3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .with_requires_grad(),
    );
    let s = g.leaf(Tensor::scalar(2.0).with_requires_grad());
    let p = g.mul(s, a).unwrap();
    assert_eq!(g.value(p).values(), &[2.0, 4.0, 6.0]);
    let q = g.sub(p, s).unwrap();
    let loss = g.sum(q);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(a).unwrap(), &[2.0, 2.0, 2.0]);
    // d/ds Σ(s·a_i − s) = Σ a_i − 3
    assert_eq!(grads.wrt(s).unwrap(), &[3.0]);
}

#[test]
fn matmul_identity_and_scalar() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 4], &mut rng);
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let i = g.constant(Tensor::eye(4).unwrap());
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).values(), x.values());

    let two = g.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let three = g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let six = g.matmul(two, three).unwrap();
    assert_eq!(g.value(six).values(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        assert!(max_abs_diff(g.value(c).values(), &naive_matmul(&a, &b)) <= 1e-12);
    }
}

#[test]
fn conv2d_identity_and_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[1, 5, 5], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
    let y = g.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(g.value(y).values(), x.values());

    let ones = g.constant(Tensor::ones(&[1, 2, 2]).unwrap());
    let k2 = g.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
    let y2 = g.conv2d(ones, k2, 1, 0).unwrap();
    assert_eq!(g.value(y2).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y2).values(), &[4.0]);
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        assert!(max_abs_diff(g.value(y).values(), &naive_conv(&x, &k, stride, pad)) <= 1e-12);
    }
}

#[test]
fn conv2d_batched_equals_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 2, 6, 6], &mut rng);
    let k = random(&[4, 2, 4, 4], &mut rng);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, 2, 1).unwrap();
    let per = 2 * 6 * 6;
    let out_per = 4 * 3 * 3;
    for n in 0..3 {
        let xi = Tensor::new(&[2, 6, 6], x.values()[n * per..(n + 1) * per].to_vec()).unwrap();
        let oracle = naive_conv(&xi, &k, 2, 1);
        let got = &g.value(y).values()[n * out_per..(n + 1) * out_per];
        assert!(max_abs_diff(got, &oracle) <= 1e-12);
    }
}

#[test]
fn conv2d_rejects_non_integer_output() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 5, 5]).unwrap());
    let k = g.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
    assert!(matches!(
        g.conv2d(x, k, 2, 0),
        Err(Error::InvalidShape { .. })
    ));
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[4, 2]).unwrap());
    let s = g.sum(z);
    assert_eq!(g.value(s).item(), 0.0);
    let x = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let m = g.mean(x);
    assert_eq!(g.value(m).item(), 2.0);
    assert!(g.reduce(Reduce::Sum, x, Some(1)).is_err());
}

#[test]
fn max_with_duplicates_routes_to_lowest_index() {
    // Column 0 has its maximum twice (rows 0 and 2); column 1 once (row 1).
    let x = Tensor::new(&[3, 2], vec![5.0, 1.0, 2.0, 4.0, 5.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad());
    let m = g.reduce(Reduce::Max, xv, Some(0)).unwrap();
    assert_eq!(g.value(m).values(), &[5.0, 4.0]);
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    let analytic = grads.wrt(xv).unwrap().to_vec();
    assert_eq!(analytic, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);

    // Forward differences: away from the tie they equal the routed gradient.
    let value = |t: &Tensor| -> xmodal_core::Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let m = g.reduce(Reduce::Max, v, Some(0))?;
        Ok(g.value(m).values().iter().sum())
    };
    let eps = 1e-5;
    for i in 0..6 {
        let mut plus = x.clone();
        plus.values_mut()[i] += eps;
        let forward = (value(&plus).unwrap() - value(&x).unwrap()) / eps;
        // Raising the unrouted tied copy also raises the max; it gets no gradient.
        if i == 4 {
            assert!((forward - 1.0).abs() < 1e-6);
            assert_eq!(analytic[i], 0.0);
        } else {
            assert!((forward - analytic[i]).abs() < 1e-6, "coordinate {i}");
        }
    }
}

#[test]
fn backward_of_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 3], &mut rng);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad());
    let s = g.sum(xv);
    assert_eq!(g.backward(s).unwrap().wrt(xv).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    let expected: Vec<f64> = x.values().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.wrt(xv).unwrap(), expected.as_slice());
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]).unwrap().with_requires_grad());
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

#[test]
fn parameter_gradients_land_in_their_store() {
    let mut a = ParamStore::new();
    let mut b = ParamStore::new();
    let wa = a
        .add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let wb = b
        .add("w", Tensor::new(&[2], vec![3.0, 4.0]).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let va = g.param(&a, wa);
    let vb = g.param(&b, wb);
    let p = g.mul(va, vb).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    grads.accumulate_into(&mut a);
    assert_eq!(a.get(wa).grad().unwrap(), &[3.0, 4.0]);
    assert!(b.get(wb).grad().is_none());
    grads.accumulate_into(&mut b);
    assert_eq!(b.get(wb).grad().unwrap(), &[1.0, 2.0]);
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::ones(&[3]).unwrap()).unwrap();
    s.set_requires_grad(false);
    let mut g = Graph::new();
    let v = g.param(&s, w);
    assert!(!g.requires_grad(v));
    let l = g.sum(v);
    g.backward(l).unwrap().accumulate_into(&mut s);
    assert!(s.get(w).grad().is_none());
}

#[test]
fn gradient_check_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[4, 3], &mut rng);
    let err = gradient_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
    assert!(err <= 1e-10, "{err}");
}

fn dense_sigmoid(
    g: &mut Graph,
    x: xmodal_core::autodiff::Var,
    w: &Tensor,
) -> xmodal_core::Result<xmodal_core::autodiff::Var> {
    let wv = g.constant(w.clone());
    let h = g.matmul(x, wv)?;
    let y = g.sigmoid(h);
    Ok(g.sum(y))
}

#[test]
fn gradient_check_sigmoid_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 4], &mut rng);
    let w = random(&[4, 3], &mut rng);
    let err = gradient_check(|g, x| dense_sigmoid(g, x, &w), &x, 1e-5).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn gradient_check_catches_wrong_rule() {
    // Negative control: claim d sigmoid/dx = sigmoid(x) instead of σ(1 − σ).
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[6], &mut rng);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let wrong: Vec<f64> = x.values().iter().map(|&v| sig(v)).collect();
    let err = check_against_differences(
        |t| Ok(t.values().iter().map(|&v| sig(v)).sum()),
        &wrong,
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn gradient_check_reports_non_finite() {
    let x = Tensor::new(&[2], vec![1.0, 709.78]).unwrap();
    let res = gradient_check(
        |g, x| {
            let e = g.exp(x);
            Ok(g.sum(e))
        },
        &x,
        1e-2,
    );
    assert!(matches!(res, Err(Error::NonFiniteGradient(1))));
}

#[test]
fn composite_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[3, 5], &mut rng);
    let w1 = random(&[5, 4], &mut rng);
    let w2 = random(&[4, 2], &mut rng);
    let err = gradient_check(
        |g, x| {
            let a = g.constant(w1.clone());
            let b = g.constant(w2.clone());
            let h = g.matmul(x, a)?;
            let h = g.tanh(h);
            let o = g.matmul(h, b)?;
            let o = g.leaky_relu(o, 0.2);
            let o = g.square(o);
            Ok(g.mean(o))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

/// Every differentiable operation, checked on seeded random inputs.
#[test]
fn every_operation_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tol = 1e-6;
    let eps = 1e-5;
    let pos = Tensor::from_fn(&[2, 3], |_| rng.random_range(0.5..2.0)).unwrap();
    let x = random(&[2, 3], &mut rng);
    // Keep values away from the relu/abs kinks.
    let x_kinkfree = Tensor::from_fn(&[2, 3], |i| {
        let v: f64 = rng.random_range(0.1..1.0);
        if i % 2 == 0 {
            v
        } else {
            -v
        }
    })
    .unwrap();
    let unaries = [
        (Unary::Neg, &x),
        (Unary::Exp, &x),
        (Unary::Log, &pos),
        (Unary::Tanh, &x),
        (Unary::Sigmoid, &x),
        (Unary::Relu, &x_kinkfree),
        (Unary::LeakyRelu(0.2), &x_kinkfree),
        (Unary::Scale(-1.7), &x),
        (Unary::Shift(0.3), &x),
        (Unary::Abs, &x_kinkfree),
        (Unary::Square, &x),
    ];
    let weights = random(&[2, 3], &mut rng);
    for (op, input) in unaries {
        let err = gradient_check(
            |g, v| {
                let y = g.unary(op, v);
                let w = g.constant(weights.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            },
            input,
            eps,
        )
        .unwrap();
        assert!(err <= tol, "{op:?}: {err}");
    }

    let other = random(&[2, 3], &mut rng);
    let scalar = Tensor::scalar(0.7);
    for op in [
        xmodal_core::autodiff::Binary::Add,
        xmodal_core::autodiff::Binary::Sub,
        xmodal_core::autodiff::Binary::Mul,
    ] {
        for (lhs_is_x, rhs) in [(true, &other), (true, &scalar), (false, &scalar)] {
            let err = gradient_check(
                |g, v| {
                    let c = g.constant(rhs.clone());
                    let y = if lhs_is_x {
                        g.binary(op, v, c)?
                    } else {
                        g.binary(op, c, v)?
                    };
                    let y = g.square(y);
                    Ok(g.sum(y))
                },
                &x,
                eps,
            )
            .unwrap();
            assert!(err <= tol, "{op:?}: {err}");
        }
        // Gradient reaching the broadcast scalar itself.
        let err = gradient_check(
            |g, s| {
                let c = g.constant(other.clone());
                let y = g.binary(op, c, s)?;
                let y = g.square(y);
                Ok(g.sum(y))
            },
            &scalar,
            eps,
        )
        .unwrap();
        assert!(err <= tol, "{op:?} scalar: {err}");
    }

    let b = random(&[3, 4], &mut rng);
    let err = gradient_check(
        |g, v| {
            let c = g.constant(b.clone());
            let y = g.matmul(v, c)?;
            let y = g.square(y);
            Ok(g.sum(y))
        },
        &x,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "matmul lhs: {err}");
    let err = gradient_check(
        |g, v| {
            let c = g.constant(x.clone());
            let y = g.matmul(c, v)?;
            let y = g.square(y);
            Ok(g.sum(y))
        },
        &b,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "matmul rhs: {err}");

    let err = gradient_check(
        |g, v| {
            let t = g.transpose(v)?;
            let w = g.constant(random_fixed(&[3, 4]));
            let y = g.mul(t, w)?;
            let y = g.square(y);
            Ok(g.sum(y))
        },
        &random(&[4, 3], &mut rng),
        eps,
    )
    .unwrap();
    assert!(err <= tol, "transpose: {err}");

    let img = random(&[2, 2, 5, 5], &mut rng);
    let ker = random(&[3, 2, 3, 3], &mut rng);
    let err = gradient_check(
        |g, v| {
            let k = g.constant(ker.clone());
            let y = g.conv2d(v, k, 2, 1)?;
            let y = g.square(y);
            Ok(g.sum(y))
        },
        &img,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "conv input: {err}");
    let err = gradient_check(
        |g, v| {
            let i = g.constant(img.clone());
            let y = g.conv2d(i, v, 1, 1)?;
            let y = g.square(y);
            Ok(g.sum(y))
        },
        &ker,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "conv kernel: {err}");

    let bias = random(&[3], &mut rng);
    let err = gradient_check(
        |g, v| {
            let i = g.constant(x.clone());
            let y = g.bias_add(i, v, 1)?;
            let y = g.square(y);
            Ok(g.sum(y))
        },
        &bias,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "bias_add: {err}");

    let cube = random(&[3, 2, 4], &mut rng);
    for kind in [Reduce::Sum, Reduce::Mean, Reduce::Max] {
        for axis in [None, Some(0), Some(1), Some(2)] {
            let err = gradient_check(
                |g, v| {
                    let r = g.reduce(kind, v, axis)?;
                    let r = g.square(r);
                    Ok(g.sum(r))
                },
                &cube,
                eps,
            )
            .unwrap();
            assert!(err <= tol, "{kind:?} {axis:?}: {err}");
        }
    }

    let err = gradient_check(
        |g, v| {
            let r = g.reshape(v, &[4, 6])?;
            let s = g.slice(r, 1, 2, 3)?;
            let o = g.constant(random_fixed(&[4, 2]));
            let c = g.concat(&[s, o, s], 1)?;
            let c = g.square(c);
            Ok(g.sum(c))
        },
        &cube,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "reshape/slice/concat: {err}");

    let table = random(&[5, 3], &mut rng);
    let err = gradient_check(
        |g, v| {
            let r = g.gather_rows(v, &[4, 0, 4, 2])?;
            let l = g.log_softmax(r);
            let p = g.pick(l, &[0, 2, 1, 1])?;
            Ok(g.sum(p))
        },
        &table,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "gather/log_softmax/pick: {err}");

    let plane = random(&[2, 1, 4, 4], &mut rng);
    let err = gradient_check(
        |g, v| {
            let u = g.upsample2x(v)?;
            let p = g.avg_pool2x(u)?;
            let p2 = g.avg_pool2x(p)?;
            let s = g.square(p2);
            let s2 = g.sum(s);
            let q = g.square(u);
            let q = g.sum(q);
            g.add(s2, q)
        },
        &plane,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "upsample/avgpool: {err}");

    let pa = random(&[3, 4], &mut rng);
    let pb = random(&[5, 4], &mut rng);
    for which in 0..2 {
        let err = gradient_check(
            |g, v| {
                let (a, b) = if which == 0 {
                    (v, g.constant(pb.clone()))
                } else {
                    (g.constant(pa.clone()), v)
                };
                let d = g.pairwise_sq_dist(a, b)?;
                let k = g.scale(d, -0.5);
                let k = g.exp(k);
                Ok(g.sum(k))
            },
            if which == 0 { &pa } else { &pb },
            eps,
        )
        .unwrap();
        assert!(err <= tol, "pairwise {which}: {err}");
    }

    let vec2 = random(&[2, 3], &mut rng);
    let err = gradient_check(
        |g, v| {
            let t = g.tile_spatial(v, 2, 3)?;
            let w = g.constant(random_fixed(&[2, 3, 2, 3]));
            let p = g.mul(t, w)?;
            let p = g.square(p);
            Ok(g.sum(p))
        },
        &vec2,
        eps,
    )
    .unwrap();
    assert!(err <= tol, "tile_spatial: {err}");
}

fn random_fixed(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    random(shape, &mut rng)
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x), g.constant(k));
        let y = g.conv2d(xv, kv, 1, 1).unwrap();
        let y = g.tanh(y);
        let s = g.mean(y);
        g.value(s).item().to_bits()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn elementwise_never_broadcasts_beyond_scalars(
        a in proptest::collection::vec(1usize..4, 1..4),
        b in proptest::collection::vec(1usize..4, 1..4),
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&a).unwrap());
        let y = g.constant(Tensor::zeros(&b).unwrap());
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        let res = g.add(x, y);
        if a == b {
            prop_assert_eq!(g.value(res.unwrap()).shape(), a.as_slice());
        } else if nb == 1 {
            prop_assert_eq!(g.value(res.unwrap()).shape(), a.as_slice());
        } else if na == 1 {
            prop_assert_eq!(g.value(res.unwrap()).shape(), b.as_slice());
        } else {
            prop_assert!(res.is_err());
        }
    }
}
