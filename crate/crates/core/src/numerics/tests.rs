// index loops mirror the textbook definitions the oracles check against
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct 2-D cross-correlation, one loop per index.
fn conv2d_loops(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for bi in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((bi * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn conv_eval(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.leaf(x.clone(), false),
        g.leaf(w.clone(), false),
        g.leaf(b.clone(), false),
    );
    let y = g.conv(xv, wv, bv, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_ones_center_is_nine() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let y = conv_eval(&x, &w, &Tensor::zeros(&[1]), 1, 1);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data()[4], 9.0);
    assert_eq!(y.data()[0], 4.0);
}

#[test]
fn conv_zero_weights_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let b = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
    let y = conv_eval(&x, &Tensor::zeros(&[2, 3, 3, 3]), &b, 1, 1);
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, b.data()[(i / 16) % 2]);
    }
}

#[test]
fn conv_matches_loop_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
        let got = conv_eval(&x, &w, &b, stride, pad);
        let want = conv2d_loops(&x, &w, b.data(), stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv3d_matches_loop_nest_on_unit_depth() {
    // A 3-D conv with depth-1 kernel on depth-1 input reduces to 2-D.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x2 = random(&[2, 2, 4, 6], &mut rng);
    let w2 = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let x3 = x2.clone().reshape(vec![2, 2, 1, 4, 6]).unwrap();
    let w3 = w2.clone().reshape(vec![3, 2, 1, 3, 3]).unwrap();
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.leaf(x3, false),
        g.leaf(w3, false),
        g.leaf(b.clone(), false),
    );
    // padding applies to every axis in 3-D, so compare with padding 0 on depth by using k_d = 1, pad 0.
    let y = g.conv(xv, wv, bv, 1, 0).unwrap();
    let want = conv2d_loops(&x2, &w2, b.data(), 1, 0);
    assert_eq!(g.value(y).data().len(), want.numel());
    let got = Tensor::new(want.shape().to_vec(), g.value(y).data().to_vec()).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv_shape_errors_name_dimension() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
    let w = g.leaf(Tensor::zeros(&[3, 5, 3, 3]), false);
    let b = g.leaf(Tensor::zeros(&[3]), false);
    match g.conv(x, w, b, 1, 1) {
        Err(Error::Shape {
            dim, expected, got, ..
        }) => {
            assert!(dim.contains("Cin"), "{dim}");
            assert_eq!((expected, got), (5, 2));
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let w = g.leaf(Tensor::zeros(&[3, 2, 3, 3]), false);
    let b = g.leaf(Tensor::zeros(&[4]), false);
    assert!(matches!(g.conv(x, w, b, 1, 1), Err(Error::Shape { .. })));
}

#[test]
fn conv_is_linear_in_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let y = random(&[2, 3, 6, 6], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let zero = Tensor::zeros(&[4]);
    let (a, c) = (0.7, -1.3);
    let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + c * y.data()[i]);
    let lhs = conv_eval(&mix, &w, &zero, 1, 1);
    let cx = conv_eval(&x, &w, &zero, 1, 1);
    let cy = conv_eval(&y, &w, &zero, 1, 1);
    let rhs = Tensor::from_fn(cx.shape(), |i| a * cx.data()[i] + c * cy.data()[i]);
    assert!(lhs.max_abs_diff(&rhs) < 1e-10);
}

#[test]
fn zeroed_input_channel_equals_removed_weight_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut x = random(&[2, 4, 5, 5], &mut rng);
    let w = random(&[3, 4, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let channel = 2;
    let s = 25;
    for bi in 0..2 {
        x.data_mut()[(bi * 4 + channel) * s..(bi * 4 + channel + 1) * s].fill(0.0);
    }
    let masked = conv_eval(&x, &w, &b, 1, 1);
    let mut x_small = x.clone();
    x_small.remove_index(1, channel).unwrap();
    let mut w_small = w.clone();
    w_small.remove_index(1, channel).unwrap();
    let removed = conv_eval(&x_small, &w_small, &b, 1, 1);
    assert!(masked.max_abs_diff(&removed) < 1e-12);
}

#[test]
fn pool_upsample_concat_examples() {
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        false,
    );
    let p = g.maxpool2(x).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(p).data(), &[4.0]);
    let u = g.upsample2(p).unwrap();
    assert_eq!(g.value(u).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(u).data(), &[4.0; 4]);

    let a = g.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64), false);
    let b = g.leaf(Tensor::from_fn(&[2, 5, 2, 2], |i| -(i as f64)), false);
    let c = g.concat_channels(a, b).unwrap();
    let out = g.value(c);
    assert_eq!(out.shape(), &[2, 8, 2, 2]);
    assert_eq!(&out.data()[..12], &g.value(a).data()[..12]);
    assert_eq!(&out.data()[32..44], &g.value(a).data()[12..24]);

    let odd = g.leaf(Tensor::zeros(&[1, 1, 3, 4]), false);
    assert!(g.maxpool2(odd).is_err());
    let mismatched = g.leaf(Tensor::zeros(&[2, 1, 4, 2]), false);
    assert!(g.concat_channels(a, mismatched).is_err());
}

#[test]
fn pool_and_upsample_3d() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64), false);
    let p = g.maxpool2(x).unwrap();
    assert_eq!(g.value(p).data(), &[7.0]);
    let u = g.upsample2(p).unwrap();
    assert_eq!(g.value(u).shape(), &[1, 1, 2, 2, 2]);
}

#[test]
fn softmax_sums_to_one_over_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.leaf(random(&[2, 3, 2, 2], &mut rng), false);
    let y = g.softmax_channels(x).unwrap();
    let v = g.value(y);
    for b in 0..2 {
        for p in 0..4 {
            let s: f64 = (0..3).map(|c| v.data()[(b * 3 + c) * 4 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

fn loss_value(p: &Tensor, t: &Tensor, kind: LossKind) -> f64 {
    let mut g = Graph::new();
    let (pv, tv) = (g.leaf(p.clone(), false), g.leaf(t.clone(), false));
    let l = g.loss(pv, tv, kind).unwrap();
    g.value(l).item()
}

#[test]
fn soft_dice_examples() {
    let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    assert!(loss_value(&t, &t, LossKind::SoftDice).abs() < 1e-5);
    let zero = Tensor::zeros(&[1, 1, 2, 2]);
    assert!((loss_value(&zero, &t, LossKind::SoftDice) - 1.0).abs() < 1e-5);

    // Hand evaluation on a 2×2 prediction.
    let p = Tensor::new(vec![1, 1, 2, 2], vec![0.3, 0.8, 0.55, 0.1]).unwrap();
    let inter = 0.3 + 0.55 + 0.1;
    let sp = 0.3 + 0.8 + 0.55 + 0.1;
    let want = 1.0 - (2.0 * inter + 1e-6) / (sp + 3.0 + 1e-6);
    assert!((loss_value(&p, &t, LossKind::SoftDice) - want).abs() < 1e-12);
}

#[test]
fn soft_dice_averages_channels() {
    let t = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let p = Tensor::new(vec![1, 2, 1, 2], vec![0.9, 0.2, 0.1, 0.8]).unwrap();
    let c0 = 1.0 - (2.0 * 0.9 + 1e-6) / (1.1 + 1.0 + 1e-6);
    let c1 = 1.0 - (2.0 * 0.8 + 1e-6) / (0.9 + 1.0 + 1e-6);
    assert!((loss_value(&p, &t, LossKind::SoftDice) - (c0 + c1) / 2.0).abs() < 1e-12);
}

#[test]
fn loss_rejects_nan_and_shape_mismatch() {
    let mut g = Graph::new();
    let p = g.leaf(
        Tensor::new(vec![1, 1, 1, 2], vec![f64::NAN, 0.0]).unwrap(),
        false,
    );
    let t = g.leaf(Tensor::zeros(&[1, 1, 1, 2]), false);
    assert!(matches!(
        g.loss(p, t, LossKind::SoftDice),
        Err(Error::NonFinite(_))
    ));
    let q = g.leaf(Tensor::zeros(&[1, 2, 1, 2]), false);
    assert!(matches!(
        g.loss(q, t, LossKind::SoftDice),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn backward_simple_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
}

/// Builds a scalar from `inputs` through `f`, then compares every requested
/// gradient against central differences.
fn check_grads(inputs: Vec<(Tensor, bool)>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(t, rg)| g.leaf(t.clone(), *rg))
        .collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let base: Vec<Tensor> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let h = 1e-5;
    for (k, (t, rg)) in inputs.iter().enumerate() {
        if !rg {
            assert!(g.grad(vars[k]).is_none());
            continue;
        }
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        for i in 0..t.numel() {
            let mut plus = base.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = base.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err =
                (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "input {k} elem {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }
}

#[test]
fn gradcheck_conv_relu_pool_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&[2, 2, 4, 4], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let r = random(&[2, 5, 4, 4], &mut rng);
    check_grads(vec![(x, true), (w, true), (b, true), (r, false)], |g, v| {
        let c = g.conv(v[0], v[1], v[2], 1, 1).unwrap();
        let a = g.relu(c);
        let p = g.maxpool2(a).unwrap();
        let u = g.upsample2(p).unwrap();
        let cat = g.concat_channels(v[0], u).unwrap();
        let m = g.mul(cat, v[3]).unwrap();
        g.sum(m)
    });
}

#[test]
fn gradcheck_strided_conv3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = random(&[1, 2, 4, 4, 4], &mut rng);
    let w = random(&[2, 2, 3, 3, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let r = random(&[1, 2, 2, 2, 2], &mut rng);
    check_grads(vec![(x, true), (w, true), (b, true), (r, false)], |g, v| {
        let c = g.conv(v[0], v[1], v[2], 2, 1).unwrap();
        let m = g.mul(c, v[3]).unwrap();
        g.sum(m)
    });
}

#[test]
fn gradcheck_norm_and_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = random(&[2, 3, 2, 3], &mut rng);
    let gamma = random(&[3], &mut rng);
    let beta = random(&[3], &mut rng);
    let t = Tensor::from_fn(&[2, 3, 2, 3], |i| if (i * 7) % 3 == 0 { 1.0 } else { 0.0 });
    let scales: Vec<f64> = (0..6).map(|i| [0.0, 1.0, 1.25][i % 3]).collect();
    for kind in [LossKind::SoftDice, LossKind::CrossEntropy] {
        let s = scales.clone();
        check_grads(
            vec![
                (x.clone(), true),
                (gamma.clone(), true),
                (beta.clone(), true),
                (t.clone(), false),
            ],
            move |g, v| {
                let n = g.instance_norm(v[0], v[1], v[2]).unwrap();
                let d = g.channel_scale(n, s.clone()).unwrap();
                let p = g.softmax_channels(d).unwrap();
                g.loss(p, v[3], kind).unwrap()
            },
        );
    }
    let t1 = Tensor::from_fn(&[2, 1, 2, 3], |i| (i % 2) as f64);
    let x1 = random(&[2, 1, 2, 3], &mut rng);
    for kind in [LossKind::SoftDice, LossKind::CrossEntropy] {
        check_grads(
            vec![(x1.clone(), true), (t1.clone(), false)],
            move |g, v| {
                let p = g.sigmoid(v[0]);
                g.loss(p, v[1], kind).unwrap()
            },
        );
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let w = random(&[5, 3, 3, 3], &mut rng);
    let b = random(&[5], &mut rng);
    let a = conv_eval(&x, &w, &b, 1, 1);
    let c = conv_eval(&x, &w, &b, 1, 1);
    assert!(a
        .data()
        .iter()
        .zip(c.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}
