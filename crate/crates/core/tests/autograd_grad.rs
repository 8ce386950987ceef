//! Finite-difference checks of every tape primitive over random shapes.

mod common;

use cdcn::autograd::Tape;
use cdcn::gradcheck::grad_check;
use cdcn::ops::ResizeMode;
use cdcn::Tensor;
use common::{project, rand_t, uniform};
use proptest::prelude::*;

const STEP: f64 = 1e-6;
// For maps linear in the probed input a wide step is exact up to rounding, and
// keeps near-cancelling gradient entries above the difference noise.
const LIN: f64 = 1e-3;
const TOL: f64 = 1e-4;

/// Inputs whose entries stay at least `gap` away from each other and from
/// zero, so max/relu kinks are not straddled by the finite difference.
fn spread(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * gap * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let perm = rand_t(&[n], seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| perm.data()[a].total_cmp(&perm.data()[b]));
    let shuffled: Vec<f64> = idx.iter().map(|&i| vals[i]).collect();
    vals.copy_from_slice(&shuffled);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, u64)> {
    (1usize..3, 1usize..4, 1usize..3, prop_oneof![Just(1usize), Just(3)], 1usize..3, 0usize..2, 0usize..3, 0u64..1 << 40)
        .prop_map(|(n, c, o, k, stride, pad, extra, seed)| (n, c, o, k, stride, pad, k + extra + 1, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn conv2d_all_inputs((n, c, o, k, stride, pad, h, seed) in conv_case()) {
        let x = rand_t(&[n, c, h, h], seed);
        let w = rand_t(&[o, c, k, k], seed + 1);
        let b = rand_t(&[o], seed + 2);
        let ex = grad_check(|t, v| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(v, wv, Some(bv), stride, pad)?;
            project(t, y, seed)
        }, &x, LIN).unwrap();
        let ew = grad_check(|t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v, None, stride, pad)?;
            project(t, y, seed)
        }, &w, LIN).unwrap();
        let eb = grad_check(|t, v| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(xv, wv, Some(v), stride, pad)?;
            project(t, y, seed)
        }, &b, LIN).unwrap();
        prop_assert!(ex <= TOL && ew <= TOL && eb <= TOL, "{ex} {ew} {eb}");
    }

    #[test]
    fn central_diff_x_and_w((n, c, o, k, stride, pad, h, seed) in conv_case()) {
        let x = rand_t(&[n, c, h, h], seed);
        let w = rand_t(&[o, c, k, k], seed + 1);
        let ex = grad_check(|t, v| {
            let wv = t.constant(w.clone());
            let y = t.central_diff(v, wv, stride, pad)?;
            project(t, y, seed)
        }, &x, LIN).unwrap();
        let ew = grad_check(|t, v| {
            let xv = t.constant(x.clone());
            let y = t.central_diff(xv, v, stride, pad)?;
            project(t, y, seed)
        }, &w, LIN).unwrap();
        prop_assert!(ex <= TOL && ew <= TOL, "{ex} {ew}");
    }

    #[test]
    fn maxpool(n in 1usize..3, c in 1usize..3, half in 1usize..4, seed in 0u64..1 << 40) {
        let h = 2 * half;
        let x = spread(&[n, c, h, h], seed, 0.01);
        let e = grad_check(|t, v| { let y = t.maxpool2d(v, 2, 2)?; project(t, y, seed) }, &x, STEP).unwrap();
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn resize_both_modes(h in 1usize..6, out in 1usize..9, seed in 0u64..1 << 40) {
        let x = rand_t(&[2, 2, h, h + 1], seed);
        for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
            let e = grad_check(|t, v| { let y = t.resize(v, out, out + 1, mode)?; project(t, y, seed) }, &x, LIN).unwrap();
            prop_assert!(e <= TOL, "{mode:?} {e}");
        }
    }

    #[test]
    fn batchnorm_train_all_inputs(n in 1usize..4, c in 1usize..4, h in 2usize..5, seed in 0u64..1 << 40) {
        let x = rand_t(&[n, c, h, h], seed);
        let g = uniform(&[c], seed + 1, 0.5, 1.5);
        let b = rand_t(&[c], seed + 2);
        let ex = grad_check(|t, v| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
            let (y, _, _) = t.batchnorm_train(v, gv, bv)?;
            project(t, y, seed)
        }, &x, STEP).unwrap();
        let eg = grad_check(|t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let (y, _, _) = t.batchnorm_train(xv, v, bv)?;
            project(t, y, seed)
        }, &g, STEP).unwrap();
        let eb = grad_check(|t, v| {
            let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone()));
            let (y, _, _) = t.batchnorm_train(xv, gv, v)?;
            project(t, y, seed)
        }, &b, STEP).unwrap();
        prop_assert!(ex <= TOL && eg <= TOL && eb <= TOL, "{ex} {eg} {eb}");
    }

    #[test]
    fn batchnorm_eval_all_inputs(n in 1usize..3, c in 1usize..4, seed in 0u64..1 << 40) {
        let x = rand_t(&[n, c, 3, 3], seed);
        let g = uniform(&[c], seed + 1, 0.5, 1.5);
        let b = rand_t(&[c], seed + 2);
        let rm = rand_t(&[c], seed + 3);
        let rv = uniform(&[c], seed + 4, 0.2, 2.0);
        let ex = grad_check(|t, v| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
            let y = t.batchnorm_eval(v, gv, bv, &rm, &rv)?;
            project(t, y, seed)
        }, &x, STEP).unwrap();
        let eg = grad_check(|t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.batchnorm_eval(xv, v, bv, &rm, &rv)?;
            project(t, y, seed)
        }, &g, STEP).unwrap();
        prop_assert!(ex <= TOL && eg <= TOL, "{ex} {eg}");
    }

    #[test]
    fn elementwise_unary(n in 1usize..20, seed in 0u64..1 << 40) {
        let x = spread(&[n], seed, 0.05);
        let checks: [(&str, fn(&mut Tape<f64>, cdcn::autograd::Var) -> cdcn::autograd::Var); 4] = [
            ("relu", |t, v| t.relu(v)),
            ("sigmoid", |t, v| t.sigmoid(v)),
            ("square", |t, v| t.square(v)),
            ("scale", |t, v| t.scale(v, -2.5)),
        ];
        for (name, op) in checks {
            let e = grad_check(|t, v| { let y = op(t, v); project(t, y, seed) }, &x, STEP).unwrap();
            prop_assert!(e <= TOL, "{name} {e}");
        }
        let e = grad_check(|t, v| Ok(t.mean(v)), &x, LIN).unwrap();
        prop_assert!(e <= TOL, "mean {e}");
        let e = grad_check(|t, v| Ok(t.sum(v)), &x, LIN).unwrap();
        prop_assert!(e <= TOL, "sum {e}");
    }

    #[test]
    fn elementwise_binary(n in 1usize..20, seed in 0u64..1 << 40) {
        let a = rand_t(&[n], seed);
        let b = rand_t(&[n], seed + 1);
        for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
            for lhs in [true, false] {
                let e = grad_check(|t, v| {
                    let other = t.constant(if lhs { b.clone() } else { a.clone() });
                    let (p, q) = if lhs { (v, other) } else { (other, v) };
                    let y = match which { 0 => t.add(p, q)?, 1 => t.sub(p, q)?, _ => t.mul(p, q)? };
                    project(t, y, seed)
                }, if lhs { &a } else { &b }, LIN).unwrap();
                prop_assert!(e <= TOL, "{name} lhs={lhs} {e}");
            }
        }
    }

    #[test]
    fn channel_broadcast_ops(n in 1usize..3, c in 1usize..4, h in 1usize..5, seed in 0u64..1 << 40) {
        let x = spread(&[n, c, h, h], seed, 0.01);
        let bias = rand_t(&[c], seed + 1);
        let att = rand_t(&[n, 1, h, h], seed + 2);
        let e1 = grad_check(|t, v| { let b = t.constant(bias.clone()); let y = t.add_channel_bias(v, b)?; project(t, y, seed) }, &x, LIN).unwrap();
        let e2 = grad_check(|t, v| { let xv = t.constant(x.clone()); let y = t.add_channel_bias(xv, v)?; project(t, y, seed) }, &bias, LIN).unwrap();
        let e3 = grad_check(|t, v| { let a = t.constant(att.clone()); let y = t.mul_broadcast_channels(v, a)?; project(t, y, seed) }, &x, LIN).unwrap();
        let e4 = grad_check(|t, v| { let xv = t.constant(x.clone()); let y = t.mul_broadcast_channels(xv, v)?; project(t, y, seed) }, &att, LIN).unwrap();
        let e5 = grad_check(|t, v| { let y = t.channel_mean(v)?; project(t, y, seed) }, &x, LIN).unwrap();
        let e6 = grad_check(|t, v| { let y = t.channel_max(v)?; project(t, y, seed) }, &x, STEP).unwrap();
        for e in [e1, e2, e3, e4, e5, e6] {
            prop_assert!(e <= TOL, "{e1} {e2} {e3} {e4} {e5} {e6}");
        }
    }

    #[test]
    fn structural_ops(n in 1usize..3, c in 1usize..4, h in 1usize..4, seed in 0u64..1 << 40) {
        let x = rand_t(&[n, c, h, h], seed);
        let other = rand_t(&[n, 2, h, h], seed + 1);
        let e1 = grad_check(|t, v| { let o = t.constant(other.clone()); let y = t.concat_channels(&[o, v, o])?; project(t, y, seed) }, &x, LIN).unwrap();
        let w = rand_t(&[2, c, 3, 3], seed + 2);
        let e2 = grad_check(|t, v| { let y = t.kernel_spatial_sum(v)?; project(t, y, seed) }, &w, LIN).unwrap();
        let total = x.numel();
        let e3 = grad_check(|t, v| { let y = t.slice(v, total / 2, &[total - total / 2])?; project(t, y, seed) }, &x, LIN).unwrap();
        let e4 = grad_check(|t, v| { let y = t.reshape(v, &[total])?; project(t, y, seed) }, &x, LIN).unwrap();
        for e in [e1, e2, e3, e4] {
            prop_assert!(e <= TOL, "{e1} {e2} {e3} {e4}");
        }
    }

    #[test]
    fn gradients_are_additive(n in 2usize..12, seed in 0u64..1 << 40) {
        let x = rand_t(&[n], seed);
        let grad_of = |which: u8| {
            let mut t = Tape::<f64>::new();
            let v = t.leaf(x.clone(), true);
            let f = { let s = t.sigmoid(v); project(&mut t, s, seed).unwrap() };
            let g = { let q = t.square(v); project(&mut t, q, seed + 9).unwrap() };
            let out = match which { 0 => f, 1 => g, _ => t.add(f, g).unwrap() };
            t.backward(out).unwrap();
            t.grad(v).unwrap().clone()
        };
        let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
        let sum = gf.zip_map(&gg, |a, b| a + b).unwrap();
        prop_assert!(sum.max_abs_diff(&gs) <= 1e-12);
    }

    #[test]
    fn conv_is_linear_in_x((n, c, o, k, stride, pad, h, seed) in conv_case(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x1 = rand_t(&[n, c, h, h], seed);
        let x2 = rand_t(&[n, c, h, h], seed + 1);
        let w = rand_t(&[o, c, k, k], seed + 2);
        let conv = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(xv, wv, None, stride, pad).unwrap();
            t.value(y).clone()
        };
        let mix = x1.zip_map(&x2, |p, q| a * p + b * q).unwrap();
        let expect = conv(&x1).zip_map(&conv(&x2), |p, q| a * p + b * q).unwrap();
        prop_assert!(conv(&mix).max_abs_diff(&expect) <= 1e-10);
    }

    #[test]
    fn identity_kernel_returns_input(n in 1usize..3, c in 1usize..4, h in 1usize..6, seed in 0u64..1 << 40) {
        let x = rand_t(&[n, c, h, h], seed);
        let mut w = Tensor::<f64>::zeros([c, c, 3, 3]);
        for i in 0..c {
            w.data_mut()[(i * c + i) * 9 + 4] = 1.0;
        }
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w));
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        prop_assert_eq!(t.value(y), &x);
    }
}
