//! Oracle and finite-difference checks for the differentiable op set.

use segbench::autograd::grad_check;
use segbench::{Rng, Tape, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Weighted sum with fixed random weights, so no gradient entry is
/// structurally zero.
fn weighted<'t>(tape: &'t Tape, x: Var<'t>, seed: u64) -> segbench::Result<Var<'t>> {
    let mut rng = Rng::new(seed);
    let w = tape.constant(rand_tensor(&mut rng, &x.shape()));
    x.mul(w)?.sum()
}

/// Direct six-nested-loop convolution.
fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let iy = (oy * stride + a) as isize - pad as isize;
                                let ix = (ox * stride + bb) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[((bn * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((co * cin + ci) * kh + a) * kw + bb];
                                }
                            }
                        }
                    }
                    out[((bn * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

#[test]
fn conv2d_identity_kernel() {
    let tape = Tape::new();
    let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.5 - 1.0);
    let y = tape.constant(x.clone()).conv2d(tape.constant(Tensor::ones(&[1, 1, 1, 1])), tape.constant(Tensor::zeros(&[1])), 1, 0).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn conv2d_zero_input_gives_bias() {
    let tape = Tape::new();
    let mut rng = Rng::new(1);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = tape.constant(Tensor::zeros(&[2, 2, 5, 5])).conv2d(tape.constant(k), tape.constant(b.clone()), 1, 1).unwrap().value();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, b.data()[(i / 25) % 3]);
    }
}

#[test]
fn conv2d_matches_loop_oracle_on_random_cases() {
    let mut rng = Rng::new(2024);
    // 4x4 input, 3x3 kernel case first, then 100 random small geometries.
    let x = rand_tensor(&mut rng, &[1, 1, 4, 4]);
    let k = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let b = Tensor::zeros(&[1]);
    let tape = Tape::new();
    let got = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), tape.constant(b.clone()), 1, 0).unwrap();
    assert!(got.value().max_abs_diff(&conv_oracle(&x, &k, &b, 1, 0)) < 1e-12);

    for _ in 0..100 {
        let n = 1 + rng.below(2);
        let cin = 1 + rng.below(3);
        let cout = 1 + rng.below(3);
        let h = 3 + rng.below(5);
        let w = 3 + rng.below(5);
        let kh = 1 + rng.below(3);
        let kw = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let x = rand_tensor(&mut rng, &[n, cin, h, w]);
        let k = rand_tensor(&mut rng, &[cout, cin, kh, kw]);
        let b = rand_tensor(&mut rng, &[cout]);
        let tape = Tape::new();
        let got = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), tape.constant(b.clone()), stride, pad).unwrap();
        let want = conv_oracle(&x, &k, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.value().max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv2d_shape_and_finiteness_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let bad_k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let err = x.conv2d(bad_k, b, 1, 0).unwrap_err().to_string();
    assert!(err.contains("input channels"), "{err}");
    let big_k = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(x.conv2d(big_k, b, 1, 0).is_err());
    let mut nan = Tensor::zeros(&[1, 2, 4, 4]);
    nan.data_mut()[3] = f64::NAN;
    let k = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(tape.constant(nan).conv2d(k, b, 1, 1).is_err());
}

#[test]
fn batch_norm_normalizes_moments() {
    let mut rng = Rng::new(5);
    let x = Tensor::from_fn(&[2, 3, 4, 4], |_| 3.0 + 5.0 * rng.normal());
    let tape = Tape::new();
    let (y, _, _) = tape.constant(x).batch_norm_train(tape.constant(Tensor::ones(&[3])), tape.constant(Tensor::zeros(&[3])), 1e-5).unwrap();
    let y = y.value();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| y.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        // eps shrinks the variance by var/(var+eps); at σ≈5 that is < 1e-6.
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn softmax_sums_to_one_for_large_logits() {
    let mut rng = Rng::new(9);
    let x = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.uniform_range(-1e3, 1e3));
    let tape = Tape::new();
    let y = tape.constant(x).softmax_channel().unwrap().value();
    for n in 0..2 {
        for v in 0..9 {
            let s: f64 = (0..4).map(|c| y.data()[(n * 4 + c) * 9 + v]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

/// Every differentiable op on five random shapes.
#[test]
fn every_op_passes_grad_check() {
    let mut rng = Rng::new(77);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for trial in 0..5u64 {
        let n = 1 + rng.below(2);
        let c = 2 + rng.below(2);
        let h = 2 * (2 + rng.below(2));
        let w = 2 * (2 + rng.below(2));
        let shape = [n, c, h, w];
        let x = rand_tensor(&mut rng, &shape);
        let y = rand_tensor(&mut rng, &shape);
        let pos = x.map(|v| v.abs() + 0.5);
        let seed = 1000 + trial;

        let mut check = |name: &'static str, err: f64| {
            assert!(err < TOL, "{name}: relative error {err} on shape {shape:?}");
            worst.push((name, err));
        };

        check("add", grad_check(|t, v| weighted(t, v[0].add(v[1])?, seed), &[x.clone(), y.clone()], EPS).unwrap());
        check("sub", grad_check(|t, v| weighted(t, v[0].sub(v[1])?, seed), &[x.clone(), y.clone()], EPS).unwrap());
        check("mul", grad_check(|t, v| weighted(t, v[0].mul(v[1])?, seed), &[x.clone(), y.clone()], EPS).unwrap());
        check("div", grad_check(|t, v| weighted(t, v[0].div(v[1])?, seed), &[x.clone(), pos.clone()], EPS).unwrap());
        check("exp", grad_check(|t, v| weighted(t, v[0].exp()?, seed), std::slice::from_ref(&x), EPS).unwrap());
        check("log", grad_check(|t, v| weighted(t, v[0].log()?, seed), std::slice::from_ref(&pos), EPS).unwrap());
        check("sigmoid", grad_check(|t, v| weighted(t, v[0].sigmoid()?, seed), std::slice::from_ref(&x), EPS).unwrap());
        check("tanh", grad_check(|t, v| weighted(t, v[0].tanh()?, seed), std::slice::from_ref(&x), EPS).unwrap());
        check("mean", grad_check(|_, v| v[0].square()?.mean(), std::slice::from_ref(&x), EPS).unwrap());
        check(
            "broadcast",
            grad_check(|t, v| weighted(t, v[0].broadcast(&shape)?.mul(v[1])?, seed), &[Tensor::scalar(0.7), y.clone()], EPS).unwrap(),
        );
        check("reshape", grad_check(|t, v| weighted(t, v[0].reshape(&[n * c, h * w])?, seed), std::slice::from_ref(&x), EPS).unwrap());
        let vec_c = rand_tensor(&mut rng, &[c]);
        check("scale_axis", grad_check(|t, v| weighted(t, v[0].scale_axis(v[1], 1)?, seed), &[x.clone(), vec_c.clone()], EPS).unwrap());
        let per_sample = rand_tensor(&mut rng, &[n, c]);
        check("scale_channels", grad_check(|t, v| weighted(t, v[0].scale_channels(v[1])?, seed), &[x.clone(), per_sample], EPS).unwrap());
        let table = rand_tensor(&mut rng, &[3, c]);
        check("gather_rows", grad_check(|t, v| weighted(t, v[0].gather_rows(&[2, 0, 2])?, seed), &[table], EPS).unwrap());
        let k = rand_tensor(&mut rng, &[c + 1, c, 3, 3]);
        let b = rand_tensor(&mut rng, &[c + 1]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            check(
                "conv2d",
                grad_check(|t, v| weighted(t, v[0].conv2d(v[1], v[2], stride, pad)?, seed), &[x.clone(), k.clone(), b.clone()], EPS)
                    .unwrap(),
            );
        }
        let uk = rand_tensor(&mut rng, &[c, 2, 2, 2]);
        let ub = rand_tensor(&mut rng, &[2]);
        check("up_conv2x", grad_check(|t, v| weighted(t, v[0].up_conv2x(v[1], v[2])?, seed), &[x.clone(), uk, ub], EPS).unwrap());
        let gamma = Tensor::from_fn(&[c], |i| 0.5 + i as f64 * 0.3);
        let beta = rand_tensor(&mut rng, &[c]);
        check(
            "batch_norm_train",
            grad_check(
                |t, v| weighted(t, v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, seed),
                &[x.clone(), gamma.clone(), beta.clone()],
                EPS,
            )
            .unwrap(),
        );
        let rm: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let rv: Vec<f64> = (0..c).map(|i| 0.5 + 0.2 * i as f64).collect();
        check(
            "batch_norm_eval",
            grad_check(
                |t, v| weighted(t, v[0].batch_norm_eval(v[1], v[2], &rm, &rv, 1e-5)?, seed),
                &[x.clone(), gamma.clone(), beta.clone()],
                EPS,
            )
            .unwrap(),
        );
        // Keep inputs away from the kink at zero.
        let xp = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check(
            "prelu",
            grad_check(|t, v| weighted(t, v[0].prelu(v[1])?, seed), &[xp, Tensor::from_fn(&[c], |i| 0.25 + 0.1 * i as f64)], EPS).unwrap(),
        );
        check("concat", grad_check(|t, v| weighted(t, v[0].concat_channels(v[1])?, seed), &[x.clone(), y.clone()], EPS).unwrap());
        check("softmax", grad_check(|t, v| weighted(t, v[0].softmax_channel()?, seed), std::slice::from_ref(&x), EPS).unwrap());
        check("log_softmax", grad_check(|t, v| weighted(t, v[0].log_softmax_channel()?, seed), std::slice::from_ref(&x), EPS).unwrap());
        let a = rand_tensor(&mut rng, &[h, w]);
        let bm = rand_tensor(&mut rng, &[w, c]);
        check("matmul", grad_check(|t, v| weighted(t, v[0].matmul(v[1])?, seed), &[a.clone(), bm], EPS).unwrap());
        let lw = rand_tensor(&mut rng, &[c, w]);
        let lb = rand_tensor(&mut rng, &[c]);
        check("linear", grad_check(|t, v| weighted(t, v[0].linear(v[1], v[2])?, seed), &[a, lw, lb], EPS).unwrap());
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    println!("max relative gradient error over {} checks: {max:.3e}", worst.len());
}

#[test]
fn mixed_precision_conv_is_close_to_f64() {
    let mut rng = Rng::new(3);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let exact = Tape::new();
    let mixed = Tape::with_precision(segbench::Precision::MixedF32);
    let e = exact.constant(x.clone()).conv2d(exact.constant(k.clone()), exact.constant(b.clone()), 1, 1).unwrap();
    let m = mixed.constant(x).conv2d(mixed.constant(k), mixed.constant(b), 1, 1).unwrap();
    let diff = e.value().max_abs_diff(&m.value());
    assert!(diff > 0.0 && diff < 1e-5, "{diff}");
}

#[test]
fn fixed_seed_op_sequence_is_bit_identical() {
    let run = || {
        let mut rng = Rng::new(42);
        let tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[2, 2, 6, 6]));
        let k = tape.leaf(rand_tensor(&mut rng, &[3, 2, 3, 3]));
        let b = tape.leaf(rand_tensor(&mut rng, &[3]));
        let y = x.conv2d(k, b, 1, 1).unwrap().softmax_channel().unwrap();
        let loss = weighted(&tape, y, 7).unwrap();
        tape.backward(loss).unwrap();
        (y.value().data().to_vec(), k.grad().unwrap().into_data())
    };
    let (a1, g1) = run();
    let (a2, g2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
}
