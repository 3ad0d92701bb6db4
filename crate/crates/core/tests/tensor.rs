use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdmi_core::tensor::gradcheck::grad_check;
use tdmi_core::{Error, Tape, Tensor};

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = b[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[oi, ci, ky, kx]);
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn conv2d_matches_nested_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(vec![n, c, h, w], 1.0, &mut rng);
        let wt = Tensor::<f64>::uniform(vec![o, c, k, k], 1.0, &mut rng);
        let bias = Tensor::<f64>::uniform(vec![o], 1.0, &mut rng);
        let expected = naive_conv(&x, &wt, bias.data(), stride, pad);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x).unwrap(), t.constant(wt).unwrap(), t.constant(bias).unwrap());
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let got = t.data(y);
        prop_assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn elementwise_primitives_pass_grad_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(vec![2, 3], 1.5, &mut rng);
        let checks: [(&str, fn(&mut Tape<f64>, tdmi_core::Var) -> tdmi_core::Result<tdmi_core::Var>); 5] = [
            ("sigmoid", |t, v| { let y = t.sigmoid(v)?; t.sum(y) }),
            ("tanh", |t, v| { let y = t.tanh(v)?; t.sum(y) }),
            ("exp", |t, v| { let y = t.exp(v)?; t.sum(y) }),
            ("square", |t, v| { let y = t.square(v)?; t.mean(y) }),
            ("logsumexp_rows", |t, v| { let y = t.logsumexp_rows(v)?; t.sum(y) }),
        ];
        for (name, f) in checks {
            let err = grad_check(f, &x, 1e-6).unwrap();
            prop_assert!(err < 1e-4, "{}: rel err {}", name, err);
        }
    }
}

#[test]
fn shared_subexpression_accumulates() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(vec![1], &[1.5]).unwrap().with_requires_grad(true)).unwrap();
    let y = t.add(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0]);
}

#[test]
fn checked_mode_rejects_non_finite_forward() {
    let mut t = Tape::<f64>::checked();
    let x = t.leaf(Tensor::from_f64(vec![2], &[-1.0, 2.0]).unwrap()).unwrap();
    let r = t.log(x);
    assert!(matches!(r, Err(Error::NonFinite { .. })), "{r:?}");
}

#[test]
fn unchecked_mode_lets_nan_through() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(vec![1], &[-1.0]).unwrap()).unwrap();
    let y = t.log(x).unwrap();
    assert!(t.data(y)[0].is_nan());
}

#[test]
fn matmul_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = Tensor::<f64>::uniform(vec![4, 2], 1.0, &mut rng);
    let x = Tensor::<f64>::uniform(vec![3, 4], 1.0, &mut rng);
    let err = grad_check(
        move |t, v| {
            let bv = t.constant(b.clone())?;
            let y = t.matmul(v, bv)?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
