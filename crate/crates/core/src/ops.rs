//! Eager, tape-free forms of the differentiable operations.
//!
//! Each call records onto a throwaway tape; useful for inference and for
//! checking values against oracles.

use crate::error::Result;
use crate::kernels::Padding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn unary(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

fn with_kernel(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    f: impl FnOnce(&mut Tape, Var, Var, Option<Var>) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(kernel.clone());
    let bv = bias.map(|b| tape.constant(b.clone()));
    let out = f(&mut tape, xv, kv, bv)?;
    Ok(tape.value(out).clone())
}

pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: Padding) -> Result<Tensor> {
    with_kernel(x, kernel, bias, |t, x, k, b| t.conv2d(x, k, b, stride, padding))
}

pub fn conv2d_transpose(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    with_kernel(x, kernel, bias, |t, x, k, b| t.conv2d_transpose(x, k, b, stride))
}

pub fn maxpool2d(x: &Tensor, window: usize) -> Result<Tensor> {
    unary(x, |t, v| t.maxpool2d(v, window))
}

pub fn relu(x: &Tensor) -> Tensor {
    unary(x, |t, v| Ok(t.relu(v))).expect("relu is total")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    unary(x, |t, v| Ok(t.sigmoid(v))).expect("sigmoid is total")
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    unary(x, |t, v| Ok(t.softmax_rows(v))).expect("softmax is total")
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let out = tape.matmul(av, bv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    // Direct loop convolution, written independently of im2col.
    fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, pad: usize, out_h: usize, out_w: usize) -> Tensor {
        let [kh, kw, cin, cout] = k.shape().dims();
        let s = x.shape();
        let mut out = Tensor::zeros([s.n, out_h, out_w, cout]);
        for n in 0..s.n {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    for co in 0..cout {
                        let mut acc = bias[co];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at(n, y as usize, xx as usize, ci) * k.at(ky, kx, ci, co);
                                }
                            }
                        }
                        out.set(n, oy, ox, co, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let x = Tensor::zeros([1, 4, 4, 1]);
        let k = Tensor::uniform([3, 3, 1, 2], -1.0, 1.0, &mut rng());
        let y = conv2d(&x, &k, Some(&Tensor::zeros([1, 1, 1, 2])), 1, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_conv_is_affine() {
        let x = Tensor::uniform([1, 3, 3, 1], -1.0, 1.0, &mut rng());
        let k = Tensor::full([1, 1, 1, 1], 2.0);
        let b = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, Some(&b), 1, Padding::Same).unwrap();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert_eq!(*o, 2.0 * i + 1.0);
        }
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut r = rng();
        let x = Tensor::uniform([1, 5, 5, 2], -1.0, 1.0, &mut r);
        let k = Tensor::uniform([3, 3, 2, 4], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([1, 1, 1, 4], -1.0, 1.0, &mut r);
        let same = conv2d(&x, &k, Some(&b), 1, Padding::Same).unwrap();
        let oracle = naive_conv(&x, &k, b.data(), 1, 1, 5, 5);
        assert!(same.max_abs_diff(&oracle).unwrap() < 1e-12);

        let valid = conv2d(&x, &k, Some(&b), 2, Padding::Valid).unwrap();
        let oracle = naive_conv(&x, &k, b.data(), 2, 0, 2, 2);
        assert!(valid.max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros([1, 4, 4, 3]);
        let k = Tensor::zeros([3, 3, 2, 4]);
        let err = conv2d(&x, &k, None, 1, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }

    #[test]
    fn transpose_conv_shapes_and_identity() {
        let x = Tensor::uniform([1, 2, 2, 1], -1.0, 1.0, &mut rng());
        let k = Tensor::full([4, 4, 1, 1], 0.5);
        assert_eq!(conv2d_transpose(&x, &k, None, 2).unwrap().shape(), Shape::new(1, 4, 4, 1));

        let x = Tensor::uniform([1, 3, 3, 2], -1.0, 1.0, &mut rng());
        let mut eye = Tensor::zeros([1, 1, 2, 2]);
        eye.set(0, 0, 0, 0, 1.0);
        eye.set(0, 0, 1, 1, 1.0);
        let b = Tensor::from_vec([1, 1, 1, 2], vec![0.25, -1.0]).unwrap();
        let y = conv2d_transpose(&x, &eye, Some(&b), 1).unwrap();
        for (i, (o, v)) in y.data().iter().zip(x.data()).enumerate() {
            assert_eq!(*o, v + b.data()[i % 2]);
        }
        assert!(conv2d_transpose(&x, &eye, None, 0).is_err());
    }

    #[test]
    fn transpose_conv_is_adjoint() {
        let mut r = rng();
        for &(h, w, k, stride, cin, cout) in &[(8, 8, 4, 2, 3, 2), (6, 4, 3, 1, 2, 5), (9, 7, 3, 3, 1, 2), (4, 4, 1, 1, 2, 2)] {
            let x = Tensor::uniform([1, h, w, cin], -1.0, 1.0, &mut r);
            let kern = Tensor::uniform([k, k, cin, cout], -1.0, 1.0, &mut r);
            let cx = conv2d(&x, &kern, None, stride, Padding::Same).unwrap();
            let y = Tensor::uniform(cx.shape(), -1.0, 1.0, &mut r);
            let lhs = cx.dot(&y).unwrap();
            let ty = conv2d_transpose(&y, &kern, None, stride).unwrap();
            if ty.shape() == x.shape() {
                let rhs = x.dot(&ty).unwrap();
                assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor::full([1, 4, 4, 2], 3.5);
        assert!(maxpool2d(&x, 2).unwrap().data().iter().all(|&v| v == 3.5));
        let x = Tensor::from_vec([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x, 2).unwrap().data(), &[4.0]);

        let x = Tensor::uniform([1, 8, 8, 3], -1.0, 1.0, &mut rng());
        let y = maxpool2d(&x, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                for c in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at(0, oy * 2 + dy, ox * 2 + dx, c));
                        }
                    }
                    assert_eq!(y.at(0, oy, ox, c), m);
                }
            }
        }
    }

    #[test]
    fn activations_and_softmax() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data(), &[0.5]);
        let r = relu(&Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = softmax_rows(&Tensor::full([1, 1, 2, 5], 3.0));
        assert!(s.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let big = Tensor::from_vec([1, 1, 1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
        let s = softmax_rows(&big);
        assert!(s.all_finite());
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng();
        let a = Tensor::uniform(Shape::matrix(7, 5), -1.0, 1.0, &mut r);
        let b = Tensor::uniform(Shape::matrix(5, 3), -1.0, 1.0, &mut r);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape::matrix(7, 3));
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.at(0, 0, i, k) * b.at(0, 0, k, j);
                }
                assert!((c.at(0, 0, i, j) - acc).abs() < 1e-13);
            }
        }
        assert!(matmul(&a, &a).is_err());
    }
}
