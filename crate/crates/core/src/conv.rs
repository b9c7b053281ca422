//! 2-D cross-correlation kernels (forward and adjoints).
//!
//! Single-threaded on purpose: parallelism happens one level up (batch
//! samples, volumes, verification cases), which keeps every accumulation
//! order fixed and results bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding).saturating_sub(k) / stride + 1
}

/// Validates shapes shared by forward and backward. Returns
/// `(n, cin, h, w, cout, k, oh, ow)` with `n == 0` marking an unbatched input.
fn check_shapes<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = match x.shape()[..] {
        [c, h, w] => (0, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d input must be [C,H,W] or [N,C,H,W], got {:?}",
                x.shape()
            )))
        }
    };
    let (cout, wcin, k, k2) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d kernel must be [C_out,C_in,k,k], got {:?}",
                weight.shape()
            )))
        }
    };
    if k != k2 {
        return Err(Error::Shape(format!("conv2d kernel must be square, got {k}x{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel size must be odd, got {k}")));
    }
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d kernel expects {wcin} input channels, input has {cin}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{cout}], got {:?}",
                b.shape()
            )));
        }
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Shape(format!(
            "conv2d input {h}x{w} too small for kernel {k} with padding {padding}"
        )));
    }
    let oh = out_extent(h, k, stride, padding);
    let ow = out_extent(w, k, stride, padding);
    Ok((n, cin, h, w, cout, k, oh, ow))
}

/// Valid output-column range `[ox_lo, ox_hi)` for a fixed kernel column, such
/// that `ix = ox*stride + kx - padding` stays inside `[0, w)`.
#[inline]
fn ox_range(kx: usize, w: usize, ow: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx + stride - 1) / stride
    };
    let hi = if w + padding > kx {
        ((w + padding - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Eight-lane unrolled dot product with a fixed combine order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = xa[l].mul_add(xb[l], acc[l]);
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = x.mul_add(y, tail);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn forward_single<T: Scalar>(
    x: &[T],
    (cin, h, w): (usize, usize, usize),
    wgt: &[T],
    (cout, k): (usize, usize),
    bias: &[T],
    stride: usize,
    padding: usize,
    out: &mut [T],
    (oh, ow): (usize, usize),
) {
    for co in 0..cout {
        let out_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        out_plane.fill(bias[co]);
        for ci in 0..cin {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            let w_base = (co * cin + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let w_s = wgt[w_base + ky * k + kx];
                    let (ox_lo, ox_hi) = ox_range(kx, w, ow, stride, padding);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo * stride + kx - padding;
                    for oy in 0..oh {
                        let iy_s = oy * stride + ky;
                        if iy_s < padding {
                            continue;
                        }
                        let iy = iy_s - padding;
                        if iy >= h {
                            break;
                        }
                        let orow = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                        if stride == 1 {
                            let xrow = &x_plane[iy * w + ix0..iy * w + ix0 + orow.len()];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o = xv.mul_add(w_s, *o);
                            }
                        } else {
                            let xrow = &x_plane[iy * w + ix0..];
                            for (o, &xv) in orow.iter_mut().zip(xrow.iter().step_by(stride)) {
                                *o = xv.mul_add(w_s, *o);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` with `weight` plus `bias`.
/// Accepts `[C,H,W]` or `[N,C,H,W]` inputs.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout, k, oh, ow) = check_shapes(x, weight, Some(bias), stride, padding)?;
    let batch = n.max(1);
    let mut out = vec![T::zero(); batch * cout * oh * ow];
    let in_sz = cin * h * w;
    let out_sz = cout * oh * ow;
    for b in 0..batch {
        forward_single(
            &x.data()[b * in_sz..(b + 1) * in_sz],
            (cin, h, w),
            weight.data(),
            (cout, k),
            bias.data(),
            stride,
            padding,
            &mut out[b * out_sz..(b + 1) * out_sz],
            (oh, ow),
        );
    }
    let shape = if n == 0 {
        vec![cout, oh, ow]
    } else {
        vec![n, cout, oh, ow]
    };
    Tensor::from_vec(shape, out)
}

/// Adjoints of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin, h, w, cout, k, oh, ow) = check_shapes(x, weight, None, stride, padding)?;
    let batch = n.max(1);
    let mut dx = vec![T::zero(); batch * cin * h * w];
    let mut dw = vec![T::zero(); cout * cin * k * k];
    let mut db = vec![T::zero(); cout];
    let in_sz = cin * h * w;
    let out_sz = cout * oh * ow;
    debug_assert_eq!(d_out.len(), batch * out_sz);

    for b in 0..batch {
        let x_img = &x.data()[b * in_sz..(b + 1) * in_sz];
        let g_img = &d_out.data()[b * out_sz..(b + 1) * out_sz];
        let dx_img = &mut dx[b * in_sz..(b + 1) * in_sz];

        for co in 0..cout {
            let g_plane = &g_img[co * oh * ow..(co + 1) * oh * ow];
            db[co] = g_plane.iter().fold(db[co], |acc, &g| acc + g);

            for ci in 0..cin {
                let x_plane = &x_img[ci * h * w..(ci + 1) * h * w];
                let dx_plane = &mut dx_img[ci * h * w..(ci + 1) * h * w];
                let w_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let w_s = weight.data()[w_base + ky * k + kx];
                        let (ox_lo, ox_hi) = ox_range(kx, w, ow, stride, padding);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix0 = ox_lo * stride + kx - padding;
                        let mut w_acc = T::zero();
                        for oy in 0..oh {
                            let iy_s = oy * stride + ky;
                            if iy_s < padding {
                                continue;
                            }
                            let iy = iy_s - padding;
                            if iy >= h {
                                break;
                            }
                            let grow = &g_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                let xrow = &x_plane[iy * w + ix0..iy * w + ix0 + grow.len()];
                                w_acc = w_acc + dot(grow, xrow);
                                let dxrow = &mut dx_plane[iy * w + ix0..iy * w + ix0 + grow.len()];
                                for (d, &g) in dxrow.iter_mut().zip(grow) {
                                    *d = g.mul_add(w_s, *d);
                                }
                            } else {
                                for (j, &g) in grow.iter().enumerate() {
                                    let ix = ix0 + j * stride;
                                    w_acc = x_plane[iy * w + ix].mul_add(g, w_acc);
                                    dx_plane[iy * w + ix] = g.mul_add(w_s, dx_plane[iy * w + ix]);
                                }
                            }
                        }
                        dw[w_base + ky * k + kx] = dw[w_base + ky * k + kx] + w_acc;
                    }
                }
            }
        }
    }

    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(weight.shape().to_vec(), dw)?,
        Tensor::from_vec(vec![cout], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::rand_uniform(&[4, 6, 5], -2.0, 2.0, &mut rng);
        let mut w = Tensor::<f32>::zeros(&[4, 4, 1, 1]);
        for c in 0..4 {
            w.data_mut()[c * 4 + c] = 1.0;
        }
        let b = Tensor::<f32>::zeros(&[4]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn averaging_kernel_preserves_constants_in_interior() {
        let x = Tensor::<f64>::filled(&[1, 5, 5], 3.25);
        let w = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0 / 9.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        for iy in 1..4 {
            for ix in 1..4 {
                assert!((y.data()[iy * 5 + ix] - 3.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sum_kernel_direct_oracle() {
        // 3x3 ones kernel over [[1..9]] with no padding reduces to the plain sum.
        let x = Tensor::<f64>::from_vec(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data()[0], 45.0);
    }

    #[test]
    fn strided_output_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::rand_uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::rand_normal(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::<f32>::zeros(&[3]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
    }

    #[test]
    fn batched_matches_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::<f32>::rand_uniform(&[3, 6, 6], -1.0, 1.0, &mut rng);
        let x1 = Tensor::<f32>::rand_uniform(&[3, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::rand_normal(&[4, 3, 3, 3], 0.3, &mut rng);
        let b = Tensor::<f32>::rand_uniform(&[4], -0.1, 0.1, &mut rng);
        let mut stacked = x0.data().to_vec();
        stacked.extend_from_slice(x1.data());
        let xb = Tensor::from_vec(vec![2, 3, 6, 6], stacked).unwrap();
        let yb = conv2d(&xb, &w, &b, 1, 1).unwrap();
        let y0 = conv2d(&x0, &w, &b, 1, 1).unwrap();
        let y1 = conv2d(&x1, &w, &b, 1, 1).unwrap();
        assert_eq!(&yb.data()[..y0.len()], y0.data());
        assert_eq!(&yb.data()[y0.len()..], y1.data());
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[3, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        let err = conv2d(&x, &w, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"));
        let w_even = Tensor::<f32>::zeros(&[4, 3, 2, 2]);
        assert!(conv2d(&x, &w_even, &b, 1, 0).is_err());
    }

    /// Central-difference check of all three adjoints on random cases,
    /// including strides and paddings used by the model.
    #[test]
    fn backward_matches_finite_differences() {
        let cases = [(1usize, 1usize, 5usize, 5usize), (1, 0, 5, 5), (2, 1, 6, 6)];
        for (case_idx, &(stride, padding, h, w)) in cases.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + case_idx as u64);
            let x = Tensor::<f64>::rand_uniform(&[2, h, w], -1.0, 1.0, &mut rng);
            let wgt = Tensor::<f64>::rand_normal(&[3, 2, 3, 3], 0.4, &mut rng);
            let b = Tensor::<f64>::rand_uniform(&[3], -0.2, 0.2, &mut rng);
            // scalar objective: weighted sum of outputs with fixed coefficients
            let coeffs: Vec<f64> = {
                let y = conv2d(&x, &wgt, &b, stride, padding).unwrap();
                let mut r = ChaCha8Rng::seed_from_u64(7);
                Tensor::<f64>::rand_uniform(y.shape(), -1.0, 1.0, &mut r)
                    .into_data()
            };
            let f = |x: &Tensor<f64>, wgt: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                conv2d(x, wgt, b, stride, padding)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(&coeffs)
                    .map(|(&v, &c)| v * c)
                    .sum()
            };
            let d_out = Tensor::from_vec(
                conv2d(&x, &wgt, &b, stride, padding).unwrap().shape().to_vec(),
                coeffs.clone(),
            )
            .unwrap();
            let (dx, dw, db) = conv2d_backward(&x, &wgt, stride, padding, &d_out).unwrap();
            let h_step = 1e-6;
            for (tensor, grad, which) in [(&x, &dx, 0usize), (&wgt, &dw, 1), (&b, &db, 2)] {
                for i in (0..tensor.len()).step_by(7) {
                    let mut plus = (*tensor).clone();
                    plus.data_mut()[i] += h_step;
                    let mut minus = (*tensor).clone();
                    minus.data_mut()[i] -= h_step;
                    let fd = match which {
                        0 => (f(&plus, &wgt, &b) - f(&minus, &wgt, &b)) / (2.0 * h_step),
                        1 => (f(&x, &plus, &b) - f(&x, &minus, &b)) / (2.0 * h_step),
                        _ => (f(&x, &wgt, &plus) - f(&x, &wgt, &minus)) / (2.0 * h_step),
                    };
                    let an = grad.data()[i];
                    assert!(
                        (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                        "case {case_idx} tensor {which} idx {i}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }
}
