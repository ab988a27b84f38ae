//! 2-D convolution (cross-correlation) via im2col + matmul.
//!
//! Accumulation order per output element is (cin, kh, kw) ascending, starting
//! from the bias, which is exactly the order of the direct 6-nested-loop
//! formulation — the two routes agree bitwise at 32-bit rounding.

use crate::error::{Error, Result};
use crate::ops::matmul::{matmul_acc, matmul_atb_acc};
use crate::tensor::{pairwise_sum, Element, TensorBase};

pub fn conv_out_dim(in_dim: usize, k: usize, stride: usize, padding: usize) -> usize {
    (in_dim + 2 * padding - k) / stride + 1
}

fn validate<T: Element>(
    input: &TensorBase<T>,
    kernel: &TensorBase<T>,
    bias: Option<&TensorBase<T>>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("kernel input channels {}", cin),
            format!("{}", kcin),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: kernel dims must be odd, got {}x{}",
            kh, kw
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!("padded input at least {}x{}", kh, kw),
            format!("{}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d bias", format!("[{}]", cout), format!("{:?}", b.shape())));
        }
    }
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    Ok((n, cin, h, w, cout, kh, kw, oh, ow))
}

/// Gather conv patches: cols[(cin*kh+i)*kw+j][oy*ow+ox] for one batch item.
fn im2col<T: Element>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let patch = oh * ow;
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((c * kh + i) * kw + j) * patch..((c * kh + i) * kw + j + 1) * patch];
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        for v in &mut row[oy * ow..(oy + 1) * ow] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - padding as isize;
                        row[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an input-shaped gradient.
fn col2im_add<T: Element>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let patch = oh * ow;
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((c * kh + i) * kw + j) * patch..((c * kh + i) * kw + j + 1) * patch];
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// input [N,Cin,H,W] * kernel [Cout,Cin,kh,kw] (+ bias[Cout]) -> [N,Cout,H',W']
/// with H' = (H + 2*padding - kh)/stride + 1. Zero padding only.
pub fn conv2d<T: Element>(
    input: &TensorBase<T>,
    kernel: &TensorBase<T>,
    bias: Option<&TensorBase<T>>,
    stride: usize,
    padding: usize,
) -> Result<TensorBase<T>> {
    let (n, cin, h, w, cout, kh, kw, oh, ow) = validate(input, kernel, bias, stride, padding)?;
    let k = cin * kh * kw;
    let patch = oh * ow;
    let mut cols = vec![T::zero(); k * patch];
    let mut out = TensorBase::zeros(&[n, cout, oh, ow]);
    for ni in 0..n {
        im2col(
            &input.data()[ni * cin * h * w..(ni + 1) * cin * h * w],
            cin, h, w, kh, kw, stride, padding, oh, ow, &mut cols,
        );
        let out_slice = &mut out.data_mut()[ni * cout * patch..(ni + 1) * cout * patch];
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b.data()[co];
                for v in &mut out_slice[co * patch..(co + 1) * patch] {
                    *v = bv;
                }
            }
        }
        matmul_acc(kernel.data(), &cols, out_slice, cout, k, patch);
    }
    Ok(out)
}

/// Gradients w.r.t. (input, kernel, bias).
pub fn conv2d_vjp<T: Element>(
    grad_out: &TensorBase<T>,
    input: &TensorBase<T>,
    kernel: &TensorBase<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
) -> (TensorBase<T>, TensorBase<T>, Option<TensorBase<T>>) {
    let (n, cin, h, w) = input.dims4().expect("conv2d_vjp input rank");
    let (cout, _, kh, kw) = kernel.dims4().expect("conv2d_vjp kernel rank");
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let k = cin * kh * kw;
    let patch = oh * ow;

    let mut dinput = TensorBase::zeros(input.shape());
    let mut dkernel = TensorBase::zeros(kernel.shape());
    let mut cols = vec![T::zero(); k * patch];
    let mut dcols = vec![T::zero(); k * patch];

    for ni in 0..n {
        let g = &grad_out.data()[ni * cout * patch..(ni + 1) * cout * patch];
        im2col(
            &input.data()[ni * cin * h * w..(ni + 1) * cin * h * w],
            cin, h, w, kh, kw, stride, padding, oh, ow, &mut cols,
        );
        // dkernel[co,k] += sum_p g[co,p] * cols[k,p]
        for co in 0..cout {
            let g_row = &g[co * patch..(co + 1) * patch];
            let dk_row = &mut dkernel.data_mut()[co * k..(co + 1) * k];
            for (kk, dkv) in dk_row.iter_mut().enumerate() {
                let col_row = &cols[kk * patch..(kk + 1) * patch];
                let mut acc = T::zero();
                for (&gv, &cv) in g_row.iter().zip(col_row) {
                    acc = acc + gv * cv;
                }
                *dkv = *dkv + acc;
            }
        }
        // dcols = kernel^T [k,cout] * g [cout,patch]
        for v in dcols.iter_mut() {
            *v = T::zero();
        }
        matmul_atb_acc(kernel.data(), g, &mut dcols, cout, k, patch);
        col2im_add(
            &dcols,
            cin, h, w, kh, kw, stride, padding, oh, ow,
            &mut dinput.data_mut()[ni * cin * h * w..(ni + 1) * cin * h * w],
        );
    }

    let dbias = has_bias.then(|| {
        let mut db = TensorBase::zeros(&[cout]);
        for co in 0..cout {
            let mut per_n = vec![T::zero(); n];
            for (ni, acc) in per_n.iter_mut().enumerate() {
                let g = &grad_out.data()[(ni * cout + co) * patch..(ni * cout + co + 1) * patch];
                *acc = pairwise_sum(g);
            }
            db.data_mut()[co] = pairwise_sum(&per_n);
        }
        db
    });

    (dinput, dkernel, dbias)
}

/// Direct 6-nested-loop conv used as the independent oracle in tests. Kept in
/// the library (not test-only) so the gradcheck CLI can cross-check routes.
pub fn conv2d_reference<T: Element>(
    input: &TensorBase<T>,
    kernel: &TensorBase<T>,
    bias: Option<&TensorBase<T>>,
    stride: usize,
    padding: usize,
) -> Result<TensorBase<T>> {
    let (n, cin, h, w, cout, kh, kw, oh, ow) = validate(input, kernel, bias, stride, padding)?;
    let mut out = TensorBase::zeros(&[n, cout, oh, ow]);
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[co]);
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - padding as isize;
                                let ix = (ox * stride + j) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((ni * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kernel.data()[((co * cin + ci) * kh + i) * kw + j];
                                acc = acc + iv * kv;
                            }
                        }
                    }
                    out.data_mut()[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_1x1_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, &[1, 3, 5, 5]);
        // 1x1 kernel = identity matrix over channels
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let out = conv2d(&input, &k, None, 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_input_yields_bias_per_channel() {
        let input = Tensor::zeros(&[2, 3, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random_tensor(&mut rng, &[2, 3, 3, 3]);
        let b = Tensor::from_vec(&[2], vec![0.5, -1.25]);
        let out = conv2d(&input, &k, Some(&b), 1, 1).unwrap();
        for n in 0..2 {
            for (c, &bv) in [0.5f32, -1.25].iter().enumerate() {
                for &v in &out.data()[(n * 2 + c) * 16..(n * 2 + c + 1) * 16] {
                    assert_eq!(v, bv);
                }
            }
        }
    }

    #[test]
    fn matches_reference_on_spec_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, &[1, 2, 4, 4]);
        let k = random_tensor(&mut rng, &[1, 2, 3, 3]);
        let b = random_tensor(&mut rng, &[1]);
        let fast = conv2d(&input, &k, Some(&b), 1, 1).unwrap();
        let slow = conv2d_reference(&input, &k, Some(&b), 1, 1).unwrap();
        assert_eq!(fast, slow, "im2col route must match the nested-loop oracle bitwise");
    }

    #[test]
    fn matches_reference_on_100_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..100 {
            let n = rng.gen_range(1..3);
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..4);
            let kh = *[1, 3, 5].get(rng.gen_range(0..3)).unwrap();
            let kw = *[1, 3].get(rng.gen_range(0..2)).unwrap();
            let stride = rng.gen_range(1..3);
            let padding = rng.gen_range(0..3);
            let h = rng.gen_range(kh.max(3)..8);
            let w = rng.gen_range(kw.max(3)..8);
            let input = random_tensor(&mut rng, &[n, cin, h, w]);
            let k = random_tensor(&mut rng, &[cout, cin, kh, kw]);
            let b = random_tensor(&mut rng, &[cout]);
            let fast = conv2d(&input, &k, Some(&b), stride, padding).unwrap();
            let slow = conv2d_reference(&input, &k, Some(&b), stride, padding).unwrap();
            assert_eq!(fast, slow, "case {case}: shapes in={:?} k={:?} s={stride} p={padding}", input.shape(), k.shape());
        }
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        let input = Tensor::zeros(&[1, 2, 4, 4]);
        let k_even = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&input, &k_even, None, 1, 0).is_err());
        let k_badc = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&input, &k_badc, None, 1, 1).is_err());
    }

    #[test]
    fn strided_output_dims() {
        let input = Tensor::zeros(&[1, 1, 7, 9]);
        let k = Tensor::zeros(&[2, 1, 3, 3]);
        let out = conv2d(&input, &k, None, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 2, 4, 5]);
    }
}
