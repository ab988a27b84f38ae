//! Elementwise primitives and small structural ops (concat, channel
//! broadcast, per-channel affine).

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Element, TensorBase};

fn check_same_shape<T: Element>(ctx: &str, a: &TensorBase<T>, b: &TensorBase<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(ctx, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

pub fn relu<T: Element>(x: &TensorBase<T>) -> TensorBase<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_vjp<T: Element>(grad_out: &TensorBase<T>, x: &TensorBase<T>) -> TensorBase<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &xv)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    TensorBase::from_vec(x.shape(), data)
}

pub fn sigmoid<T: Element>(x: &TensorBase<T>) -> TensorBase<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

pub fn sigmoid_vjp<T: Element>(grad_out: &TensorBase<T>, y: &TensorBase<T>) -> TensorBase<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &yv)| g * yv * (T::one() - yv))
        .collect();
    TensorBase::from_vec(y.shape(), data)
}

/// Natural log; caller guarantees strictly positive input.
pub fn log<T: Element>(x: &TensorBase<T>) -> TensorBase<T> {
    x.map(|v| v.ln())
}

pub fn log_vjp<T: Element>(grad_out: &TensorBase<T>, x: &TensorBase<T>) -> TensorBase<T> {
    let data = grad_out.data().iter().zip(x.data()).map(|(&g, &xv)| g / xv).collect();
    TensorBase::from_vec(x.shape(), data)
}

pub fn add<T: Element>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(TensorBase::from_vec(a.shape(), data))
}

pub fn mul<T: Element>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(TensorBase::from_vec(a.shape(), data))
}

pub fn mul_scalar<T: Element>(x: &TensorBase<T>, c: T) -> TensorBase<T> {
    x.map(|v| v * c)
}

pub fn add_scalar<T: Element>(x: &TensorBase<T>, c: T) -> TensorBase<T> {
    x.map(|v| v + c)
}

/// c - x (used for 1 - mask in the fusion blend).
pub fn rsub_scalar<T: Element>(x: &TensorBase<T>, c: T) -> TensorBase<T> {
    x.map(|v| c - v)
}

/// [N,1,H,W] -> [N,C,H,W] by repeating the single channel.
pub fn broadcast_channel<T: Element>(x: &TensorBase<T>, channels: usize) -> Result<TensorBase<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape("broadcast_channel", "[N,1,H,W]", format!("{:?}", x.shape())));
    }
    let plane = h * w;
    let mut out = TensorBase::zeros(&[n, channels, h, w]);
    for ni in 0..n {
        let src = &x.data()[ni * plane..(ni + 1) * plane];
        for ci in 0..channels {
            out.data_mut()[(ni * channels + ci) * plane..(ni * channels + ci + 1) * plane]
                .copy_from_slice(src);
        }
    }
    Ok(out)
}

pub fn broadcast_channel_vjp<T: Element>(grad_out: &TensorBase<T>, n: usize, h: usize, w: usize) -> TensorBase<T> {
    let (_, channels, _, _) = grad_out.dims4().expect("broadcast_channel_vjp rank");
    let plane = h * w;
    let mut dx = TensorBase::zeros(&[n, 1, h, w]);
    for ni in 0..n {
        let dst = &mut dx.data_mut()[ni * plane..(ni + 1) * plane];
        for ci in 0..channels {
            let src = &grad_out.data()[(ni * channels + ci) * plane..(ni * channels + ci + 1) * plane];
            for (d, &g) in dst.iter_mut().zip(src) {
                *d = *d + g;
            }
        }
    }
    dx
}

/// Concatenate rank-4 tensors along the channel axis.
pub fn concat_channels<T: Element>(inputs: &[&TensorBase<T>]) -> Result<TensorBase<T>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("concat: empty input list".into()));
    }
    let (n, _, h, w) = inputs[0].dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat",
                format!("[{},*,{},{}]", n, h, w),
                format!("{:?}", t.shape()),
            ));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut out = TensorBase::zeros(&[n, total_c, h, w]);
    for ni in 0..n {
        let mut co = 0;
        for t in inputs {
            let tc = t.shape()[1];
            let src = &t.data()[ni * tc * plane..(ni + 1) * tc * plane];
            out.data_mut()[(ni * total_c + co) * plane..(ni * total_c + co + tc) * plane]
                .copy_from_slice(src);
            co += tc;
        }
    }
    Ok(out)
}

/// Split an upstream gradient back into per-input channel slices.
pub fn concat_channels_vjp<T: Element>(grad_out: &TensorBase<T>, channel_splits: &[usize]) -> Vec<TensorBase<T>> {
    let (n, total_c, h, w) = grad_out.dims4().expect("concat_vjp rank");
    debug_assert_eq!(channel_splits.iter().sum::<usize>(), total_c);
    let plane = h * w;
    let mut grads: Vec<TensorBase<T>> = channel_splits
        .iter()
        .map(|&c| TensorBase::zeros(&[n, c, h, w]))
        .collect();
    for ni in 0..n {
        let mut co = 0;
        for (gi, &c) in channel_splits.iter().enumerate() {
            let src = &grad_out.data()[(ni * total_c + co) * plane..(ni * total_c + co + c) * plane];
            grads[gi].data_mut()[ni * c * plane..(ni + 1) * c * plane].copy_from_slice(src);
            co += c;
        }
    }
    grads
}

/// y[n,c,h,w] = scale[c] * x[n,c,h,w] + shift[c].
pub fn channel_affine<T: Element>(
    x: &TensorBase<T>,
    scale: &TensorBase<T>,
    shift: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    let (n, c, h, w) = x.dims4()?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "channel_affine",
            format!("scale/shift [{}]", c),
            format!("{:?}/{:?}", scale.shape(), shift.shape()),
        ));
    }
    let plane = h * w;
    let mut out = TensorBase::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let s = scale.data()[ci];
            let b = shift.data()[ci];
            let src = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            let dst = &mut out.data_mut()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = s * v + b;
            }
        }
    }
    Ok(out)
}

/// Gradients w.r.t. (x, scale, shift).
pub fn channel_affine_vjp<T: Element>(
    grad_out: &TensorBase<T>,
    x: &TensorBase<T>,
    scale: &TensorBase<T>,
) -> (TensorBase<T>, TensorBase<T>, TensorBase<T>) {
    let (n, c, h, w) = x.dims4().expect("channel_affine_vjp rank");
    let plane = h * w;
    let mut dx = TensorBase::zeros(x.shape());
    let mut dscale = TensorBase::zeros(&[c]);
    let mut dshift = TensorBase::zeros(&[c]);
    for ci in 0..c {
        let s = scale.data()[ci];
        let mut gs = Vec::with_capacity(n * plane);
        let mut gx = Vec::with_capacity(n * plane);
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            let g = &grad_out.data()[base..base + plane];
            let xs = &x.data()[base..base + plane];
            let dst = &mut dx.data_mut()[base..base + plane];
            for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xs) {
                *d = s * gv;
                gs.push(gv);
                gx.push(gv * xv);
            }
        }
        dscale.data_mut()[ci] = pairwise_sum(&gx);
        dshift.data_mut()[ci] = pairwise_sum(&gs);
    }
    (dx, dscale, dshift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(&[4], vec![-1.0, 0.0, 0.5, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn add_mul_reject_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let a = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[1, 1, 1, 2], vec![5.0, 6.0]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let parts = concat_channels_vjp(&c, &[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 2, 4, 4]);
        let b = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn broadcast_repeats_and_vjp_sums() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 4.0]);
        let y = broadcast_channel(&x, 3).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let g = Tensor::ones(&[1, 3, 1, 2]);
        let dx = broadcast_channel_vjp(&g, 1, 1, 2);
        assert_eq!(dx.data(), &[3.0, 3.0]);
    }

    #[test]
    fn channel_affine_applies_per_channel() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = Tensor::from_vec(&[2], vec![2.0, -1.0]);
        let b = Tensor::from_vec(&[2], vec![0.5, 0.0]);
        let y = channel_affine(&x, &s, &b).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, -3.0, -4.0]);
    }
}
