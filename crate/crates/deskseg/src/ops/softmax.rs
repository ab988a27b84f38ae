//! Softmax along an arbitrary axis, computed with max-subtraction.

use crate::error::{Error, Result};
use crate::tensor::{Element, TensorBase};

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (outer, len, inner)
}

pub fn softmax_axis<T: Element>(input: &TensorBase<T>, axis: usize) -> Result<TensorBase<T>> {
    if axis >= input.shape().len() {
        return Err(Error::InvalidArgument(format!(
            "softmax_axis: axis {} out of range for shape {:?}",
            axis,
            input.shape()
        )));
    }
    let (outer, len, inner) = axis_strides(input.shape(), axis);
    let mut out = TensorBase::zeros(input.shape());
    let src = input.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = src[base];
            for l in 1..len {
                let v = src[base + l * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (src[base + l * inner] - max).exp();
                dst[base + l * inner] = e;
                sum = sum + e;
            }
            for l in 0..len {
                dst[base + l * inner] = dst[base + l * inner] / sum;
            }
        }
    }
    Ok(out)
}

/// dx = y * (dy - sum(dy * y)) per slice.
pub fn softmax_axis_vjp<T: Element>(grad_out: &TensorBase<T>, y: &TensorBase<T>, axis: usize) -> TensorBase<T> {
    let (outer, len, inner) = axis_strides(y.shape(), axis);
    let mut dx = TensorBase::zeros(y.shape());
    let yd = y.data();
    let gd = grad_out.data();
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for l in 0..len {
                dot = dot + gd[base + l * inner] * yd[base + l * inner];
            }
            for l in 0..len {
                let idx = base + l * inner;
                dd[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    dx
}
