//! Flat matmul helpers and the batched matmul / linear primitives built on
//! them. All variants accumulate into a caller-initialized output so conv can
//! seed the accumulator with the bias and keep the reference summation order.

use crate::error::{Error, Result};
use crate::tensor::{Element, TensorBase};

/// c[m,n] += a[m,k] * b[k,n]. Accumulates in k-ascending order per output
/// element (axpy over rows of b), which the conv reference oracle mirrors.
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T (rows of a dotted with rows of b).
pub fn matmul_abt_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n].
pub fn matmul_atb_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

/// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
pub fn bmm<T: Element>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (ba, m, k) = a.dims3()?;
    let (bb, kb, n) = b.dims3()?;
    if ba != bb || k != kb {
        return Err(Error::shape(
            "bmm",
            format!("[B,M,K] x [B,K,N] with matching B and K"),
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = TensorBase::zeros(&[ba, m, n]);
    for i in 0..ba {
        matmul_acc(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(out)
}

pub fn bmm_vjp<T: Element>(
    grad_out: &TensorBase<T>,
    a: &TensorBase<T>,
    b: &TensorBase<T>,
) -> (TensorBase<T>, TensorBase<T>) {
    let (bs, m, k) = a.dims3().expect("bmm_vjp: a rank");
    let (_, _, n) = b.dims3().expect("bmm_vjp: b rank");
    let mut da = TensorBase::zeros(a.shape());
    let mut db = TensorBase::zeros(b.shape());
    for i in 0..bs {
        let g = &grad_out.data()[i * m * n..(i + 1) * m * n];
        // da = g * b^T
        matmul_abt_acc(
            g,
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
            m,
            n,
            k,
        );
        // db = a^T * g
        matmul_atb_acc(
            &a.data()[i * m * k..(i + 1) * m * k],
            g,
            &mut db.data_mut()[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
        );
    }
    (da, db)
}

/// Swap the last two axes of a rank-3 tensor: [B,M,N] -> [B,N,M].
pub fn transpose12<T: Element>(input: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (b, m, n) = input.dims3()?;
    let mut out = TensorBase::zeros(&[b, n, m]);
    let src = input.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                dst[bi * n * m + j * m + i] = src[bi * m * n + i * n + j];
            }
        }
    }
    Ok(out)
}

pub fn transpose12_vjp<T: Element>(grad_out: &TensorBase<T>) -> TensorBase<T> {
    transpose12(grad_out).expect("transpose12_vjp")
}

/// Linear map over the trailing axis: [B,K,C] x weight[O,C] (+ bias[O]) -> [B,K,O].
pub fn linear<T: Element>(
    input: &TensorBase<T>,
    weight: &TensorBase<T>,
    bias: Option<&TensorBase<T>>,
) -> Result<TensorBase<T>> {
    let (b, k, c) = input.dims3()?;
    let (o, cw) = match weight.shape() {
        &[o, cw] => (o, cw),
        other => return Err(Error::shape("linear weight", "[O,C]", format!("{:?}", other))),
    };
    if cw != c {
        return Err(Error::shape(
            "linear",
            format!("input trailing dim {}", c),
            format!("weight trailing dim {}", cw),
        ));
    }
    if let Some(bt) = bias {
        if bt.shape() != [o] {
            return Err(Error::shape("linear bias", format!("[{}]", o), format!("{:?}", bt.shape())));
        }
    }
    let rows = b * k;
    let mut out = TensorBase::zeros(&[b, k, o]);
    if let Some(bt) = bias {
        for r in 0..rows {
            out.data_mut()[r * o..(r + 1) * o].copy_from_slice(bt.data());
        }
    }
    matmul_abt_acc(input.data(), weight.data(), out.data_mut(), rows, c, o);
    Ok(out)
}

pub fn linear_vjp<T: Element>(
    grad_out: &TensorBase<T>,
    input: &TensorBase<T>,
    weight: &TensorBase<T>,
    has_bias: bool,
) -> (TensorBase<T>, TensorBase<T>, Option<TensorBase<T>>) {
    let (b, k, c) = input.dims3().expect("linear_vjp input rank");
    let o = weight.shape()[0];
    let rows = b * k;
    let mut din = TensorBase::zeros(input.shape());
    // din = g[rows,O] * w[O,C]
    matmul_acc(grad_out.data(), weight.data(), din.data_mut(), rows, o, c);
    // dw = g^T[O,rows] * in[rows,C]
    let mut dw = TensorBase::zeros(weight.shape());
    matmul_atb_acc(grad_out.data(), input.data(), dw.data_mut(), rows, o, c);
    let dbias = has_bias.then(|| {
        let mut db = TensorBase::zeros(&[o]);
        for r in 0..rows {
            let g = &grad_out.data()[r * o..(r + 1) * o];
            for (dv, &gv) in db.data_mut().iter_mut().zip(g) {
                *dv = *dv + gv;
            }
        }
        db
    });
    (din, dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn bmm_small_known_values() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = bmm(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn bmm_rejects_mismatched_inner_dim() {
        let a = Tensor::zeros(&[1, 2, 3]);
        let b = Tensor::zeros(&[1, 2, 2]);
        assert!(bmm(&a, &b).is_err());
    }

    #[test]
    fn transpose_roundtrip_is_identity() {
        let a = Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f32).collect());
        let t = transpose12(&a).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2]);
        let back = transpose12(&t).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn linear_matches_manual_dot() {
        let x = Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let b = Tensor::from_vec(&[2], vec![10.0, 20.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        // row0: [1, 2+3] + [10,20] = [11, 25]; row1: [4, 5+6] + [10,20] = [14, 31]
        assert_eq!(y.data(), &[11.0, 25.0, 14.0, 31.0]);
    }
}
