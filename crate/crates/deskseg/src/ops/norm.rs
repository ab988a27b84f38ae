//! Batch-statistics normalization kernels.
//!
//! Train mode standardizes each channel with the mini-batch mean and
//! population variance (divisor N*H*W) computed over that channel's N*H*W
//! elements, then applies the learned affine: y = gamma * xhat + beta.
//! Eval mode applies the same formula with externally stored statistics.

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Element, TensorBase};

/// Values saved by the train forward for its VJP, plus the batch statistics
/// the caller needs for running-average updates.
pub struct BnTrainSaved<T> {
    pub xhat: TensorBase<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn gather_channel<T: Element>(x: &TensorBase<T>, ci: usize, buf: &mut Vec<T>) {
    let (n, c, h, w) = x.dims4().expect("gather_channel rank");
    let plane = h * w;
    buf.clear();
    for ni in 0..n {
        buf.extend_from_slice(&x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]);
    }
}

pub fn batchnorm_train<T: Element>(
    x: &TensorBase<T>,
    gamma: &TensorBase<T>,
    beta: &TensorBase<T>,
    epsilon: f64,
) -> Result<(TensorBase<T>, BnTrainSaved<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm_train",
            format!("gamma/beta [{}]", c),
            format!("{:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let m = n * h * w;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm_train: need at least 2 elements per channel, got {}",
            m
        )));
    }
    let plane = h * w;
    let m_t = T::from_f64(m as f64);
    let eps = T::from_f64(epsilon);
    let mut out = TensorBase::zeros(x.shape());
    let mut xhat = TensorBase::zeros(x.shape());
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut buf: Vec<T> = Vec::with_capacity(m);
    let mut centered: Vec<T> = Vec::with_capacity(m);

    for ci in 0..c {
        gather_channel(x, ci, &mut buf);
        let mu = pairwise_sum(&buf) / m_t;
        centered.clear();
        centered.extend(buf.iter().map(|&v| v - mu));
        let sq: Vec<T> = centered.iter().map(|&v| v * v).collect();
        let v = pairwise_sum(&sq) / m_t;
        let istd = T::one() / (v + eps).sqrt();
        mean[ci] = mu;
        var[ci] = v;
        inv_std[ci] = istd;
        let g = gamma.data()[ci];
        let b = beta.data()[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            let cslice = &centered[ni * plane..(ni + 1) * plane];
            let xh = &mut xhat.data_mut()[base..base + plane];
            for (dst, &cv) in xh.iter_mut().zip(cslice) {
                *dst = cv * istd;
            }
        }
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for idx in base..base + plane {
                out.data_mut()[idx] = g * xhat.data()[idx] + b;
            }
        }
    }
    Ok((out, BnTrainSaved { xhat, inv_std, mean, var }))
}

/// Gradients w.r.t. (x, gamma, beta) for the train forward.
pub fn batchnorm_train_vjp<T: Element>(
    grad_out: &TensorBase<T>,
    saved: &BnTrainSaved<T>,
    gamma: &TensorBase<T>,
) -> (TensorBase<T>, TensorBase<T>, TensorBase<T>) {
    let (n, c, h, w) = saved.xhat.dims4().expect("bn vjp rank");
    let plane = h * w;
    let m = n * plane;
    let m_t = T::from_f64(m as f64);
    let mut dx = TensorBase::zeros(saved.xhat.shape());
    let mut dgamma = TensorBase::zeros(&[c]);
    let mut dbeta = TensorBase::zeros(&[c]);
    let mut g_buf: Vec<T> = Vec::with_capacity(m);
    let mut gx_buf: Vec<T> = Vec::with_capacity(m);

    for ci in 0..c {
        g_buf.clear();
        gx_buf.clear();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for idx in base..base + plane {
                let g = grad_out.data()[idx];
                g_buf.push(g);
                gx_buf.push(g * saved.xhat.data()[idx]);
            }
        }
        let sum_g = pairwise_sum(&g_buf);
        let sum_gx = pairwise_sum(&gx_buf);
        dgamma.data_mut()[ci] = sum_gx;
        dbeta.data_mut()[ci] = sum_g;

        // dxhat = g * gamma; dx = inv_std/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        let gam = gamma.data()[ci];
        let istd = saved.inv_std[ci];
        let s1 = gam * sum_g;
        let s2 = gam * sum_gx;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for idx in base..base + plane {
                let dxhat = grad_out.data()[idx] * gam;
                let xh = saved.xhat.data()[idx];
                dx.data_mut()[idx] = istd * (dxhat - (s1 + xh * s2) / m_t);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode normalization with externally supplied per-channel statistics.
/// Statistics are constants; only (x, gamma, beta) carry gradient.
pub fn batchnorm_eval<T: Element>(
    x: &TensorBase<T>,
    gamma: &TensorBase<T>,
    beta: &TensorBase<T>,
    mean: &[T],
    var: &[T],
    epsilon: f64,
) -> Result<TensorBase<T>> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(Error::shape(
            "batchnorm_eval",
            format!("gamma/beta/mean/var of length {}", c),
            format!(
                "{:?}/{:?}/{}/{}",
                gamma.shape(),
                beta.shape(),
                mean.len(),
                var.len()
            ),
        ));
    }
    let eps = T::from_f64(epsilon);
    let plane = h * w;
    let mut out = TensorBase::zeros(x.shape());
    for ci in 0..c {
        let istd = T::one() / (var[ci] + eps).sqrt();
        let g = gamma.data()[ci];
        let b = beta.data()[ci];
        let mu = mean[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for idx in base..base + plane {
                out.data_mut()[idx] = g * (x.data()[idx] - mu) * istd + b;
            }
        }
    }
    Ok(out)
}

pub fn batchnorm_eval_vjp<T: Element>(
    grad_out: &TensorBase<T>,
    x: &TensorBase<T>,
    gamma: &TensorBase<T>,
    mean: &[T],
    var: &[T],
    epsilon: f64,
) -> (TensorBase<T>, TensorBase<T>, TensorBase<T>) {
    let (n, c, h, w) = x.dims4().expect("bn eval vjp rank");
    let eps = T::from_f64(epsilon);
    let plane = h * w;
    let m = n * plane;
    let mut dx = TensorBase::zeros(x.shape());
    let mut dgamma = TensorBase::zeros(&[c]);
    let mut dbeta = TensorBase::zeros(&[c]);
    let mut g_buf: Vec<T> = Vec::with_capacity(m);
    let mut gx_buf: Vec<T> = Vec::with_capacity(m);
    for ci in 0..c {
        let istd = T::one() / (var[ci] + eps).sqrt();
        let scale = gamma.data()[ci] * istd;
        let mu = mean[ci];
        g_buf.clear();
        gx_buf.clear();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for idx in base..base + plane {
                let g = grad_out.data()[idx];
                dx.data_mut()[idx] = g * scale;
                g_buf.push(g);
                gx_buf.push(g * (x.data()[idx] - mu) * istd);
            }
        }
        dgamma.data_mut()[ci] = pairwise_sum(&gx_buf);
        dbeta.data_mut()[ci] = pairwise_sum(&g_buf);
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::full(&[2, 1, 2, 2], 5.0);
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::full(&[1], 3.0);
        let (y, _) = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 3.0);
        }
    }

    #[test]
    fn worked_example_1234() {
        // mu = 2.5, population var = 1.25; scalar oracle of the normalization
        // formula with eps = 1e-5.
        let x = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::zeros(&[1]);
        let (y, saved) = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
        assert_eq!(saved.mean[0], 2.5);
        assert_eq!(saved.var[0], 1.25);
        let expected = [-1.34163, -0.44721, 0.44721, 1.34163];
        for (got, want) in y.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![0.5, -1.0, 2.0]);
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::zeros(&[1]);
        let y = batchnorm_eval(&x, &gamma, &beta, &[0.0], &[1.0], 1e-5).unwrap();
        let factor = 1.0 / (1.0f32 + 1e-5).sqrt();
        for (&got, &xin) in y.data().iter().zip(x.data()) {
            assert_eq!(got, xin * factor);
        }
    }

    #[test]
    fn rejects_single_element_batch() {
        let x = Tensor::full(&[1, 1, 1, 1], 5.0);
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::zeros(&[1]);
        assert!(batchnorm_train(&x, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn standardized_output_statistics() {
        use rand::Rng;
        use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(&[4, 3, 8, 8], (0..4 * 3 * 64).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let gamma = Tensor::ones(&[3]);
        let beta = Tensor::zeros(&[3]);
        let (y, saved) = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
        for ci in 0..3 {
            let mut vals = Vec::new();
            for ni in 0..4 {
                vals.extend_from_slice(&y.data()[(ni * 3 + ci) * 64..(ni * 3 + ci + 1) * 64]);
            }
            let m = vals.len() as f32;
            let mean: f32 = pairwise_sum(&vals) / m;
            let var: f32 = pairwise_sum(&vals.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>()) / m;
            assert!(mean.abs() < 1e-5, "channel {ci} mean {mean}");
            // variance = sigma^2/(sigma^2+eps), slightly below 1
            assert!(saved.var[ci] > 0.1);
            assert!(var > 1.0 - 1e-3 && var <= 1.0 + 1e-5, "channel {ci} var {var}");
        }
    }
}
