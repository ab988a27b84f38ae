//! Pixelwise cross-entropy over class logits, fused with log-softmax.

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Element, IntTensor, TensorBase};

fn validate<T: Element>(logits: &TensorBase<T>, mask: &IntTensor, ignore_id: Option<u8>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = logits.dims4()?;
    if mask.shape() != [n, h, w] {
        return Err(Error::shape(
            "cross_entropy mask",
            format!("[{},{},{}]", n, h, w),
            format!("{:?}", mask.shape()),
        ));
    }
    for &id in mask.data() {
        if Some(id) == ignore_id {
            continue;
        }
        if (id as usize) >= c {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: mask id {} >= num classes {}",
                id, c
            )));
        }
    }
    Ok((n, c, h, w))
}

/// Mean over non-ignored pixels of -log softmax(logits)[true class].
pub fn cross_entropy<T: Element>(
    logits: &TensorBase<T>,
    mask: &IntTensor,
    ignore_id: Option<u8>,
) -> Result<T> {
    let (n, c, h, w) = validate(logits, mask, ignore_id)?;
    let plane = h * w;
    let mut per_pixel: Vec<T> = Vec::new();
    for ni in 0..n {
        for p in 0..plane {
            let id = mask.data()[ni * plane + p];
            if Some(id) == ignore_id {
                continue;
            }
            let mut max = logits.data()[(ni * c) * plane + p];
            for ci in 1..c {
                let v = logits.data()[(ni * c + ci) * plane + p];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for ci in 0..c {
                sum = sum + (logits.data()[(ni * c + ci) * plane + p] - max).exp();
            }
            let lse = max + sum.ln();
            per_pixel.push(lse - logits.data()[(ni * c + id as usize) * plane + p]);
        }
    }
    if per_pixel.is_empty() {
        return Err(Error::InvalidArgument(
            "cross_entropy: no non-ignored pixels".into(),
        ));
    }
    Ok(pairwise_sum(&per_pixel) / T::from_f64(per_pixel.len() as f64))
}

/// dlogits = upstream * (softmax - onehot) / n_valid; zero at ignored pixels.
pub fn cross_entropy_vjp<T: Element>(
    upstream: T,
    logits: &TensorBase<T>,
    mask: &IntTensor,
    ignore_id: Option<u8>,
) -> TensorBase<T> {
    let (n, c, h, w) = logits.dims4().expect("cross_entropy_vjp rank");
    let plane = h * w;
    let n_valid = mask
        .data()
        .iter()
        .filter(|&&id| Some(id) != ignore_id)
        .count();
    let scale = upstream / T::from_f64(n_valid as f64);
    let mut dl = TensorBase::zeros(logits.shape());
    for ni in 0..n {
        for p in 0..plane {
            let id = mask.data()[ni * plane + p];
            if Some(id) == ignore_id {
                continue;
            }
            let mut max = logits.data()[(ni * c) * plane + p];
            for ci in 1..c {
                let v = logits.data()[(ni * c + ci) * plane + p];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for ci in 0..c {
                sum = sum + (logits.data()[(ni * c + ci) * plane + p] - max).exp();
            }
            for ci in 0..c {
                let soft = (logits.data()[(ni * c + ci) * plane + p] - max).exp() / sum;
                let onehot = if ci == id as usize { T::one() } else { T::zero() };
                dl.data_mut()[(ni * c + ci) * plane + p] = scale * (soft - onehot);
            }
        }
    }
    dl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[1, 4, 2, 2]);
        let mask = IntTensor::new(vec![1, 2, 2], vec![0, 1, 2, 3]).unwrap();
        let loss = cross_entropy(&logits, &mask, None).unwrap();
        assert!((loss - 4.0f32.ln()).abs() < 1e-6, "{loss} vs ln 4 = {}", 4.0f32.ln());
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut logits = Tensor::zeros(&[1, 3, 1, 2]);
        let mask = IntTensor::new(vec![1, 1, 2], vec![1, 2]).unwrap();
        logits.data_mut()[1 * 2 + 0] = 1e3; // class 1 at pixel 0
        logits.data_mut()[2 * 2 + 1] = 1e3; // class 2 at pixel 1
        let loss = cross_entropy(&logits, &mask, None).unwrap();
        assert!(loss < 1e-3, "{loss}");
    }

    #[test]
    fn matches_scalar_oracle_on_random_instance() {
        use rand::Rng;
        use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::from_vec(&[1, 3, 2, 2], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mask = IntTensor::new(vec![1, 2, 2], vec![0, 2, 1, 1]).unwrap();
        let loss = cross_entropy(&logits, &mask, None).unwrap() as f64;

        // independent scalar route: plain exp/sum per pixel in f64
        let mut total = 0.0f64;
        for p in 0..4 {
            let vals: Vec<f64> = (0..3).map(|c| logits.data()[c * 4 + p] as f64).collect();
            let denom: f64 = vals.iter().map(|v| v.exp()).sum();
            let gt = mask.data()[p] as usize;
            total += -(vals[gt].exp() / denom).ln();
        }
        let expected = total / 4.0;
        assert!((loss - expected).abs() < 1e-5, "{loss} vs {expected}");
    }

    #[test]
    fn rejects_out_of_range_mask_id() {
        let logits = Tensor::zeros(&[1, 3, 1, 1]);
        let mask = IntTensor::new(vec![1, 1, 1], vec![3]).unwrap();
        assert!(cross_entropy(&logits, &mask, None).is_err());
    }

    #[test]
    fn ignore_id_pixels_are_excluded() {
        let mut logits = Tensor::zeros(&[1, 2, 1, 2]);
        logits.data_mut()[0] = 1e3; // pixel 0 strongly class 0
        let mask = IntTensor::new(vec![1, 1, 2], vec![0, 255]).unwrap();
        let loss = cross_entropy(&logits, &mask, Some(255)).unwrap();
        assert!(loss < 1e-3, "ignored pixel must not contribute: {loss}");
        let grad = cross_entropy_vjp(1.0f32, &logits, &mask, Some(255));
        assert_eq!(grad.data()[1], 0.0);
        assert_eq!(grad.data()[3], 0.0);
    }
}
