//! Bilinear resize (align-corners = false) and 2x average pooling.

use crate::error::{Error, Result};
use crate::tensor::{Element, TensorBase};

/// Source coordinate and lerp weight for one output index under the
/// align-corners-false convention: src = (dst + 0.5) * (in/out) - 0.5,
/// clamped to the valid range.
fn lerp_coords(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(in_dim - 1);
            let i1 = (i0 + 1).min(in_dim - 1);
            let frac = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, frac)
        })
        .collect()
}

/// [N,C,H,W] -> [N,C,out_h,out_w]. Same-size resize is exactly the identity;
/// constant inputs stay exactly constant (lerp form: a + w*(b-a)).
pub fn bilinear_resize<T: Element>(input: &TensorBase<T>, out_h: usize, out_w: usize) -> Result<TensorBase<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("bilinear_resize: target dims must be >= 1".into()));
    }
    let ys = lerp_coords(h, out_h);
    let xs = lerp_coords(w, out_w);
    let mut out = TensorBase::zeros(&[n, c, out_h, out_w]);
    for plane_idx in 0..n * c {
        let src = &input.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut out.data_mut()[plane_idx * out_h * out_w..(plane_idx + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            let row0 = &src[y0 * w..(y0 + 1) * w];
            let row1 = &src[y1 * w..(y1 + 1) * w];
            let out_row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                out_row[ox] = top + fy * (bot - top);
            }
        }
    }
    Ok(out)
}

/// Scatter the four bilinear weights back to the source grid.
pub fn bilinear_resize_vjp<T: Element>(grad_out: &TensorBase<T>, in_h: usize, in_w: usize) -> TensorBase<T> {
    let (n, c, oh, ow) = grad_out.dims4().expect("bilinear_resize_vjp rank");
    let ys = lerp_coords(in_h, oh);
    let xs = lerp_coords(in_w, ow);
    let mut dx = TensorBase::zeros(&[n, c, in_h, in_w]);
    for plane_idx in 0..n * c {
        let g = &grad_out.data()[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        let dst = &mut dx.data_mut()[plane_idx * in_h * in_w..(plane_idx + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let wy1 = T::from_f64(fy);
            let wy0 = T::one() - wy1;
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let wx1 = T::from_f64(fx);
                let wx0 = T::one() - wx1;
                let gv = g[oy * ow + ox];
                dst[y0 * in_w + x0] = dst[y0 * in_w + x0] + gv * wy0 * wx0;
                dst[y0 * in_w + x1] = dst[y0 * in_w + x1] + gv * wy0 * wx1;
                dst[y1 * in_w + x0] = dst[y1 * in_w + x0] + gv * wy1 * wx0;
                dst[y1 * in_w + x1] = dst[y1 * in_w + x1] + gv * wy1 * wx1;
            }
        }
    }
    dx
}

/// 2x2 average pooling, stride 2, floor semantics (odd trailing row/col dropped).
pub fn avg_pool2<T: Element>(input: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (n, c, h, w) = input.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape("avg_pool2", "spatial dims >= 2", format!("{}x{}", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = TensorBase::zeros(&[n, c, oh, ow]);
    for plane_idx in 0..n * c {
        let src = &input.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut out.data_mut()[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let y = oy * 2;
                let x = ox * 2;
                dst[oy * ow + ox] =
                    (src[y * w + x] + src[y * w + x + 1] + src[(y + 1) * w + x] + src[(y + 1) * w + x + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_vjp<T: Element>(grad_out: &TensorBase<T>, in_h: usize, in_w: usize) -> TensorBase<T> {
    let (n, c, oh, ow) = grad_out.dims4().expect("avg_pool2_vjp rank");
    let quarter = T::from_f64(0.25);
    let mut dx = TensorBase::zeros(&[n, c, in_h, in_w]);
    for plane_idx in 0..n * c {
        let g = &grad_out.data()[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        let dst = &mut dx.data_mut()[plane_idx * in_h * in_w..(plane_idx + 1) * in_h * in_w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[oy * ow + ox] * quarter;
                let y = oy * 2;
                let x = ox * 2;
                dst[y * in_w + x] = dst[y * in_w + x] + gv;
                dst[y * in_w + x + 1] = dst[y * in_w + x + 1] + gv;
                dst[(y + 1) * in_w + x] = dst[(y + 1) * in_w + x] + gv;
                dst[(y + 1) * in_w + x + 1] = dst[(y + 1) * in_w + x + 1] + gv;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn same_size_resize_is_identity() {
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, -2.0, 3.5, 0.25, 7.0, -0.125]);
        let y = bilinear_resize(&x, 2, 3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::full(&[1, 2, 3, 3], 7.0);
        for (oh, ow) in [(1, 1), (2, 5), (7, 4), (9, 9)] {
            let y = bilinear_resize(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|&v| v == 7.0), "{}x{}", oh, ow);
        }
    }

    #[test]
    fn upsample_2x2_to_4x4_matches_scalar_formula() {
        // Per-output-pixel oracle evaluating the align-corners-false formula
        // directly with f64 scalars.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let src = [[0.0f64, 1.0], [2.0, 3.0]];
        for oy in 0..4 {
            for ox in 0..4 {
                let sy = ((oy as f64 + 0.5) * 0.5 - 0.5).max(0.0);
                let sx = ((ox as f64 + 0.5) * 0.5 - 0.5).max(0.0);
                let y0 = (sy.floor() as usize).min(1);
                let y1 = (y0 + 1).min(1);
                let x0 = (sx.floor() as usize).min(1);
                let x1 = (x0 + 1).min(1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let expected = (1.0 - fy) * ((1.0 - fx) * src[y0][x0] + fx * src[y0][x1])
                    + fy * ((1.0 - fx) * src[y1][x0] + fx * src[y1][x1]);
                let got = y.data()[oy * 4 + ox] as f64;
                assert!((got - expected).abs() < 1e-6, "({oy},{ox}): {got} vs {expected}");
            }
        }
    }

    #[test]
    fn avg_pool_halves_dims_and_averages() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[2.5, 6.5]);
    }
}
