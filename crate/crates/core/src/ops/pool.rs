use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ceil-mode pooled size: windows may hang off the bottom/right edge but
/// must start inside the input.
fn pooled_dim(in_size: usize, window: usize, stride: usize) -> usize {
    if in_size == 0 {
        return 0;
    }
    let mut out = (in_size.saturating_sub(window) + stride - 1) / stride + 1;
    if (out - 1) * stride >= in_size {
        out -= 1;
    }
    out
}

/// Average pooling; boundary windows are normalized by their in-bounds
/// element count, so constant inputs stay constant.
pub fn avg_pool2d<E: Element>(input: &Tensor<E>, window: usize, stride: usize) -> Result<Tensor<E>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidParam {
            name: "avg_pool2d",
            detail: "window and stride must be positive".into(),
        });
    }
    let (n, c, h, w) = input.shape();
    let oh = pooled_dim(h, window, stride);
    let ow = pooled_dim(w, window, stride);
    if oh == 0 || ow == 0 {
        return Err(Error::EmptyOutput {
            what: "avg_pool2d",
            detail: format!("input {h}x{w}, window {window}, stride {stride}"),
        });
    }
    let mut out = Tensor::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            let plane = input.plane(ni, ci);
            let out_plane = out.plane_mut(ni, ci);
            for oy in 0..oh {
                let y0 = oy * stride;
                let y1 = (y0 + window).min(h);
                for ox in 0..ow {
                    let x0 = ox * stride;
                    let x1 = (x0 + window).min(w);
                    let mut acc = E::ZERO;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += plane[y * w + x];
                        }
                    }
                    let count = E::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    out_plane[oy * ow + ox] = acc / count;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of avg_pool2d: each output cell's gradient is spread evenly over
/// the in-bounds elements of its window.
pub fn avg_pool2d_backward<E: Element>(
    grad_out: &Tensor<E>,
    in_h: usize,
    in_w: usize,
    window: usize,
    stride: usize,
) -> Tensor<E> {
    let (n, c, oh, ow) = grad_out.shape();
    let mut grad_in = Tensor::zeros(n, c, in_h, in_w);
    for ni in 0..n {
        for ci in 0..c {
            let g_out = grad_out.plane(ni, ci);
            let g_in = grad_in.plane_mut(ni, ci);
            for oy in 0..oh {
                let y0 = oy * stride;
                let y1 = (y0 + window).min(in_h);
                for ox in 0..ow {
                    let x0 = ox * stride;
                    let x1 = (x0 + window).min(in_w);
                    let count = E::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    let share = g_out[oy * ow + ox] / count;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            g_in[y * in_w + x] += share;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Nearest-neighbor upsampling: each value replicated factor x factor.
pub fn nearest_upsample<E: Element>(input: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if factor == 0 {
        return Err(Error::InvalidParam {
            name: "nearest_upsample",
            detail: "factor must be >= 1".into(),
        });
    }
    let (n, c, h, w) = input.shape();
    let mut out = Tensor::zeros(n, c, h * factor, w * factor);
    let ow = w * factor;
    for ni in 0..n {
        for ci in 0..c {
            let src = input.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..h * factor {
                let sy = y / factor;
                for x in 0..ow {
                    dst[y * ow + x] = src[sy * w + x / factor];
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of nearest_upsample: sums each factor x factor block.
pub fn nearest_upsample_backward<E: Element>(grad_out: &Tensor<E>, factor: usize) -> Tensor<E> {
    let (n, c, oh, ow) = grad_out.shape();
    let (h, w) = (oh / factor, ow / factor);
    let mut grad_in = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let g_out = grad_out.plane(ni, ci);
            let g_in = grad_in.plane_mut(ni, ci);
            for y in 0..oh {
                for x in 0..ow {
                    g_in[(y / factor) * w + x / factor] += g_out[y * ow + x];
                }
            }
        }
    }
    grad_in
}

/// Top-left spatial crop to (h, w).
pub fn crop<E: Element>(input: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let (n, c, ih, iw) = input.shape();
    if h > ih || w > iw {
        return Err(Error::ShapeMismatch {
            what: "crop",
            left: format!("{ih}x{iw}"),
            right: format!("{h}x{w}"),
        });
    }
    let mut out = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let src = input.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[y * iw..y * iw + w]);
            }
        }
    }
    Ok(out)
}

/// Gradient of crop: zero-pad back to the uncropped size.
pub fn crop_backward<E: Element>(grad_out: &Tensor<E>, ih: usize, iw: usize) -> Tensor<E> {
    let (n, c, h, w) = grad_out.shape();
    let mut grad_in = Tensor::zeros(n, c, ih, iw);
    for ni in 0..n {
        for ci in 0..c {
            let src = grad_out.plane(ni, ci);
            let dst = grad_in.plane_mut(ni, ci);
            for y in 0..h {
                dst[y * iw..y * iw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_stays_constant() {
        let t = Tensor::<f32>::full(1, 2, 5, 7, 3.25);
        let p = avg_pool2d(&t, 2, 2).unwrap();
        assert_eq!(p.shape(), (1, 2, 3, 4));
        assert!(p.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn two_by_two_mean() {
        let t = Tensor::from_vec(1, 1, 2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let p = avg_pool2d(&t, 2, 2).unwrap();
        assert_eq!(p.shape(), (1, 1, 1, 1));
        assert_eq!(p.data()[0], 2.5);
    }

    #[test]
    fn random_pool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec(1, 3, 8, 8, data).unwrap();
        let p = avg_pool2d(&t, 2, 2).unwrap();
        for c in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut acc = 0.0f64;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += t.at(0, c, oy * 2 + dy, ox * 2 + dx) as f64;
                        }
                    }
                    let want = acc / 4.0;
                    let got = p.at(0, c, oy, ox) as f64;
                    assert!((got - want).abs() / want.abs().max(1e-6) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ceil_mode_keeps_odd_edges() {
        let t = Tensor::<f32>::full(1, 1, 5, 5, 1.0);
        let p = avg_pool2d(&t, 2, 2).unwrap();
        assert_eq!(p.shape(), (1, 1, 3, 3));
        // bottom-right window covers a single element; count-normalized mean is 1
        assert_eq!(p.at(0, 0, 2, 2), 1.0);
    }

    #[test]
    fn zero_size_output_is_an_error() {
        let t = Tensor::<f32>::zeros(1, 1, 0, 4);
        assert!(avg_pool2d(&t, 2, 2).is_err());
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let t = Tensor::from_vec(1, 1, 2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(nearest_upsample(&t, 1).unwrap().data(), t.data());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let t = Tensor::from_vec(1, 1, 1, 1, vec![7.5f32]).unwrap();
        let u = nearest_upsample(&t, 2).unwrap();
        assert_eq!(u.shape(), (1, 1, 2, 2));
        assert!(u.data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn down_then_up_preserves_constant() {
        let t = Tensor::<f32>::full(1, 1, 4, 4, 0.6);
        let d = avg_pool2d(&t, 2, 2).unwrap();
        let u = nearest_upsample(&d, 2).unwrap();
        assert_eq!(u.data(), t.data());
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec(1, 1, 5, 5, data).unwrap();
        let g_out = Tensor::from_vec(1, 1, 3, 3, (0..9).map(|i| (i as f64) * 0.3 - 1.0).collect())
            .unwrap();
        let g_in = avg_pool2d_backward(&g_out, 5, 5, 2, 2);
        let eps = 1e-6;
        for i in 0..25 {
            let mut tp = t.clone();
            tp.data_mut()[i] += eps;
            let mut tm = t.clone();
            tm.data_mut()[i] -= eps;
            let fp = avg_pool2d(&tp, 2, 2).unwrap();
            let fm = avg_pool2d(&tm, 2, 2).unwrap();
            let mut num = 0.0;
            for j in 0..9 {
                num += (fp.data()[j] - fm.data()[j]) / (2.0 * eps) * g_out.data()[j];
            }
            assert!((num - g_in.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn crop_then_pad_roundtrips_gradient_shape() {
        let t = Tensor::from_vec(1, 1, 3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let c = crop(&t, 2, 2).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 3.0, 4.0]);
        let back = crop_backward(&c, 3, 3);
        assert_eq!(back.at(0, 0, 1, 1), 4.0);
        assert_eq!(back.at(0, 0, 2, 2), 0.0);
    }
}
