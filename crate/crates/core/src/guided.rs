//! Guided kernels: convolution and nonlinearities evaluated only at
//! mask-selected output locations.
//!
//! The guided convolution packs one im2col row per mask-true output cell,
//! multiplies the shrunken matrix against the filter matrix, and scatters the
//! result back into a full-size output with zero fill in the background.
//! Because patch extraction and the GEMM accumulation order are shared with
//! the dense path, a guided output cell is bit-identical to the dense one.
//!
//! Guided layers read their input as-is. When stacked, a layer sees the
//! zero-filled background written by the layer below; outputs therefore match
//! the dense stack exactly in mask interiors and may differ near mask
//! boundaries. That boundary behavior is deliberate and tested.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::layer::ConvLayer;
use crate::mask::MaskView;
use crate::ops::{conv_at_locations, fill_patch_row, weight_matrix, Matrix};
use crate::tensor::Tensor;

fn check_view<E: Element>(
    input: &Tensor<E>,
    layer: &ConvLayer<E>,
    view: &MaskView,
) -> Result<(usize, usize)> {
    let (out_h, out_w) = layer.check_input(input)?;
    if (view.height(), view.width()) != (out_h, out_w) {
        return Err(Error::ShapeMismatch {
            what: "guided conv mask view",
            left: format!("conv output {out_h}x{out_w}"),
            right: format!("view {}x{}", view.height(), view.width()),
        });
    }
    Ok((out_h, out_w))
}

/// im2col restricted to mask-true output locations.
///
/// Returns one patch row per true cell in row-major (y, x) order, plus the
/// location list; each row equals the corresponding dense im2col row.
pub fn guided_im2col<E: Element>(
    input: &Tensor<E>,
    layer: &ConvLayer<E>,
    view: &MaskView,
    n: usize,
) -> Result<(Matrix<E>, Vec<(u32, u32)>)> {
    check_view(input, layer, view)?;
    let locations = view.true_locations();
    let k = layer.patch_len();
    let mut m = Matrix::zeros(locations.len(), k);
    for (row, &(y, x)) in locations.iter().enumerate() {
        fill_patch_row(input, layer, n, y as usize, x as usize, &mut m.data[row * k..(row + 1) * k]);
    }
    Ok((m, locations))
}

/// Convolution inside the guidance mask with zero fill in the background.
///
/// Mask-true output cells equal the dense convolution bit-exactly; background
/// cells are exactly 0.0 (no bias).
pub fn guided_conv2d<E: Element>(
    input: &Tensor<E>,
    layer: &ConvLayer<E>,
    view: &MaskView,
) -> Result<Tensor<E>> {
    let (out_h, out_w) = check_view(input, layer, view)?;
    let wmat = weight_matrix(layer);
    let locations = view.true_locations();
    Ok(conv_at_locations(input, layer, &wmat, &locations, out_h, out_w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointwiseOp<E: Element> {
    Relu,
    Sigmoid,
    /// Leaves mask-true cells unchanged and multiplies background cells by
    /// the factor; the test-time treatment used by the guided-plus mode.
    Scale(E),
}

/// Pointwise op applied only inside the mask; background is forced to zero,
/// except in scale mode where it is multiplied by the given factor.
pub fn guided_pointwise<E: Element>(
    op: PointwiseOp<E>,
    input: &Tensor<E>,
    view: &MaskView,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = input.shape();
    if (view.height(), view.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            what: "guided pointwise mask view",
            left: format!("input {h}x{w}"),
            right: format!("view {}x{}", view.height(), view.width()),
        });
    }
    let mut out = Tensor::zeros(n, c, h, w);
    let cells = view.cells();
    for ni in 0..n {
        for ci in 0..c {
            let src = input.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for i in 0..h * w {
                dst[i] = match (cells[i], op) {
                    (true, PointwiseOp::Relu) => src[i].maximum(E::ZERO),
                    (true, PointwiseOp::Sigmoid) => crate::ops::sigmoid_scalar(src[i]),
                    (true, PointwiseOp::Scale(_)) => src[i],
                    (false, PointwiseOp::Scale(f)) => src[i] * f,
                    (false, _) => E::ZERO,
                };
            }
        }
    }
    Ok(out)
}

/// Parameter and input gradients of [`guided_conv2d`].
#[derive(Debug, Clone)]
pub struct ConvGrads<E: Element> {
    pub input: Tensor<E>,
    pub weights: Tensor<E>,
    pub bias: Vec<E>,
}

/// Backward pass of the guided convolution.
///
/// Gradients are those of a dense convolution whose output is evaluated only
/// at mask-true cells and defined as zero elsewhere: background cells of
/// `grad_out` contribute nothing, and grad_bias sums over true cells only.
pub fn guided_conv2d_backward<E: Element>(
    grad_out: &Tensor<E>,
    input: &Tensor<E>,
    layer: &ConvLayer<E>,
    view: &MaskView,
) -> Result<ConvGrads<E>> {
    let (out_h, out_w) = check_view(input, layer, view)?;
    if grad_out.shape() != (input.batch(), layer.out_channels, out_h, out_w) {
        return Err(Error::ShapeMismatch {
            what: "guided conv grad_out",
            left: format!(
                "{}x{}x{}x{}",
                input.batch(),
                layer.out_channels,
                out_h,
                out_w
            ),
            right: grad_out.shape_string(),
        });
    }
    let (batch, c_in, in_h, in_w) = input.shape();
    let k = layer.patch_len();
    let oc = layer.out_channels;
    let locations = view.true_locations();
    let w_data = layer.weights.data();

    let mut grad_input = Tensor::zeros(batch, c_in, in_h, in_w);
    let mut grad_weights = Tensor::zeros(oc, c_in, layer.kernel_h, layer.kernel_w);
    let mut grad_bias = vec![E::ZERO; oc];

    let mut patch = vec![E::ZERO; k];
    let mut grad_patch = vec![E::ZERO; k];
    for n in 0..batch {
        for &(y, x) in &locations {
            let (y, x) = (y as usize, x as usize);
            fill_patch_row(input, layer, n, y, x, &mut patch);
            for v in grad_patch.iter_mut() {
                *v = E::ZERO;
            }
            for c in 0..oc {
                let g = grad_out.at(n, c, y, x);
                grad_bias[c] += g;
                let w_row = &w_data[c * k..(c + 1) * k];
                let gw_row = &mut grad_weights.data_mut()[c * k..(c + 1) * k];
                for kk in 0..k {
                    gw_row[kk] += g * patch[kk];
                    grad_patch[kk] += g * w_row[kk];
                }
            }
            scatter_patch_grad(&mut grad_input, layer, n, y, x, &grad_patch);
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

/// col2im for one location: adds the patch-row gradient into the input
/// gradient, skipping taps that fell in the padding.
fn scatter_patch_grad<E: Element>(
    grad_input: &mut Tensor<E>,
    layer: &ConvLayer<E>,
    n: usize,
    oy: usize,
    ox: usize,
    grad_patch: &[E],
) {
    let (_, c_in, in_h, in_w) = grad_input.shape();
    let y0 = (oy * layer.stride) as isize - layer.padding as isize;
    let x0 = (ox * layer.stride) as isize - layer.padding as isize;
    let mut i = 0;
    for c in 0..c_in {
        let plane = grad_input.plane_mut(n, c);
        for ky in 0..layer.kernel_h {
            let iy = y0 + ky as isize;
            if iy < 0 || iy >= in_h as isize {
                i += layer.kernel_w;
                continue;
            }
            let base = iy as usize * in_w;
            for kx in 0..layer.kernel_w {
                let ix = x0 + kx as isize;
                if ix >= 0 && ix < in_w as isize {
                    plane[base + ix as usize] += grad_patch[i];
                }
                i += 1;
            }
        }
    }
}

/// Multiply-accumulate count for one batch item of a convolution evaluated
/// at `computed_locations` output cells.
pub fn flop_count_at<E: Element>(layer: &ConvLayer<E>, computed_locations: usize) -> u64 {
    computed_locations as u64
        * layer.out_channels as u64
        * layer.in_channels as u64
        * layer.kernel_h as u64
        * layer.kernel_w as u64
}

/// MAC count for a dense or guided convolution over the given output grid.
pub fn flop_count<E: Element>(
    layer: &ConvLayer<E>,
    out_h: usize,
    out_w: usize,
    view: Option<&MaskView>,
) -> u64 {
    let locations = match view {
        Some(v) => v.true_count(),
        None => out_h * out_w,
    };
    flop_count_at(layer, locations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{dense_conv2d, im2col, relu};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, oc: usize, ic: usize, k: usize, stride: usize, padding: usize) -> ConvLayer<f32> {
        let weights = Tensor::from_vec(oc, ic, k, k, (0..oc * ic * k * k).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let bias = (0..oc).map(|_| rng.gen_range(-0.5..0.5)).collect();
        ConvLayer::new(oc, ic, k, k, stride, padding, weights, bias).unwrap()
    }

    fn random_view(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> MaskView {
        MaskView::from_cells(h, w, (0..h * w).map(|_| rng.gen_bool(density)).collect())
    }

    #[test]
    fn full_view_im2col_equals_dense_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let input = random_tensor(&mut rng, 1, 3, 7, 9);
        let layer = random_layer(&mut rng, 2, 3, 3, 1, 1);
        let dense = im2col(&input, &layer, 0).unwrap();
        let (got, locs) = guided_im2col(&input, &layer, &MaskView::full(7, 9), 0).unwrap();
        assert_eq!(got, dense);
        assert_eq!(locs.len(), 63);
    }

    #[test]
    fn empty_view_yields_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let input = random_tensor(&mut rng, 1, 2, 5, 5);
        let layer = random_layer(&mut rng, 2, 2, 3, 1, 1);
        let (m, locs) = guided_im2col(&input, &layer, &MaskView::empty(5, 5), 0).unwrap();
        assert_eq!(m.rows, 0);
        assert!(locs.is_empty());
    }

    #[test]
    fn guided_rows_match_dense_rows_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let input = random_tensor(&mut rng, 1, 3, 8, 6);
        let layer = random_layer(&mut rng, 2, 3, 3, 1, 1);
        let view = random_view(&mut rng, 8, 6, 0.3);
        let dense = im2col(&input, &layer, 0).unwrap();
        let (got, locs) = guided_im2col(&input, &layer, &view, 0).unwrap();
        for (row, &(y, x)) in locs.iter().enumerate() {
            let dense_row = dense.row(y as usize * 6 + x as usize);
            assert_eq!(got.row(row), dense_row, "row for ({y},{x})");
        }
    }

    #[test]
    fn full_view_conv_is_bit_identical_to_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let input = random_tensor(&mut rng, 2, 3, 9, 9);
        let layer = random_layer(&mut rng, 4, 3, 3, 2, 1);
        let (oh, ow) = layer.output_size(9, 9).unwrap();
        let dense = dense_conv2d(&input, &layer).unwrap();
        let guided = guided_conv2d(&input, &layer, &MaskView::full(oh, ow)).unwrap();
        assert_eq!(dense.data(), guided.data());
    }

    #[test]
    fn empty_view_conv_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let input = random_tensor(&mut rng, 1, 2, 6, 6);
        let mut layer = random_layer(&mut rng, 3, 2, 3, 1, 1);
        layer.bias = vec![1.0, -2.0, 3.0]; // bias must NOT leak into background
        let out = guided_conv2d(&input, &layer, &MaskView::empty(6, 6)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_cells_equal_dense_background_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..20 {
            let h = rng.gen_range(4..10);
            let w = rng.gen_range(4..10);
            let input = random_tensor(&mut rng, 1, 3, h, w);
            let layer = random_layer(&mut rng, 2, 3, 3, 1, 1);
            let view = random_view(&mut rng, h, w, 0.4);
            let dense = dense_conv2d(&input, &layer).unwrap();
            let guided = guided_conv2d(&input, &layer, &view).unwrap();
            for c in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        if view.get(y, x) {
                            assert_eq!(guided.at(0, c, y, x), dense.at(0, c, y, x));
                        } else {
                            assert_eq!(guided.at(0, c, y, x), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn guided_pointwise_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let input = random_tensor(&mut rng, 1, 2, 4, 4);
        let view = random_view(&mut rng, 4, 4, 0.5);

        let full = guided_pointwise(PointwiseOp::Relu, &input, &MaskView::full(4, 4)).unwrap();
        assert_eq!(full.data(), relu(&input).data());

        let none = guided_pointwise(PointwiseOp::Relu, &input, &MaskView::empty(4, 4)).unwrap();
        assert!(none.data().iter().all(|&v| v == 0.0));

        let mixed = guided_pointwise(PointwiseOp::Relu, &input, &view).unwrap();
        let squashed = guided_pointwise(PointwiseOp::Sigmoid, &input, &view).unwrap();
        let scaled = guided_pointwise(PointwiseOp::Scale(0.25), &input, &view).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let v = input.at(0, c, y, x);
                    if view.get(y, x) {
                        assert_eq!(mixed.at(0, c, y, x), v.max(0.0));
                        assert_eq!(squashed.at(0, c, y, x), crate::ops::sigmoid_scalar(v));
                        assert_eq!(scaled.at(0, c, y, x), v);
                    } else {
                        assert_eq!(mixed.at(0, c, y, x), 0.0);
                        assert_eq!(squashed.at(0, c, y, x), 0.0);
                        assert_eq!(scaled.at(0, c, y, x), v * 0.25);
                    }
                }
            }
        }
    }

    #[test]
    fn view_shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let input = random_tensor(&mut rng, 1, 2, 6, 6);
        let layer = random_layer(&mut rng, 2, 2, 3, 2, 1);
        // conv output is 3x3, view is 6x6
        assert!(guided_conv2d(&input, &layer, &MaskView::full(6, 6)).is_err());
    }

    #[test]
    fn backward_full_view_matches_dense_finite_differences() {
        backward_fd_case(1.0, 60);
    }

    #[test]
    fn backward_partial_view_matches_finite_differences() {
        backward_fd_case(0.4, 61);
    }

    fn backward_fd_case(density: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input: Tensor<f64> =
            Tensor::from_vec(1, 2, 5, 5, (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let weights =
            Tensor::from_vec(2, 2, 3, 3, (0..36).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let layer = ConvLayer::new(2, 2, 3, 3, 1, 1, weights, vec![0.1, -0.2]).unwrap();
        let view = if density >= 1.0 {
            MaskView::full(5, 5)
        } else {
            MaskView::from_cells(5, 5, (0..25).map(|_| rng.gen_bool(density)).collect())
        };
        let grad_out = Tensor::from_vec(
            1,
            2,
            5,
            5,
            (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // loss = sum(grad_out .* forward)
        let loss = |input: &Tensor<f64>, layer: &ConvLayer<f64>| -> f64 {
            let out = guided_conv2d(input, layer, &view).unwrap();
            out.data().iter().zip(grad_out.data()).map(|(&o, &g)| o * g).sum()
        };
        let grads = guided_conv2d_backward(&grad_out, &input, &layer, &view).unwrap();
        let eps = 1e-6;
        // input gradient
        for i in (0..50).step_by(7) {
            let mut ip = input.clone();
            ip.data_mut()[i] += eps;
            let mut im = input.clone();
            im.data_mut()[i] -= eps;
            let num = (loss(&ip, &layer) - loss(&im, &layer)) / (2.0 * eps);
            let ana = grads.input.data()[i];
            assert!((num - ana).abs() / ana.abs().max(1e-6) < 1e-5, "input[{i}]: {num} vs {ana}");
        }
        // weight gradient
        for i in (0..36).step_by(5) {
            let mut lp = layer.clone();
            lp.weights.data_mut()[i] += eps;
            let mut lm = layer.clone();
            lm.weights.data_mut()[i] -= eps;
            let num = (loss(&input, &lp) - loss(&input, &lm)) / (2.0 * eps);
            let ana = grads.weights.data()[i];
            assert!((num - ana).abs() / ana.abs().max(1e-6) < 1e-5, "weight[{i}]: {num} vs {ana}");
        }
        // bias gradient
        for c in 0..2 {
            let mut lp = layer.clone();
            lp.bias[c] += eps;
            let mut lm = layer.clone();
            lm.bias[c] -= eps;
            let num = (loss(&input, &lp) - loss(&input, &lm)) / (2.0 * eps);
            let ana = grads.bias[c];
            assert!((num - ana).abs() / ana.abs().max(1e-6) < 1e-5, "bias[{c}]: {num} vs {ana}");
        }
    }

    #[test]
    fn backward_empty_view_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let input = random_tensor(&mut rng, 1, 2, 5, 5);
        let layer = random_layer(&mut rng, 2, 2, 3, 1, 1);
        let grad_out = random_tensor(&mut rng, 1, 2, 5, 5);
        let grads = guided_conv2d_backward(&grad_out, &input, &layer, &MaskView::empty(5, 5)).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flop_ratio_equals_area_ratio_exactly() {
        let layer = ConvLayer::<f32>::zeros(8, 4, 3, 3, 1, 1);
        let dense = flop_count(&layer, 16, 16, None);
        let full = flop_count(&layer, 16, 16, Some(&MaskView::full(16, 16)));
        assert_eq!(dense, full);
        let mut cells = vec![false; 256];
        for c in cells.iter_mut().take(64) {
            *c = true;
        }
        let quarter = MaskView::from_cells(16, 16, cells);
        let guided = flop_count(&layer, 16, 16, Some(&quarter));
        assert_eq!(guided * 4, dense); // ratio exactly 0.25
        let empty = flop_count(&layer, 16, 16, Some(&MaskView::empty(16, 16)));
        assert_eq!(empty, 0);
    }

    #[test]
    fn guided_conv_is_bit_identical_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let input = random_tensor(&mut rng, 1, 4, 24, 24);
        let layer = random_layer(&mut rng, 4, 4, 3, 1, 1);
        let view = random_view(&mut rng, 24, 24, 0.4);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let serial = pool1.install(|| guided_conv2d(&input, &layer, &view).unwrap());
        let parallel = pool8.install(|| guided_conv2d(&input, &layer, &view).unwrap());
        assert_eq!(serial.data(), parallel.data());
    }

    #[test]
    fn stacked_interior_matches_dense_stack() {
        // three guided 3x3 stride-1 convs + relu; cells more than 3 cells
        // away from any false cell must match the dense stack
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for trial in 0..5 {
            let (h, w) = (14, 14);
            let input = random_tensor(&mut rng, 1, 2, h, w);
            let layers: Vec<_> = (0..3).map(|_| random_layer(&mut rng, 2, 2, 3, 1, 1)).collect();
            let mut cells = vec![false; h * w];
            // one random true rectangle keeps an interior
            let y0 = rng.gen_range(0..3);
            let x0 = rng.gen_range(0..3);
            for y in y0..h {
                for x in x0..w {
                    cells[y * w + x] = true;
                }
            }
            let view = MaskView::from_cells(h, w, cells);

            let mut dense = input.clone();
            let mut guided = input.clone();
            for layer in &layers {
                dense = relu(&dense_conv2d(&dense, layer).unwrap());
                guided = guided_conv2d(&guided, layer, &view).unwrap();
                guided = guided_pointwise(PointwiseOp::Relu, &guided, &view).unwrap();
            }
            // Chebyshev distance to the nearest false cell
            let dist = |y: usize, x: usize| -> usize {
                let mut best = usize::MAX;
                for yy in 0..h {
                    for xx in 0..w {
                        if !view.get(yy, xx) {
                            let d = (yy as isize - y as isize).abs().max((xx as isize - x as isize).abs());
                            best = best.min(d as usize);
                        }
                    }
                }
                best
            };
            for c in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        if dist(y, x) > 3 {
                            let d = dense.at(0, c, y, x);
                            let g = guided.at(0, c, y, x);
                            let rel = (d - g).abs() / d.abs().max(1e-3);
                            assert!(rel < 1e-4, "trial {trial} ({c},{y},{x}): dense {d} vs guided {g}");
                        }
                    }
                }
            }
        }
    }
}
