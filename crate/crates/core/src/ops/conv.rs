use rayon::prelude::*;

use crate::element::Element;
use crate::error::Result;
use crate::layer::ConvLayer;
use crate::ops::gemm::{gemm_rows_into, Matrix};
use crate::tensor::Tensor;

/// Locations are processed in chunks of this many output positions; each
/// chunk packs its patch rows and runs the GEMM block independently.
const LOC_CHUNK: usize = 256;

/// Fill one im2col row for output location (oy, ox) of batch item `n`.
///
/// Row layout is (channel, ky, kx)-major, matching the flattening order of
/// the (out, in, kh, kw) weight tensor. Out-of-bounds taps read as zero.
/// This is the single source of patch semantics: the dense and guided paths
/// both call it, which is what makes them bit-comparable.
#[inline]
pub(crate) fn fill_patch_row<E: Element>(
    input: &Tensor<E>,
    layer: &ConvLayer<E>,
    n: usize,
    oy: usize,
    ox: usize,
    row: &mut [E],
) {
    let (_, c_in, in_h, in_w) = input.shape();
    debug_assert_eq!(row.len(), layer.patch_len());
    let y0 = (oy * layer.stride) as isize - layer.padding as isize;
    let x0 = (ox * layer.stride) as isize - layer.padding as isize;
    let mut i = 0;
    for c in 0..c_in {
        let plane = input.plane(n, c);
        for ky in 0..layer.kernel_h {
            let iy = y0 + ky as isize;
            if iy < 0 || iy >= in_h as isize {
                for _ in 0..layer.kernel_w {
                    row[i] = E::ZERO;
                    i += 1;
                }
                continue;
            }
            let base = iy as usize * in_w;
            for kx in 0..layer.kernel_w {
                let ix = x0 + kx as isize;
                row[i] = if ix < 0 || ix >= in_w as isize {
                    E::ZERO
                } else {
                    plane[base + ix as usize]
                };
                i += 1;
            }
        }
    }
}

/// im2col for one batch item: one row per output location in row-major
/// (y, x) order, row length in_channels * kh * kw.
pub fn im2col<E: Element>(input: &Tensor<E>, layer: &ConvLayer<E>, n: usize) -> Result<Matrix<E>> {
    let (out_h, out_w) = layer.check_input(input)?;
    let k = layer.patch_len();
    let mut m = Matrix::zeros(out_h * out_w, k);
    m.data
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(loc, row)| {
            fill_patch_row(input, layer, n, loc / out_w, loc % out_w, row);
        });
    Ok(m)
}

/// Weight tensor rearranged to a (patch_len x out_channels) matrix so the
/// conv GEMM accumulates over k with unit-stride access to both operands.
pub(crate) fn weight_matrix<E: Element>(layer: &ConvLayer<E>) -> Matrix<E> {
    let k = layer.patch_len();
    let n = layer.out_channels;
    let w = layer.weights.data();
    let mut m = Matrix::zeros(k, n);
    for oc in 0..n {
        let w_row = &w[oc * k..(oc + 1) * k];
        for (kk, &v) in w_row.iter().enumerate() {
            m.data[kk * n + oc] = v;
        }
    }
    m
}

/// Convolution evaluated at an explicit list of output locations.
///
/// The output tensor is zero everywhere except the listed locations, which
/// receive GEMM(patch row, filter matrix) + bias. The dense path lists every
/// location; the guided path lists the mask-selected ones. Work parallelizes
/// over location chunks; each chunk's rows are computed independently with
/// the fixed k accumulation order, so results are bit-identical for any
/// thread count and any location subset.
pub(crate) fn conv_at_locations<E: Element>(
    input: &Tensor<E>,
    layer: &ConvLayer<E>,
    wmat: &Matrix<E>,
    locations: &[(u32, u32)],
    out_h: usize,
    out_w: usize,
) -> Tensor<E> {
    let batch = input.batch();
    let oc = layer.out_channels;
    let k = layer.patch_len();
    let mut out = Tensor::zeros(batch, oc, out_h, out_w);

    for n in 0..batch {
        let chunk_results: Vec<Vec<E>> = locations
            .par_chunks(LOC_CHUNK)
            .map(|chunk| {
                let mut patches = vec![E::ZERO; chunk.len() * k];
                for (row, &(y, x)) in chunk.iter().enumerate() {
                    fill_patch_row(input, layer, n, y as usize, x as usize, &mut patches[row * k..(row + 1) * k]);
                }
                let mut res = vec![E::ZERO; chunk.len() * oc];
                gemm_rows_into(&patches, k, &wmat.data, oc, &mut res);
                res
            })
            .collect();

        for (chunk, res) in locations.chunks(LOC_CHUNK).zip(chunk_results) {
            for (row, &(y, x)) in chunk.iter().enumerate() {
                for (c, &b) in layer.bias.iter().enumerate() {
                    let off = out.offset(n, c, y as usize, x as usize);
                    out.data_mut()[off] = res[row * oc + c] + b;
                }
            }
        }
    }
    out
}

pub(crate) fn all_locations(out_h: usize, out_w: usize) -> Vec<(u32, u32)> {
    let mut locs = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            locs.push((y as u32, x as u32));
        }
    }
    locs
}

/// Standard cross-correlation with zero padding, via im2col + GEMM.
pub fn dense_conv2d<E: Element>(input: &Tensor<E>, layer: &ConvLayer<E>) -> Result<Tensor<E>> {
    let (out_h, out_w) = layer.check_input(input)?;
    let wmat = weight_matrix(layer);
    let locs = all_locations(out_h, out_w);
    Ok(conv_at_locations(input, layer, &wmat, &locs, out_h, out_w))
}
