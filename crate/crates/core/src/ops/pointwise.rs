use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(|v| v.maximum(E::ZERO))
}

/// Gradient of relu given the cached forward input.
pub fn relu_backward<E: Element>(grad_out: &Tensor<E>, input: &Tensor<E>) -> Tensor<E> {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= E::ZERO {
            *gv = E::ZERO;
        }
    }
    g
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

pub fn sigmoid<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(sigmoid_scalar)
}

pub fn elementwise_add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            what: "elementwise_add",
            left: a.shape_string(),
            right: b.shape_string(),
        });
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// L2-normalize the channel vector at each (n, y, x) location:
/// v / sqrt(sum(v^2) + epsilon).
pub fn l2_normalize_channels<E: Element>(input: &Tensor<E>, epsilon: E) -> Result<Tensor<E>> {
    if epsilon <= E::ZERO {
        return Err(Error::InvalidParam {
            name: "l2_normalize epsilon",
            detail: format!("must be > 0, got {:?}", epsilon),
        });
    }
    let (n, c, h, w) = input.shape();
    let mut out = Tensor::zeros(n, c, h, w);
    let hw = h * w;
    for ni in 0..n {
        for i in 0..hw {
            let mut sum_sq = E::ZERO;
            for ci in 0..c {
                let v = input.plane(ni, ci)[i];
                sum_sq += v * v;
            }
            let inv = E::ONE / (sum_sq + epsilon).sqrt();
            for ci in 0..c {
                let v = input.plane(ni, ci)[i];
                out.plane_mut(ni, ci)[i] = v * inv;
            }
        }
    }
    Ok(out)
}

/// Gradient of l2_normalize_channels given the cached forward input.
pub fn l2_normalize_channels_backward<E: Element>(
    grad_out: &Tensor<E>,
    input: &Tensor<E>,
    epsilon: E,
) -> Tensor<E> {
    let (n, c, h, w) = input.shape();
    let mut grad_in = Tensor::zeros(n, c, h, w);
    let hw = h * w;
    for ni in 0..n {
        for i in 0..hw {
            let mut sum_sq = E::ZERO;
            let mut dot = E::ZERO;
            for ci in 0..c {
                let x = input.plane(ni, ci)[i];
                let g = grad_out.plane(ni, ci)[i];
                sum_sq += x * x;
                dot += x * g;
            }
            let s = sum_sq + epsilon;
            let inv = E::ONE / s.sqrt();
            let inv3 = inv / s;
            for ci in 0..c {
                let x = input.plane(ni, ci)[i];
                let g = grad_out.plane(ni, ci)[i];
                grad_in.plane_mut(ni, ci)[i] = g * inv - x * dot * inv3;
            }
        }
    }
    grad_in
}
