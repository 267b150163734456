use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convolution parameters shared by the dense and guided execution paths.
///
/// Weights are stored as a (out_channels, in_channels, kernel_h, kernel_w)
/// tensor; convolution is cross-correlation with symmetric zero padding.
#[derive(Debug, Clone)]
pub struct ConvLayer<E: Element> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Tensor<E>,
    pub bias: Vec<E>,
}

impl<E: Element> ConvLayer<E> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        weights: Tensor<E>,
        bias: Vec<E>,
    ) -> Result<Self> {
        if weights.shape() != (out_channels, in_channels, kernel_h, kernel_w) {
            return Err(Error::ShapeMismatch {
                what: "conv weights",
                left: format!("{out_channels}x{in_channels}x{kernel_h}x{kernel_w}"),
                right: weights.shape_string(),
            });
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch {
                what: "conv bias",
                left: format!("{out_channels}"),
                right: format!("{}", bias.len()),
            });
        }
        if stride == 0 || kernel_h == 0 || kernel_w == 0 || out_channels == 0 || in_channels == 0 {
            return Err(Error::InvalidParam {
                name: "conv layer",
                detail: "kernel dims, channels and stride must be positive".into(),
            });
        }
        Ok(ConvLayer {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            bias,
        })
    }

    /// Zero-initialized layer, mostly for tests and deserialization.
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvLayer {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights: Tensor::zeros(out_channels, in_channels, kernel_h, kernel_w),
            bias: vec![E::ZERO; out_channels],
        }
    }

    /// Output spatial size: floor((in + 2*padding - kernel)/stride) + 1.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let oh = out_dim(in_h, self.kernel_h, self.stride, self.padding);
        let ow = out_dim(in_w, self.kernel_w, self.stride, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::EmptyOutput {
                what: "conv",
                detail: format!(
                    "input {}x{}, kernel {}x{}, stride {}, padding {}",
                    in_h, in_w, self.kernel_h, self.kernel_w, self.stride, self.padding
                ),
            }),
        }
    }

    pub fn check_input(&self, input: &Tensor<E>) -> Result<(usize, usize)> {
        if input.channels() != self.in_channels {
            return Err(Error::ShapeMismatch {
                what: "conv input channels",
                left: format!("layer expects {}", self.in_channels),
                right: format!("input is {}", input.shape_string()),
            });
        }
        self.output_size(input.height(), input.width())
    }

    /// Number of elements in one im2col patch row: in_channels * kh * kw.
    #[inline]
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn cast<T: Element>(&self) -> ConvLayer<T> {
        ConvLayer {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|b| T::from_f64(b.to_f64())).collect(),
        }
    }
}

fn out_dim(in_size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = in_size + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}
