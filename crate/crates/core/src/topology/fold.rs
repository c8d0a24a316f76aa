//! Space-to-depth folding of strided convolutions.
//!
//! A stride-`f` convolution over `C` channels is rewritten as a stride-1
//! convolution over `C*f*f` phase sub-maps with a `ceil(R/f) x ceil(S/f)`
//! filter. Folded channel `(c*f + a)*f + b` holds padded-input pixels at rows
//! `a mod f` and columns `b mod f` of channel `c`; filter taps beyond the
//! original `R x S` window are zero.

use serde::{Deserialize, Serialize};

use super::{ConvSpec, Dims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub factor: usize,
    /// The convolution before folding.
    pub original: ConvSpec,
    /// Unpadded input shape before folding.
    pub input: Dims,
    /// Input shape after folding (already padded).
    pub folded_input: Dims,
    pub output_h: usize,
    pub output_w: usize,
}

impl FoldPlan {
    pub fn is_identity(&self) -> bool {
        self.factor == 1
    }

    pub fn folded_kernel(&self) -> (usize, usize) {
        (
            self.original.kernel_h.div_ceil(self.factor),
            self.original.kernel_w.div_ceil(self.factor),
        )
    }

    /// The equivalent stride-1 convolution.
    pub fn folded_conv(&self) -> ConvSpec {
        if self.is_identity() {
            return self.original;
        }
        let (rf, sf) = self.folded_kernel();
        ConvSpec {
            in_channels: self.folded_input.c,
            kernel_h: rf,
            kernel_w: sf,
            stride: 1,
            pad: 0,
            ..self.original
        }
    }

    /// Filter taps per input channel that are zero fill rather than weights.
    pub fn padded_taps_per_channel(&self) -> usize {
        let (rf, sf) = self.folded_kernel();
        rf * sf * self.factor * self.factor - self.original.kernel_h * self.original.kernel_w
    }

    /// Rearranges a `C x H x W` input into the folded `C*f*f x H' x W'` layout,
    /// applying the original zero padding.
    pub fn fold_input(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = input.chw()?;
        if Dims::new(c, h, w) != self.input {
            return Err(Error::ShapeMismatch(format!(
                "fold plan expects input {:?}, got {:?}",
                self.input,
                input.shape()
            )));
        }
        if self.is_identity() {
            return Ok(input.clone());
        }
        let f = self.factor;
        let pad = self.original.pad as isize;
        let Dims { h: fh, w: fw, .. } = self.folded_input;
        let src = input.data();
        let mut out = Tensor::zeros(vec![self.folded_input.c, fh, fw]);
        let dst = out.data_mut();
        for ci in 0..c {
            for a in 0..f {
                for b in 0..f {
                    let fc = (ci * f + a) * f + b;
                    for i in 0..fh {
                        let y = (i * f + a) as isize - pad;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..fw {
                            let x = (j * f + b) as isize - pad;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            dst[(fc * fh + i) * fw + j] = src[(ci * h + y as usize) * w + x as usize];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Rearranges `K x C/g x R x S` filters into `K x (C/g)*f*f x R' x S'`.
    pub fn fold_filters(&self, filters: &Tensor) -> Result<Tensor> {
        let o = &self.original;
        let cg = o.channels_per_group();
        let expected = [o.out_channels, cg, o.kernel_h, o.kernel_w];
        if filters.shape() != expected {
            return Err(Error::ShapeMismatch(format!(
                "fold plan expects filters {expected:?}, got {:?}",
                filters.shape()
            )));
        }
        if self.is_identity() {
            return Ok(filters.clone());
        }
        let f = self.factor;
        let (rf, sf) = self.folded_kernel();
        let cgf = cg * f * f;
        let src = filters.data();
        let mut out = Tensor::zeros(vec![o.out_channels, cgf, rf, sf]);
        let dst = out.data_mut();
        for k in 0..o.out_channels {
            for ci in 0..cg {
                for r in 0..o.kernel_h {
                    for s in 0..o.kernel_w {
                        let (u, a) = (r / f, r % f);
                        let (v, b) = (s / f, s % f);
                        let fc = (ci * f + a) * f + b;
                        dst[((k * cgf + fc) * rf + u) * sf + v] =
                            src[((k * cg + ci) * o.kernel_h + r) * o.kernel_w + s];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Rewrites a strided convolution as an equivalent stride-1 convolution.
///
/// A stride-1 layer yields an identity plan and the layer unchanged.
pub fn fold_strided_conv(layer: &ConvSpec, input: Dims) -> Result<(ConvSpec, FoldPlan)> {
    if layer.in_channels != input.c {
        return Err(Error::ShapeMismatch(format!(
            "conv declares C={} but input has {} channels",
            layer.in_channels, input.c
        )));
    }
    let (p, q) = layer.output_hw(input.h, input.w).ok_or_else(|| {
        Error::ShapeMismatch(format!("filter does not fit input {input:?}"))
    })?;
    let f = layer.stride;
    let folded_input = if f == 1 {
        input
    } else {
        let rf = layer.kernel_h.div_ceil(f);
        let sf = layer.kernel_w.div_ceil(f);
        // Rows past f*(P + R' - 1) never reach an output; short inputs are
        // zero-extended up to that multiple of f.
        Dims::new(input.c * f * f, p + rf - 1, q + sf - 1)
    };
    let plan = FoldPlan {
        factor: f,
        original: *layer,
        input,
        folded_input,
        output_h: p,
        output_w: q,
    };
    Ok((plan.folded_conv(), plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alexnet_conv1() -> ConvSpec {
        ConvSpec {
            in_channels: 3,
            out_channels: 96,
            kernel_h: 11,
            kernel_w: 11,
            stride: 4,
            pad: 0,
            groups: 1,
            relu: false,
        }
    }

    #[test]
    fn alexnet_conv1_folds_to_48_channels() {
        let (c, plan) = fold_strided_conv(&alexnet_conv1(), Dims::new(3, 227, 227)).unwrap();
        assert_eq!(c.in_channels, 48);
        assert_eq!((c.kernel_h, c.kernel_w, c.stride, c.pad), (3, 3, 1, 0));
        assert_eq!(plan.folded_input, Dims::new(48, 57, 57));
        assert_eq!(c.output_hw(57, 57), Some((55, 55)));
        assert_eq!(plan.padded_taps_per_channel(), 144 - 121);
    }

    #[test]
    fn stride_one_is_identity() {
        let mut c = alexnet_conv1();
        c.stride = 1;
        let (folded, plan) = fold_strided_conv(&c, Dims::new(3, 20, 20)).unwrap();
        assert!(plan.is_identity());
        assert_eq!(folded, c);
    }
}
