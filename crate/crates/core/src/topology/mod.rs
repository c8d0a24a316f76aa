//! CNN topologies: layer descriptions, shape inference, the built-in AlexNet
//! and the JSON file format.

mod alexnet;
mod fold;
mod json;
mod lower;

pub use alexnet::builtin_alexnet;
pub use fold::{fold_strided_conv, FoldPlan};
pub use lower::{lower, ConvStage, DevicePlan, FcStage, Stage};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(C, H, W)` feature-map shape. Flat vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Dims { c, h, w }
    }

    pub const fn flat(n: usize) -> Self {
        Dims { c: n, h: 1, w: 1 }
    }

    pub const fn volume(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn channels_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn filters_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Number of filter weights, `K * (C/g) * R * S`.
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.channels_per_group() * self.kernel_h * self.kernel_w
    }

    /// Output spatial size for an `h x w` input, `None` if the window does
    /// not fit in the padded input.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if self.kernel_h > ph || self.kernel_w > pw || self.stride == 0 {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcSpec {
    pub n_in: usize,
    pub n_out: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.window > h || self.window > w || self.stride == 0 || self.window == 0 {
            return None;
        }
        Some((
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ))
    }
}

/// Local response normalization across channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl NormSpec {
    pub const ALEXNET: NormSpec = NormSpec {
        size: 5,
        alpha: 1e-4,
        beta: 0.75,
        k: 2.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvSpec),
    FullyConnected(FcSpec),
    MaxPool(PoolSpec),
    Norm(NormSpec),
    Relu,
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::FullyConnected(_) => "fc",
            LayerSpec::MaxPool(_) => "max_pool",
            LayerSpec::Norm(_) => "norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Whether the layer carries weights and a bias.
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv(_) | LayerSpec::FullyConnected(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Layer {
            name: name.into(),
            spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub name: String,
    pub description: Option<String>,
    pub input: Dims,
    pub layers: Vec<Layer>,
}

/// Per-layer shapes and useful multiply-accumulate counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub input: Dims,
    pub output: Dims,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeTable {
    pub layers: Vec<LayerShape>,
}

impl ShapeTable {
    pub fn total_conv_macs(&self, t: &Topology) -> u64 {
        t.layers
            .iter()
            .zip(&self.layers)
            .filter(|(l, _)| matches!(l.spec, LayerSpec::Conv(_)))
            .map(|(_, s)| s.macs)
            .sum()
    }
}

impl Topology {
    /// Builds a topology and checks that it is well formed.
    pub fn new(name: impl Into<String>, input: Dims, layers: Vec<Layer>) -> Result<Self> {
        let t = Topology {
            name: name.into(),
            description: None,
            input,
            layers,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        infer_shapes(self).map(|_| ())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn to_json(&self) -> String {
        json::to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t = json::from_json(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<Topology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Topology::from_json(&text)
}

/// Infers every layer's input and output shape.
pub fn infer_shapes(t: &Topology) -> Result<ShapeTable> {
    if t.layers.is_empty() {
        return Err(Error::Validation {
            layer: None,
            msg: "no layers".into(),
        });
    }
    if t.input.volume() == 0 {
        return Err(Error::Validation {
            layer: None,
            msg: format!("input shape {:?} is empty", t.input),
        });
    }
    let mut cur = t.input;
    let mut out = Vec::with_capacity(t.layers.len());
    let last = t.layers.len() - 1;
    for (i, layer) in t.layers.iter().enumerate() {
        let input = cur;
        let (output, macs) = match &layer.spec {
            LayerSpec::Conv(c) => {
                if c.kernel_h == 0 || c.kernel_w == 0 || c.stride == 0 || c.groups == 0 {
                    return Err(Error::validation(
                        i,
                        "conv filter size, stride and groups must be positive",
                    ));
                }
                if c.in_channels != input.c {
                    return Err(Error::validation(
                        i,
                        format!(
                            "conv '{}' declares C={} but its input has {} channels",
                            layer.name, c.in_channels, input.c
                        ),
                    ));
                }
                if c.out_channels == 0
                    || c.in_channels % c.groups != 0
                    || c.out_channels % c.groups != 0
                {
                    return Err(Error::validation(
                        i,
                        format!(
                            "conv '{}': C={} and K={} must be positive multiples of groups={}",
                            layer.name, c.in_channels, c.out_channels, c.groups
                        ),
                    ));
                }
                let (p, q) = c.output_hw(input.h, input.w).ok_or_else(|| Error::Shape {
                    layer: i,
                    msg: format!(
                        "{}x{} filter does not fit {}x{} input with pad {}",
                        c.kernel_h, c.kernel_w, input.h, input.w, c.pad
                    ),
                })?;
                let out = Dims::new(c.out_channels, p, q);
                let macs = (out.volume() * c.channels_per_group() * c.kernel_h * c.kernel_w) as u64;
                (out, macs)
            }
            LayerSpec::FullyConnected(fc) => {
                if fc.n_in == 0 || fc.n_out == 0 {
                    return Err(Error::validation(i, "fc n_in and n_out must be positive"));
                }
                if fc.n_in != input.volume() {
                    return Err(Error::validation(
                        i,
                        format!(
                            "fc '{}' declares n_in={} but its input has {} elements",
                            layer.name,
                            fc.n_in,
                            input.volume()
                        ),
                    ));
                }
                (Dims::flat(fc.n_out), (fc.n_in * fc.n_out) as u64)
            }
            LayerSpec::MaxPool(p) => {
                let (h, w) = p.output_hw(input.h, input.w).ok_or_else(|| Error::Shape {
                    layer: i,
                    msg: format!(
                        "{}x{}/{} pool does not fit {}x{} input",
                        p.window, p.window, p.stride, input.h, input.w
                    ),
                })?;
                (Dims::new(input.c, h, w), 0)
            }
            LayerSpec::Norm(n) => {
                if n.size % 2 == 0 {
                    return Err(Error::validation(i, "norm window size must be odd"));
                }
                if !(n.alpha.is_finite() && n.beta.is_finite() && n.k.is_finite()) {
                    return Err(Error::validation(i, "norm constants must be finite"));
                }
                (input, 0)
            }
            LayerSpec::Relu => (input, 0),
            LayerSpec::Softmax => {
                if i != last {
                    return Err(Error::validation(i, "softmax must be the last layer"));
                }
                (input, 0)
            }
        };
        out.push(LayerShape {
            input,
            output,
            macs,
        });
        cur = output;
    }
    Ok(ShapeTable { layers: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(c: usize, k: usize, r: usize, stride: usize, pad: usize, groups: usize) -> LayerSpec {
        LayerSpec::Conv(ConvSpec {
            in_channels: c,
            out_channels: k,
            kernel_h: r,
            kernel_w: r,
            stride,
            pad,
            groups,
            relu: false,
        })
    }

    #[test]
    fn identity_conv_keeps_spatial_dims() {
        let t = Topology::new("id", Dims::new(4, 7, 9), vec![Layer::new("c", conv(4, 2, 1, 1, 0, 1))])
            .unwrap();
        let s = infer_shapes(&t).unwrap();
        assert_eq!(s.layers[0].output, Dims::new(2, 7, 9));
        assert_eq!(s.layers[0].macs, 2 * 7 * 9 * 4);
    }

    #[test]
    fn pool_13_to_6() {
        let t = Topology::new(
            "p",
            Dims::new(3, 13, 13),
            vec![Layer::new(
                "p",
                LayerSpec::MaxPool(PoolSpec {
                    window: 3,
                    stride: 2,
                }),
            )],
        )
        .unwrap();
        assert_eq!(infer_shapes(&t).unwrap().layers[0].output, Dims::new(3, 6, 6));
    }

    #[test]
    fn empty_layer_list() {
        let err = Topology::new("e", Dims::new(1, 1, 1), vec![]).unwrap_err();
        assert!(err.to_string().contains("no layers"), "{err}");
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let err = Topology::new(
            "m",
            Dims::new(3, 32, 32),
            vec![
                Layer::new("a", conv(3, 96, 3, 1, 1, 1)),
                Layer::new("b", conv(3, 8, 3, 1, 1, 1)),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { layer: Some(1), .. }), "{err}");
    }

    #[test]
    fn window_larger_than_padded_input() {
        let err = Topology::new("w", Dims::new(1, 4, 4), vec![Layer::new("a", conv(1, 1, 7, 1, 1, 1))])
            .unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 0, .. }), "{err}");
    }

    #[test]
    fn groups_must_divide_channels() {
        let err = Topology::new("g", Dims::new(3, 8, 8), vec![Layer::new("a", conv(3, 4, 3, 1, 1, 2))])
            .unwrap_err();
        assert!(matches!(err, Error::Validation { layer: Some(0), .. }));
    }

    #[test]
    fn softmax_must_be_last() {
        let err = Topology::new(
            "s",
            Dims::flat(10),
            vec![Layer::new("s", LayerSpec::Softmax), Layer::new("r", LayerSpec::Relu)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { layer: Some(0), .. }));
    }

    #[test]
    fn fc_input_volume_checked() {
        let err = Topology::new(
            "f",
            Dims::new(2, 3, 3),
            vec![Layer::new(
                "fc",
                LayerSpec::FullyConnected(FcSpec {
                    n_in: 17,
                    n_out: 4,
                    relu: false,
                }),
            )],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { layer: Some(0), .. }));
    }
}
