//! Topology JSON schema.
//!
//! ```json
//! { "name": "tiny", "input": [3, 32, 32],
//!   "layers": [ {"kind": "conv", "K": 16, "R": 3, "S": 3, "stride": 1, "pad": 1},
//!               {"kind": "relu"}, {"kind": "fc", "n_out": 10}, {"kind": "softmax"} ] }
//! ```
//!
//! `C` (conv) and `n_in` (fc) may be omitted and are then inferred; when
//! present they are checked. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use super::{ConvSpec, Dims, FcSpec, Layer, LayerSpec, NormSpec, PoolSpec, Topology};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    input: [usize; 3],
    layers: Vec<RawLayer>,
}

fn default_one() -> usize {
    1
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawLayer {
    Conv {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
        c: Option<usize>,
        #[serde(rename = "K")]
        k: usize,
        #[serde(rename = "R")]
        r: usize,
        #[serde(rename = "S")]
        s: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "default_one")]
        groups: usize,
        #[serde(default)]
        relu: bool,
    },
    Fc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_in: Option<usize>,
        n_out: usize,
        #[serde(default)]
        relu: bool,
    },
    MaxPool {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        window: usize,
        stride: usize,
    },
    Norm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default = "norm_size")]
        size: usize,
        #[serde(default = "norm_alpha")]
        alpha: f64,
        #[serde(default = "norm_beta")]
        beta: f64,
        #[serde(default = "norm_k")]
        k: f64,
    },
    Relu {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Softmax {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
}

fn norm_size() -> usize {
    NormSpec::ALEXNET.size
}
fn norm_alpha() -> f64 {
    NormSpec::ALEXNET.alpha
}
fn norm_beta() -> f64 {
    NormSpec::ALEXNET.beta
}
fn norm_k() -> f64 {
    NormSpec::ALEXNET.k
}

pub(super) fn to_json(t: &Topology) -> String {
    let layers = t
        .layers
        .iter()
        .map(|l| {
            let name = Some(l.name.clone());
            match l.spec {
                LayerSpec::Conv(c) => RawLayer::Conv {
                    name,
                    c: Some(c.in_channels),
                    k: c.out_channels,
                    r: c.kernel_h,
                    s: c.kernel_w,
                    stride: c.stride,
                    pad: c.pad,
                    groups: c.groups,
                    relu: c.relu,
                },
                LayerSpec::FullyConnected(f) => RawLayer::Fc {
                    name,
                    n_in: Some(f.n_in),
                    n_out: f.n_out,
                    relu: f.relu,
                },
                LayerSpec::MaxPool(p) => RawLayer::MaxPool {
                    name,
                    window: p.window,
                    stride: p.stride,
                },
                LayerSpec::Norm(n) => RawLayer::Norm {
                    name,
                    size: n.size,
                    alpha: n.alpha,
                    beta: n.beta,
                    k: n.k,
                },
                LayerSpec::Relu => RawLayer::Relu { name },
                LayerSpec::Softmax => RawLayer::Softmax { name },
            }
        })
        .collect();
    let raw = RawTopology {
        name: t.name.clone(),
        description: t.description.clone(),
        input: [t.input.c, t.input.h, t.input.w],
        layers,
    };
    let mut s = serde_json::to_string_pretty(&raw).expect("topology serializes");
    s.push('\n');
    s
}

/// Parses and resolves inferred fields. Validation of the result is left to
/// the caller.
pub(super) fn from_json(text: &str) -> Result<Topology> {
    let raw: RawTopology = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let input = Dims::new(raw.input[0], raw.input[1], raw.input[2]);
    let mut layers = Vec::with_capacity(raw.layers.len());
    // Running shape, used only to fill in omitted C / n_in. Full checking
    // happens in `infer_shapes`.
    let mut cur = Some(input);
    for (i, rl) in raw.layers.into_iter().enumerate() {
        let (name, spec) = match rl {
            RawLayer::Conv {
                name,
                c,
                k,
                r,
                s,
                stride,
                pad,
                groups,
                relu,
            } => {
                let in_channels = match (c, cur) {
                    (Some(c), _) => c,
                    (None, Some(d)) => d.c,
                    (None, None) => {
                        return Err(Error::validation(i, "cannot infer conv input channels"))
                    }
                };
                let spec = ConvSpec {
                    in_channels,
                    out_channels: k,
                    kernel_h: r,
                    kernel_w: s,
                    stride,
                    pad,
                    groups,
                    relu,
                };
                cur = cur.and_then(|d| spec.output_hw(d.h, d.w)).map(|(p, q)| Dims::new(k, p, q));
                (name, LayerSpec::Conv(spec))
            }
            RawLayer::Fc {
                name,
                n_in,
                n_out,
                relu,
            } => {
                let n_in = match (n_in, cur) {
                    (Some(n), _) => n,
                    (None, Some(d)) => d.volume(),
                    (None, None) => return Err(Error::validation(i, "cannot infer fc n_in")),
                };
                cur = Some(Dims::flat(n_out));
                (name, LayerSpec::FullyConnected(FcSpec { n_in, n_out, relu }))
            }
            RawLayer::MaxPool {
                name,
                window,
                stride,
            } => {
                let p = PoolSpec { window, stride };
                cur = cur.and_then(|d| p.output_hw(d.h, d.w).map(|(h, w)| Dims::new(d.c, h, w)));
                (name, LayerSpec::MaxPool(p))
            }
            RawLayer::Norm {
                name,
                size,
                alpha,
                beta,
                k,
            } => (
                name,
                LayerSpec::Norm(NormSpec {
                    size,
                    alpha,
                    beta,
                    k,
                }),
            ),
            RawLayer::Relu { name } => (name, LayerSpec::Relu),
            RawLayer::Softmax { name } => (name, LayerSpec::Softmax),
        };
        let name = name.unwrap_or_else(|| format!("{}{}", spec.kind_name(), i));
        layers.push(Layer { name, spec });
    }
    Ok(Topology {
        name: raw.name,
        description: raw.description,
        input,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use crate::error::Error;
    use crate::topology::{builtin_alexnet, Topology};

    #[test]
    fn alexnet_round_trip() {
        let t = builtin_alexnet();
        let back = Topology::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.layers.len(), 21);
    }

    #[test]
    fn minimal_schema_infers_channels() {
        let t = Topology::from_json(
            r#"{"name":"tiny","input":[3,8,8],"layers":[
                {"kind":"conv","K":4,"R":3,"S":3,"pad":1},
                {"kind":"relu"},
                {"kind":"fc","n_out":5},
                {"kind":"softmax"}]}"#,
        )
        .unwrap();
        assert_eq!(t.layers.len(), 4);
        assert_eq!(t.layers[0].name, "conv0");
        assert!(matches!(t.layers[2].spec, crate::topology::LayerSpec::FullyConnected(f) if f.n_in == 256));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = Topology::from_json(
            r#"{"name":"x","input":[1,4,4],"layers":[{"kind":"relu","bogus":1}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
        let err = Topology::from_json(r#"{"name":"x","input":[1,4,4],"extra":0,"layers":[]}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn unknown_kind_rejected() {
        let err = Topology::from_json(r#"{"name":"x","input":[1,4,4],"layers":[{"kind":"lstm"}]}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn declared_channel_mismatch() {
        let err = Topology::from_json(
            r#"{"name":"x","input":[3,16,16],"layers":[
                {"kind":"conv","K":96,"R":3,"S":3},
                {"kind":"conv","C":3,"K":8,"R":3,"S":3}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { layer: Some(1), .. }), "{err}");
    }
}
