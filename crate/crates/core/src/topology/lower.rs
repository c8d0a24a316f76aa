//! Lowering of a topology onto the accelerator's fixed pipeline:
//! convolution (or fully-connected) followed by optional ReLU, LRN and
//! max-pool stages. Strided convolutions are folded to stride 1.

use serde::Serialize;

use super::{
    fold_strided_conv, infer_shapes, ConvSpec, Dims, FcSpec, FoldPlan, LayerSpec, NormSpec,
    PoolSpec, Topology,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvStage {
    pub name: String,
    /// Index of the conv layer in the topology.
    pub layer: usize,
    /// Index of the last topology layer fused into this stage.
    pub last_layer: usize,
    /// Stride-1 convolution executed by the PEs.
    pub conv: ConvSpec,
    pub fold: Option<FoldPlan>,
    /// Input as seen by the PEs (folded when `fold` is set).
    pub input: Dims,
    /// Convolution output before pooling.
    pub conv_output: Dims,
    /// Tensor produced by the stage (after pooling, if any).
    pub output: Dims,
    /// MACs of the original (unfolded) layer.
    pub useful_macs: u64,
    pub relu: bool,
    pub norm: Option<NormSpec>,
    pub pool: Option<PoolSpec>,
}

impl ConvStage {
    /// Useful filter taps per output pixel, summed over one group's channels.
    pub fn useful_taps(&self) -> u64 {
        match &self.fold {
            Some(p) => {
                let o = &p.original;
                (o.channels_per_group() * o.kernel_h * o.kernel_w) as u64
            }
            None => (self.conv.channels_per_group() * self.conv.kernel_h * self.conv.kernel_w) as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FcStage {
    pub name: String,
    pub layer: usize,
    pub last_layer: usize,
    pub fc: FcSpec,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[allow(clippy::large_enum_variant)]
pub enum Stage {
    Conv(ConvStage),
    Fc(FcStage),
    /// Evaluated on the host at full precision.
    Softmax { layer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DevicePlan {
    pub input: Dims,
    pub stages: Vec<Stage>,
}

impl DevicePlan {
    pub fn conv_stages(&self) -> impl Iterator<Item = &ConvStage> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn fc_stages(&self) -> impl Iterator<Item = &FcStage> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Fc(f) => Some(f),
            _ => None,
        })
    }
}

/// Maps every layer onto a pipeline stage. Fails if a layer cannot be
/// attached to the preceding compute layer in ReLU -> LRN -> pool order.
pub fn lower(t: &Topology) -> Result<DevicePlan> {
    let shapes = infer_shapes(t)?;
    let mut stages: Vec<Stage> = Vec::new();
    let mut seen_fc = false;
    for (i, layer) in t.layers.iter().enumerate() {
        let shape = shapes.layers[i];
        match (&layer.spec, stages.last_mut()) {
            (LayerSpec::Conv(c), _) => {
                if seen_fc {
                    return Err(Error::Unsupported {
                        layer: i,
                        msg: "convolution after a fully-connected layer".into(),
                    });
                }
                let (conv, plan) = fold_strided_conv(c, shape.input)?;
                let (fold, input) = if plan.is_identity() {
                    (None, shape.input)
                } else {
                    (Some(plan), plan.folded_input)
                };
                stages.push(Stage::Conv(ConvStage {
                    name: layer.name.clone(),
                    layer: i,
                    last_layer: i,
                    conv,
                    fold,
                    input,
                    conv_output: shape.output,
                    output: shape.output,
                    useful_macs: shape.macs,
                    relu: c.relu,
                    norm: None,
                    pool: None,
                }));
            }
            (LayerSpec::FullyConnected(f), _) => {
                seen_fc = true;
                stages.push(Stage::Fc(FcStage {
                    name: layer.name.clone(),
                    layer: i,
                    last_layer: i,
                    fc: *f,
                    relu: f.relu,
                }));
            }
            (LayerSpec::Relu, Some(Stage::Conv(s))) if s.norm.is_none() && s.pool.is_none() => {
                s.relu = true;
                s.last_layer = i;
            }
            (LayerSpec::Relu, Some(Stage::Fc(s))) => {
                s.relu = true;
                s.last_layer = i;
            }
            (LayerSpec::Norm(n), Some(Stage::Conv(s))) if s.norm.is_none() && s.pool.is_none() => {
                s.norm = Some(*n);
                s.last_layer = i;
            }
            (LayerSpec::MaxPool(p), Some(Stage::Conv(s))) if s.pool.is_none() => {
                s.pool = Some(*p);
                s.output = shape.output;
                s.last_layer = i;
            }
            (LayerSpec::Softmax, _) => stages.push(Stage::Softmax { layer: i }),
            (spec, _) => {
                return Err(Error::Unsupported {
                    layer: i,
                    msg: format!(
                        "{} layer '{}' cannot be fused into the preceding stage",
                        spec.kind_name(),
                        layer.name
                    ),
                })
            }
        }
    }
    Ok(DevicePlan {
        input: t.input,
        stages,
    })
}
