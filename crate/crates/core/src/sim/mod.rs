//! Transaction-level simulator of the accelerator dataflow: banked stream
//! buffers, a daisy chain of PEs with double-buffered filter caches and
//! interleaved shift-register accumulators, the ReLU/LRN/pool units and the
//! batched fully-connected mode.
//!
//! Time is the number of issue slots the sequencer walks through; downstream
//! units are assumed never to stall, and the checks that back this up are
//! reported in the per-layer statistics.

mod conv;
mod fc;
mod filter_cache;
mod network;
mod stream_buffer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use conv::{ConvRun, ConvStats};
pub use fc::{FcLayer, FcLayerRun, FcRun};
pub use filter_cache::FilterCacheArray;
pub use network::{
    stage_names, FidelityVerdict, LayerSim, NetworkReference, SimResult, DEVICE_ARGMAX_AGREEMENT,
    DEVICE_MEAN_REL, DEVICE_PROB_ERR, EXACT_MAX_REL,
};
pub use stream_buffer::StreamBufferArray;

use crate::arch::{check_fit, DeviceSpec, VectorConfig};
use crate::error::{Error, Result};
use crate::shared_exp::round_fp16;
use crate::topology::DevicePlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// FP32 storage, transforms, multiplies and accumulation.
    ExactFp32,
    /// FP16 storage, shared-exponent integer multiplies, FP32 transforms and
    /// accumulation.
    DeviceFp16SharedExp,
}

impl Fidelity {
    /// Value as held in on-chip or DDR storage.
    #[inline(always)]
    pub fn store(self, v: f32) -> f32 {
        match self {
            Fidelity::ExactFp32 => v,
            Fidelity::DeviceFp16SharedExp => round_fp16(v as f64) as f32,
        }
    }

    pub fn store_f64(self, v: f64) -> f32 {
        match self {
            Fidelity::ExactFp32 => v as f32,
            Fidelity::DeviceFp16SharedExp => round_fp16(v) as f32,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fidelity::ExactFp32 => "exact_fp32",
            Fidelity::DeviceFp16SharedExp => "device_fp16_shared_exp",
        }
    }
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fidelity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_fp32" | "exact" => Ok(Fidelity::ExactFp32),
            "device_fp16_shared_exp" | "device" => Ok(Fidelity::DeviceFp16SharedExp),
            _ => Err(Error::Parse(format!(
                "unknown fidelity '{s}' (expected exact_fp32 or device_fp16_shared_exp)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    pub cfg: VectorConfig,
    pub fidelity: Fidelity,
    device: Option<DeviceSpec>,
    /// Filter index computed at each daisy-chain position within a K-tile.
    pe_order: Vec<usize>,
    keep_outputs: bool,
}

impl Simulator {
    pub fn new(cfg: VectorConfig, fidelity: Fidelity) -> Result<Self> {
        cfg.validate()?;
        Ok(Simulator {
            cfg,
            fidelity,
            device: None,
            pe_order: (0..cfg.k_vec).collect(),
            keep_outputs: false,
        })
    }

    /// Rejects plans that do not fit `dev`.
    pub fn with_device(mut self, dev: DeviceSpec) -> Self {
        self.device = Some(dev);
        self
    }

    /// Assigns filters to chain positions in the given order.
    pub fn with_pe_order(mut self, order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; self.cfg.k_vec];
        for &k in &order {
            if k >= seen.len() || std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidConfig(format!(
                    "PE order {order:?} is not a permutation of 0..{}",
                    self.cfg.k_vec
                )));
            }
        }
        if order.len() != self.cfg.k_vec {
            return Err(Error::InvalidConfig("PE order must cover every PE".into()));
        }
        self.pe_order = order;
        Ok(self)
    }

    /// Retain every stage output in the network result.
    pub fn keep_outputs(mut self, keep: bool) -> Self {
        self.keep_outputs = keep;
        self
    }

    fn check_device(&self, plan: &DevicePlan) -> Result<()> {
        if let Some(dev) = &self.device {
            let r = check_fit(&self.cfg, plan, dev);
            if let Some(res) = r.limiting_resource {
                return Err(Error::Infeasible(format!(
                    "configuration exceeds the device {res:?} budget"
                )));
            }
        }
        Ok(())
    }
}
