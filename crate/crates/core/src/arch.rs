//! Architecture points, device budgets and the analytical resource model
//! (DSP blocks, stream-buffer and filter-cache M20Ks).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::DevicePlan;

/// Words held by one M20K when configured 2 wide by 512 deep.
pub const M20K_WORDS: u64 = 1024;

/// DSPs charged for the on-chip Winograd transforms.
pub const WINOGRAD_DSP_OVERHEAD: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// FP16 storage with shared-exponent 18-bit integer multipliers; two
    /// multiplies per DSP block.
    Fp16SharedExp,
    /// One FP32 multiply-add per DSP block.
    Fp32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VectorConfig {
    pub c_vec: usize,
    pub k_vec: usize,
    pub q_vec: usize,
    pub w_vec: usize,
    pub s_vec: usize,
    /// Interleave factor along output width.
    pub l_w: usize,
    /// Interleave factor along output height.
    pub l_h: usize,
    pub winograd: bool,
    pub precision: Precision,
    #[serde(default = "default_overhead")]
    pub winograd_dsp_overhead: u64,
}

fn default_overhead() -> u64 {
    WINOGRAD_DSP_OVERHEAD
}

impl VectorConfig {
    /// Winograd F(4,3) point with `L_w = 2`, `L_h = 3`.
    pub fn new(c_vec: usize, k_vec: usize) -> Self {
        VectorConfig {
            c_vec,
            k_vec,
            q_vec: 4,
            w_vec: 6,
            s_vec: 3,
            l_w: 2,
            l_h: 3,
            winograd: true,
            precision: Precision::Fp16SharedExp,
            winograd_dsp_overhead: WINOGRAD_DSP_OVERHEAD,
        }
    }

    /// The same point computed without Winograd transforms.
    pub fn direct(mut self) -> Self {
        self.winograd = false;
        self
    }

    /// Interleave depth `L = L_w * L_h`.
    pub fn interleave(&self) -> usize {
        self.l_w * self.l_h
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.c_vec, self.k_vec, self.q_vec, self.w_vec, self.s_vec, self.l_w, self.l_h,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("all factors must be positive: {self:?}")));
        }
        if self.w_vec != self.s_vec + self.q_vec - 1 {
            return Err(Error::InvalidConfig(format!(
                "W_vec={} must equal S_vec + Q_vec - 1 = {}",
                self.w_vec,
                self.s_vec + self.q_vec - 1
            )));
        }
        if self.winograd && (self.q_vec, self.s_vec, self.w_vec) != (4, 3, 6) {
            return Err(Error::InvalidConfig(
                "Winograd F(4,3) requires Q_vec=4, S_vec=3, W_vec=6".into(),
            ));
        }
        Ok(())
    }

    /// Stream-buffer (and per-PE cache) bank count, `W_vec * C_vec`.
    pub fn banks(&self) -> u64 {
        (self.w_vec * self.c_vec) as u64
    }

    /// Useful convolution MACs issued per cycle across all PEs.
    pub fn conv_macs_per_cycle(&self) -> u64 {
        (self.q_vec * self.s_vec * self.c_vec * self.k_vec) as u64
    }

    /// Hardware multipliers in the PE array.
    pub fn multipliers(&self) -> u64 {
        if self.winograd {
            (self.w_vec * self.c_vec * self.k_vec) as u64
        } else {
            self.conv_macs_per_cycle()
        }
    }

    /// Fully-connected batch size, `2 * K_vec`.
    pub fn fc_batch(&self) -> usize {
        2 * self.k_vec
    }

    /// Images held per PE during fully-connected layers.
    pub fn fc_images_per_pe(&self) -> usize {
        self.fc_batch() / self.k_vec
    }

    /// Dot-product units devoted to one image during fully-connected layers.
    pub fn fc_units_per_image(&self) -> usize {
        self.w_vec / self.fc_images_per_pe()
    }

    /// Unique weights streamed per cycle in fully-connected mode,
    /// `(W_vec / N) * C_vec`.
    pub fn fc_weights_per_cycle(&self) -> usize {
        self.fc_units_per_image() * self.c_vec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub dsp_count: u64,
    pub m20k_count: u64,
    #[serde(default = "default_m20k_words")]
    pub m20k_words: u64,
    pub fmax_mhz: f64,
    pub ddr_bytes_per_cycle: u64,
    pub board_watts: f64,
}

fn default_m20k_words() -> u64 {
    M20K_WORDS
}

impl DeviceSpec {
    /// Arria 10 GX 1150 at 303 MHz with one 64-byte DDR4 interface.
    pub fn arria10_1150() -> Self {
        DeviceSpec {
            dsp_count: 1518,
            m20k_count: 2713,
            m20k_words: M20K_WORDS,
            fmax_mhz: 303.0,
            ddr_bytes_per_cycle: 64,
            board_watts: 45.0,
        }
    }

    pub fn fmax_hz(&self) -> f64 {
        self.fmax_mhz * 1e6
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.m20k_words > 0
            && self.fmax_mhz > 0.0
            && self.fmax_mhz.is_finite()
            && self.ddr_bytes_per_cycle > 0
            && self.board_watts > 0.0
            && self.board_watts.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid device spec: {self:?}")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: DeviceSpec = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Dsp,
    M20k,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub n_dsps: u64,
    pub m20k_stream: u64,
    pub m20k_filter_cache: u64,
    pub feasible: bool,
    pub limiting_resource: Option<Resource>,
    pub warnings: Vec<String>,
}

impl ResourceReport {
    pub fn m20k_total(&self) -> u64 {
        self.m20k_stream + self.m20k_filter_cache
    }
}

/// DSP blocks used by the PE array.
///
/// `ceil((W_vec - Q_vec + 1) * Q_vec * K_vec * C_vec / 2)` for FP16 (two
/// multipliers per block); with Winograd the array needs half as many
/// multipliers plus a fixed allowance for the transforms.
pub fn dsp_usage(cfg: &VectorConfig) -> u64 {
    let mults = ((cfg.w_vec - cfg.q_vec + 1) * cfg.q_vec * cfg.k_vec * cfg.c_vec) as u64;
    let base = match cfg.precision {
        Precision::Fp16SharedExp => mults.div_ceil(2),
        Precision::Fp32 => mults,
    };
    if cfg.winograd {
        base.div_ceil(2) + cfg.winograd_dsp_overhead
    } else {
        base
    }
}

/// Per-bank stream-buffer words needed by each convolution stage:
/// `(depth_in, depth_out)`. The last convolution's output goes to DDR.
pub fn stream_buffer_depths(cfg: &VectorConfig, plan: &DevicePlan) -> Vec<(u64, u64)> {
    let banks = cfg.banks();
    let convs: Vec<_> = plan.conv_stages().collect();
    convs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let din = (s.input.volume() as u64).div_ceil(banks);
            let dout = if i + 1 == convs.len() {
                0
            } else {
                (s.output.volume() as u64).div_ceil(banks)
            };
            (din, dout)
        })
        .collect()
}

/// M20Ks for the double-buffered stream buffers, sized by the largest
/// input-plus-output footprint over all convolution stages.
pub fn stream_buffer_m20k(cfg: &VectorConfig, plan: &DevicePlan) -> u64 {
    let max_depth = stream_buffer_depths(cfg, plan)
        .into_iter()
        .map(|(i, o)| i + o)
        .max()
        .unwrap_or(0);
    max_depth.div_ceil(M20K_WORDS) * cfg.banks()
}

/// M20Ks for the PE filter caches, `ceil(W_vec * C_vec * K_vec / 2)`.
pub fn filter_cache_m20k(cfg: &VectorConfig) -> u64 {
    (cfg.banks() * cfg.k_vec as u64).div_ceil(2)
}

/// Words of cache available to one PE.
pub fn pe_cache_words(cfg: &VectorConfig) -> u64 {
    cfg.banks() * M20K_WORDS / 2
}

pub fn check_fit(cfg: &VectorConfig, plan: &DevicePlan, dev: &DeviceSpec) -> ResourceReport {
    let n_dsps = dsp_usage(cfg);
    let m20k_stream = stream_buffer_m20k(cfg, plan);
    let m20k_filter_cache = filter_cache_m20k(cfg);
    let limiting_resource = if n_dsps > dev.dsp_count {
        Some(Resource::Dsp)
    } else if m20k_stream + m20k_filter_cache > dev.m20k_count {
        Some(Resource::M20k)
    } else {
        None
    };
    let mut warnings = Vec::new();
    let per_pe = (cfg.fc_images_per_pe()
        * plan.fc_stages().map(|f| f.fc.n_in).max().unwrap_or(0)) as u64;
    if per_pe > pe_cache_words(cfg) {
        warnings.push(format!(
            "fully-connected features need {per_pe} words per PE cache, capacity {}",
            pe_cache_words(cfg)
        ));
    }
    ResourceReport {
        n_dsps,
        m20k_stream,
        m20k_filter_cache,
        feasible: limiting_resource.is_none(),
        limiting_resource,
        warnings,
    }
}
