//! Analytical throughput model: per-layer cycle counts from the loop nest,
//! DSP efficiency, DDR bounds and system images per second.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::{check_fit, DeviceSpec, ResourceReport, VectorConfig};
use crate::error::{Error, Result};
use crate::topology::{ConvStage, DevicePlan, FcStage};

/// Default fraction of device throughput lost at system level.
pub const SYSTEM_DERATE: f64 = 0.16;

/// Bytes per stored weight.
const WEIGHT_BYTES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Fc,
}

/// Fraction of each loop dimension left unpadded by vectorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantTerms {
    pub q_eff: f64,
    pub p_eff: f64,
    pub k_eff: f64,
    pub c_eff: f64,
    pub s_eff: f64,
}

impl QuantTerms {
    pub fn product(&self) -> f64 {
        self.q_eff * self.p_eff * self.k_eff * self.c_eff * self.s_eff
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPerf {
    pub name: String,
    pub kind: LayerKind,
    pub useful_macs: u64,
    /// MAC slots issued, `n_cycles * peak MACs per cycle`.
    pub padded_macs: u64,
    pub dsp_eff: f64,
    /// Compute cycles; per image for conv, per batch for fc.
    pub n_cycles: u64,
    /// Weight bytes this layer must fetch from DDR.
    pub byte_req: u64,
    /// DDR bytes transferable during `n_cycles`.
    pub byte_ddr: u64,
    /// Cycles once DDR bandwidth is accounted for.
    pub n_real: f64,
    pub act_gflops: f64,
    pub eff_gflops: f64,
    pub quant: Option<QuantTerms>,
}

impl LayerPerf {
    pub fn memory_bound(&self) -> bool {
        self.byte_req > self.byte_ddr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemPerf {
    pub layers: Vec<LayerPerf>,
    pub fc_batch: usize,
    pub cycles_per_image: f64,
    pub img_per_s_device: f64,
    pub img_per_s_system: f64,
    pub img_per_s_per_watt: f64,
    pub derate: f64,
    pub fmax_mhz: f64,
}

/// Loop trip counts for a stride-1 convolution stage.
pub fn conv_loop_counts(cfg: &VectorConfig, s: &ConvStage) -> Result<ConvLoop> {
    cfg.validate()?;
    let c = &s.conv;
    if c.stride != 1 {
        return Err(Error::Unsupported {
            layer: s.layer,
            msg: format!("PE array runs stride-1 convolutions, got stride {}", c.stride),
        });
    }
    let (p, q) = (s.conv_output.h, s.conv_output.w);
    Ok(ConvLoop {
        groups: c.groups,
        k_tiles: c.filters_per_group().div_ceil(cfg.k_vec),
        row_blocks: p.div_ceil(cfg.l_h),
        col_blocks: q.div_ceil(cfg.q_vec * cfg.l_w),
        c_slices: c.channels_per_group().div_ceil(cfg.c_vec),
        rows: c.kernel_h,
        strips: c.kernel_w.div_ceil(cfg.s_vec),
        interleave: cfg.interleave(),
    })
}

/// Trip counts of the PE-array loop nest for one convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvLoop {
    pub groups: usize,
    pub k_tiles: usize,
    pub row_blocks: usize,
    pub col_blocks: usize,
    pub c_slices: usize,
    pub rows: usize,
    pub strips: usize,
    pub interleave: usize,
}

impl ConvLoop {
    pub fn cycles(&self) -> u64 {
        [
            self.groups,
            self.k_tiles,
            self.row_blocks,
            self.col_blocks,
            self.c_slices,
            self.rows,
            self.strips,
            self.interleave,
        ]
        .iter()
        .map(|&v| v as u64)
        .product()
    }
}

pub fn quantization_terms(cfg: &VectorConfig, stage: &ConvStage) -> Result<QuantTerms> {
    let l = conv_loop_counts(cfg, stage)?;
    let c = &stage.conv;
    let (p, q) = (stage.conv_output.h as f64, stage.conv_output.w as f64);
    let cg = c.channels_per_group() as f64;
    Ok(QuantTerms {
        q_eff: q / (l.col_blocks * cfg.q_vec * cfg.l_w) as f64,
        p_eff: p / (l.row_blocks * cfg.l_h) as f64,
        k_eff: c.filters_per_group() as f64 / (l.k_tiles * cfg.k_vec) as f64,
        c_eff: cg / (l.c_slices * cfg.c_vec) as f64,
        s_eff: stage.useful_taps() as f64 / (cg * (c.kernel_h * l.strips * cfg.s_vec) as f64),
    })
}

/// Fraction of issued MAC slots doing useful work for a convolution stage.
pub fn dsp_efficiency(cfg: &VectorConfig, stage: &ConvStage) -> Result<f64> {
    Ok(quantization_terms(cfg, stage)?.product())
}

fn gflops(mults: u64, dev: &DeviceSpec, eff: f64) -> f64 {
    2.0 * mults as f64 * dev.fmax_hz() * eff / 1e9
}

/// Performance of one convolution stage; `next_weight_bytes` is the DDR
/// traffic for prefetching the following stage's filters.
pub fn conv_layer_perf(
    cfg: &VectorConfig,
    stage: &ConvStage,
    next_weight_bytes: u64,
    dev: &DeviceSpec,
) -> Result<LayerPerf> {
    let quant = quantization_terms(cfg, stage)?;
    let n_cycles = conv_loop_counts(cfg, stage)?.cycles();
    let padded_macs = n_cycles * cfg.conv_macs_per_cycle();
    let dsp_eff = stage.useful_macs as f64 / padded_macs as f64;
    let byte_ddr = dev.ddr_bytes_per_cycle * n_cycles;
    let n_real = n_cycles as f64 * (next_weight_bytes as f64 / byte_ddr as f64).max(1.0);
    let act_gflops = gflops(cfg.multipliers(), dev, dsp_eff);
    let eff_gflops = if cfg.winograd { 2.0 * act_gflops } else { act_gflops };
    Ok(LayerPerf {
        name: stage.name.clone(),
        kind: LayerKind::Conv,
        useful_macs: stage.useful_macs,
        padded_macs,
        dsp_eff,
        n_cycles,
        byte_req: next_weight_bytes,
        byte_ddr,
        n_real,
        act_gflops,
        eff_gflops,
        quant: Some(quant),
    })
}

/// Performance of one fully-connected stage over a batch of `2 * K_vec`
/// images.
pub fn fc_layer_perf(cfg: &VectorConfig, stage: &FcStage, dev: &DeviceSpec) -> Result<LayerPerf> {
    cfg.validate()?;
    let units = cfg.fc_units_per_image();
    if units == 0 {
        return Err(Error::InvalidConfig(format!(
            "W_vec={} cannot serve {} images per PE",
            cfg.w_vec,
            cfg.fc_images_per_pe()
        )));
    }
    let batch = cfg.fc_batch() as u64;
    let (n_in, n_out) = (stage.fc.n_in as u64, stage.fc.n_out as u64);
    let chunks = n_out * n_in.div_ceil(cfg.c_vec as u64);
    let n_cycles = chunks.div_ceil(units as u64);
    let useful_macs = n_in * n_out * batch;
    let padded_macs = n_cycles * cfg.fc_weights_per_cycle() as u64 * batch;
    let dsp_eff = useful_macs as f64 / padded_macs as f64;
    let byte_req = n_in * n_out * WEIGHT_BYTES;
    let byte_ddr = dev.ddr_bytes_per_cycle * n_cycles;
    let n_real = n_cycles as f64 * (byte_req as f64 / byte_ddr as f64).max(1.0);
    let act_gflops = gflops(cfg.fc_weights_per_cycle() as u64 * batch, dev, dsp_eff);
    Ok(LayerPerf {
        name: stage.name.clone(),
        kind: LayerKind::Fc,
        useful_macs,
        padded_macs,
        dsp_eff,
        n_cycles,
        byte_req,
        byte_ddr,
        n_real,
        act_gflops,
        eff_gflops: act_gflops,
        quant: None,
    })
}

/// Per-layer performance and overall throughput of `plan` on `dev`.
pub fn system_throughput(
    cfg: &VectorConfig,
    plan: &DevicePlan,
    dev: &DeviceSpec,
    derate: f64,
) -> Result<SystemPerf> {
    cfg.validate()?;
    dev.validate()?;
    if !(0.0..1.0).contains(&derate) {
        return Err(Error::InvalidConfig(format!("derate {derate} outside [0, 1)")));
    }
    let convs: Vec<&ConvStage> = plan.conv_stages().collect();
    let mut layers = Vec::new();
    for (i, s) in convs.iter().enumerate() {
        let next = convs
            .get(i + 1)
            .map_or(0, |n| n.conv.weight_count() as u64 * WEIGHT_BYTES);
        layers.push(conv_layer_perf(cfg, s, next, dev)?);
    }
    for s in plan.fc_stages() {
        layers.push(fc_layer_perf(cfg, s, dev)?);
    }
    let batch = cfg.fc_batch() as f64;
    let cycles_per_image: f64 = layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv => l.n_real,
            LayerKind::Fc => l.n_real / batch,
        })
        .sum();
    if cycles_per_image <= 0.0 {
        return Err(Error::InvalidConfig("plan has no compute stages".into()));
    }
    let img_per_s_device = dev.fmax_hz() / cycles_per_image;
    let img_per_s_system = img_per_s_device * (1.0 - derate);
    Ok(SystemPerf {
        layers,
        fc_batch: cfg.fc_batch(),
        cycles_per_image,
        img_per_s_device,
        img_per_s_system,
        img_per_s_per_watt: img_per_s_system / dev.board_watts,
        derate,
        fmax_mhz: dev.fmax_mhz,
    })
}

/// Resource check followed by the throughput model; fails if the point does
/// not fit the device.
pub fn evaluate(
    cfg: &VectorConfig,
    plan: &DevicePlan,
    dev: &DeviceSpec,
    derate: f64,
) -> Result<(ResourceReport, SystemPerf)> {
    let r = check_fit(cfg, plan, dev);
    if let Some(res) = r.limiting_resource {
        return Err(Error::Infeasible(format!(
            "C_vec={} K_vec={} exceeds the {res:?} budget ({} DSPs, {} M20Ks needed)",
            cfg.c_vec,
            cfg.k_vec,
            r.n_dsps,
            r.m20k_total()
        )));
    }
    let p = system_throughput(cfg, plan, dev, derate)?;
    Ok((r, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GflopsRow {
    pub layer: String,
    pub kind: LayerKind,
    pub efficiency: f64,
    pub act_gflops: f64,
    pub eff_gflops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GflopsReport {
    pub rows: Vec<GflopsRow>,
}

impl GflopsReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:>4} {:>10} {:>12} {:>12}\n",
            "layer", "kind", "efficiency", "act_gflops", "eff_gflops"
        );
        for r in &self.rows {
            let kind = match r.kind {
                LayerKind::Conv => "conv",
                LayerKind::Fc => "fc",
            };
            let _ = writeln!(
                s,
                "{:<10} {:>4} {:>10.4} {:>12.1} {:>12.1}",
                r.layer, kind, r.efficiency, r.act_gflops, r.eff_gflops
            );
        }
        s
    }
}

pub fn gflops_report(perf: &SystemPerf) -> GflopsReport {
    GflopsReport {
        rows: perf
            .layers
            .iter()
            .map(|l| GflopsRow {
                layer: l.name.clone(),
                kind: l.kind,
                efficiency: l.dsp_eff,
                act_gflops: l.act_gflops,
                eff_gflops: l.eff_gflops,
            })
            .collect(),
    }
}
