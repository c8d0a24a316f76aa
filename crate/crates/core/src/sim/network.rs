//! The sequencer: convolution stages per image with feature maps kept on
//! chip, the last one spilled to DDR, then fully-connected stages per batch
//! and a host-side softmax. Every stage is diffed against the FP64 oracle.

use rayon::prelude::*;
use serde::Serialize;

use super::conv::{ConvStats, PreparedConv};
use super::fc::FcLayer;
use super::stream_buffer::StreamBufferArray;
use super::{Fidelity, Simulator};
use crate::arch::VectorConfig;
use crate::error::{Error, Result};
use crate::reference::{run_reference, softmax};
use crate::tensor::{ErrorAccumulator, ErrorStats, Tensor};
use crate::topology::{lower, DevicePlan, Stage, Topology};
use crate::weights::Weights;

/// Oracle outputs at every stage boundary, per image.
#[derive(Debug, Clone)]
pub struct NetworkReference {
    stages: Vec<Vec<Vec<f64>>>,
}

fn stage_last_layer(s: &Stage) -> usize {
    match s {
        Stage::Conv(c) => c.last_layer,
        Stage::Fc(f) => f.last_layer,
        Stage::Softmax { layer } => *layer,
    }
}

fn stage_name<'a>(t: &'a Topology, s: &Stage) -> &'a str {
    &t.layers[stage_last_layer(s)].name
}

impl NetworkReference {
    pub fn compute(t: &Topology, weights: &Weights, images: &[Tensor]) -> Result<Self> {
        let plan = lower(t)?;
        let stages = images
            .par_iter()
            .map(|img| {
                let outs = run_reference(t, weights, img)?;
                Ok(plan
                    .stages
                    .iter()
                    .map(|s| outs[stage_last_layer(s)].data().to_vec())
                    .collect())
            })
            .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
        Ok(NetworkReference { stages })
    }

    pub fn images(&self) -> usize {
        self.stages.len()
    }

    /// Output of `stage` for `image`.
    pub fn stage_output(&self, image: usize, stage: usize) -> &[f64] {
        &self.stages[image][stage]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSim {
    pub name: String,
    pub kind: String,
    /// Issue cycles per image (conv) or per batch (fc); zero on the host.
    pub cycles: u64,
    pub stalls: u64,
    pub errors: ErrorStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub fidelity: Fidelity,
    pub config: VectorConfig,
    pub images: usize,
    /// Images after padding the last fully-connected batch.
    pub padded_images: usize,
    pub fc_batches: usize,
    pub layers: Vec<LayerSim>,
    pub total_cycles: u64,
    pub cycles_per_image: f64,
    /// Images whose top class matches the oracle.
    pub argmax_agreement: usize,
    /// Mean absolute difference of the final outputs.
    pub final_mean_abs_err: f64,
    pub warnings: Vec<String>,
    /// Every stage's stored output per image, when requested.
    #[serde(skip)]
    pub outputs: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityVerdict {
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Largest per-layer `max_rel` accepted at FP32 fidelity.
pub const EXACT_MAX_REL: f64 = 1e-4;
/// Largest per-layer `mean_rel` accepted at device fidelity.
pub const DEVICE_MEAN_REL: f64 = 1e-2;
/// Largest mean absolute error of final class probabilities at device
/// fidelity.
pub const DEVICE_PROB_ERR: f64 = 2e-2;
/// Minimum fraction of matching top classes at device fidelity.
pub const DEVICE_ARGMAX_AGREEMENT: f64 = 95.0 / 96.0;

impl SimResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }

    pub fn verdict(&self) -> FidelityVerdict {
        let mut failures = Vec::new();
        for l in &self.layers {
            match self.fidelity {
                Fidelity::ExactFp32 if l.errors.max_rel > EXACT_MAX_REL => failures.push(format!(
                    "{}: max relative error {:.3e} > {EXACT_MAX_REL:e}",
                    l.name, l.errors.max_rel
                )),
                Fidelity::DeviceFp16SharedExp if l.errors.mean_rel > DEVICE_MEAN_REL => {
                    failures.push(format!(
                        "{}: mean relative error {:.3e} > {DEVICE_MEAN_REL:e}",
                        l.name, l.errors.mean_rel
                    ))
                }
                _ => {}
            }
            if let Some(c) = &l.conv {
                if c.read_conflicts + c.accumulator_violations + c.stray_filter_reads + c.stalls > 0
                    || c.stream_peak_words > c.stream_depth_budget
                {
                    failures.push(format!("{}: dataflow check failed: {c:?}", l.name));
                }
            }
        }
        if self.fidelity == Fidelity::DeviceFp16SharedExp {
            let need = (DEVICE_ARGMAX_AGREEMENT * self.images as f64 - 1e-9).ceil() as usize;
            if self.argmax_agreement < need {
                failures.push(format!(
                    "top-1 agreement {}/{} below {need}",
                    self.argmax_agreement, self.images
                ));
            }
            let softmax_last = self.layers.last().is_some_and(|l| l.kind == "softmax");
            if softmax_last && self.final_mean_abs_err > DEVICE_PROB_ERR {
                failures.push(format!(
                    "probability error {:.3e} > {DEVICE_PROB_ERR:e}",
                    self.final_mean_abs_err
                ));
            }
        }
        FidelityVerdict {
            passed: failures.is_empty(),
            failures,
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&a| a as f64).collect()
}

struct ImageConv {
    errs: Vec<ErrorAccumulator>,
    stats: Vec<ConvStats>,
    feature: Vec<f32>,
    kept: Vec<Tensor>,
}

impl Simulator {
    /// Simulates `images` through `t` and diffs every stage against the
    /// FP64 oracle.
    pub fn run_network(&self, t: &Topology, weights: &Weights, images: &[Tensor]) -> Result<SimResult> {
        let reference = NetworkReference::compute(t, weights, images)?;
        self.run_network_with_reference(t, weights, images, &reference)
    }

    pub fn run_network_with_reference(
        &self,
        t: &Topology,
        weights: &Weights,
        images: &[Tensor],
        reference: &NetworkReference,
    ) -> Result<SimResult> {
        let plan = lower(t)?;
        weights.check(t)?;
        self.check_device(&plan)?;
        if images.is_empty() {
            return Err(Error::ShapeMismatch("no images".into()));
        }
        if reference.images() != images.len() {
            return Err(Error::ShapeMismatch(format!(
                "reference covers {} images, got {}",
                reference.images(),
                images.len()
            )));
        }
        let want = [t.input.c, t.input.h, t.input.w];
        if let Some(img) = images.iter().find(|i| i.shape() != want) {
            return Err(Error::ShapeMismatch(format!(
                "image shape {:?}, topology expects {want:?}",
                img.shape()
            )));
        }

        let conv_idx: Vec<usize> = (0..plan.stages.len())
            .filter(|&i| matches!(plan.stages[i], Stage::Conv(_)))
            .collect();
        let prepared = conv_idx
            .iter()
            .map(|&i| match &plan.stages[i] {
                Stage::Conv(c) => self.prepare_conv(c, weights.get(&c.name)?),
                _ => unreachable!(),
            })
            .collect::<Result<Vec<PreparedConv>>>()?;

        let per_image = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| self.conv_phase(&prepared, &conv_idx, img, i, reference))
            .collect::<Result<Vec<ImageConv>>>()?;

        let mut warnings = Vec::new();
        let mut layers = Vec::new();
        let mut outputs: Vec<Vec<Tensor>> = vec![Vec::new(); images.len()];
        let mut total_cycles = 0u64;
        for (n, &stage) in conv_idx.iter().enumerate() {
            let mut acc = ErrorAccumulator::default();
            for im in &per_image {
                acc.merge(&im.errs[n]);
            }
            let stats = per_image[0].stats[n].clone();
            total_cycles += stats.cycles * images.len() as u64;
            layers.push(LayerSim {
                name: stage_name(t, &plan.stages[stage]).to_string(),
                kind: "conv".into(),
                cycles: stats.cycles,
                stalls: stats.stalls,
                errors: acc.stats(),
                conv: Some(stats),
            });
        }
        if self.keep_outputs {
            for (o, im) in outputs.iter_mut().zip(&per_image) {
                o.extend(im.kept.iter().cloned());
            }
        }
        let mut finals: Vec<Vec<f32>> = per_image.into_iter().map(|im| im.feature).collect();

        let fc_idx: Vec<usize> = (0..plan.stages.len())
            .filter(|&i| matches!(plan.stages[i], Stage::Fc(_)))
            .collect();
        let mut padded_images = images.len();
        let mut fc_batches = 0;
        if !fc_idx.is_empty() {
            let fc_layers = fc_idx
                .iter()
                .map(|&i| match &plan.stages[i] {
                    Stage::Fc(f) => Ok(FcLayer {
                        spec: f.fc,
                        relu: f.relu,
                        params: weights.get(&f.name)?,
                    }),
                    _ => unreachable!(),
                })
                .collect::<Result<Vec<_>>>()?;
            let s_batch = self.cfg.fc_batch();
            fc_batches = images.len().div_ceil(s_batch);
            padded_images = fc_batches * s_batch;
            if padded_images != images.len() {
                warnings.push(format!(
                    "{} images padded to {padded_images} for fully-connected batches of {s_batch}",
                    images.len()
                ));
            }
            let width = finals[0].len();
            let mut features = finals.clone();
            features.resize(padded_images, vec![0.0; width]);
            let runs = features
                .par_chunks(s_batch)
                .map(|b| self.fc_batch(&fc_layers, b.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            for w in &runs[0].warnings {
                warnings.push(w.clone());
            }
            for (n, &si) in fc_idx.iter().enumerate() {
                let mut acc = ErrorAccumulator::default();
                for (i, final_out) in finals.iter_mut().enumerate() {
                    let out = &runs[i / s_batch].layers[n].outputs[i % s_batch];
                    acc.add(&to_f64(out), reference.stage_output(i, si));
                    if self.keep_outputs {
                        outputs[i].push(Tensor::vector(to_f64(out)));
                    }
                    if n + 1 == fc_idx.len() {
                        *final_out = out.clone();
                    }
                }
                let cycles = runs[0].layers[n].cycles;
                total_cycles += cycles * fc_batches as u64;
                layers.push(LayerSim {
                    name: stage_name(t, &plan.stages[si]).to_string(),
                    kind: "fc".into(),
                    cycles,
                    stalls: 0,
                    errors: acc.stats(),
                    conv: None,
                });
            }
        }

        let mut final_f64: Vec<Vec<f64>> = finals.iter().map(|v| to_f64(v)).collect();
        let last = plan.stages.len() - 1;
        if let Some(si) = plan
            .stages
            .iter()
            .position(|s| matches!(s, Stage::Softmax { .. }))
        {
            let mut acc = ErrorAccumulator::default();
            for (i, v) in final_f64.iter_mut().enumerate() {
                *v = softmax(v);
                acc.add(v, reference.stage_output(i, si));
                if self.keep_outputs {
                    outputs[i].push(Tensor::vector(v.clone()));
                }
            }
            layers.push(LayerSim {
                name: stage_name(t, &plan.stages[si]).to_string(),
                kind: "softmax".into(),
                cycles: 0,
                stalls: 0,
                errors: acc.stats(),
                conv: None,
            });
        }

        let mut agreement = 0;
        let mut abs_sum = 0.0;
        let mut count = 0usize;
        for (i, v) in final_f64.iter().enumerate() {
            let r = reference.stage_output(i, last);
            if argmax(v) == argmax(r) {
                agreement += 1;
            }
            abs_sum += v.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += v.len();
        }

        Ok(SimResult {
            fidelity: self.fidelity,
            config: self.cfg,
            images: images.len(),
            padded_images,
            fc_batches,
            layers,
            total_cycles,
            cycles_per_image: total_cycles as f64 / images.len() as f64,
            argmax_agreement: agreement,
            final_mean_abs_err: if count > 0 { abs_sum / count as f64 } else { 0.0 },
            warnings,
            outputs: if self.keep_outputs { outputs } else { Vec::new() },
        })
    }

    fn conv_phase(
        &self,
        prepared: &[PreparedConv],
        conv_idx: &[usize],
        img: &Tensor,
        image: usize,
        reference: &NetworkReference,
    ) -> Result<ImageConv> {
        let mut sb = StreamBufferArray::new(self.cfg.w_vec, self.cfg.c_vec);
        let mut res = ImageConv {
            errs: Vec::new(),
            stats: Vec::new(),
            feature: Vec::new(),
            kept: Vec::new(),
        };
        if prepared.is_empty() {
            res.feature = img.data().iter().map(|&v| self.fidelity.store_f64(v)).collect();
            return Ok(res);
        }
        for (n, p) in prepared.iter().enumerate() {
            let st = &p.stage;
            if n == 0 || st.fold.is_some() {
                // Host-side load (and space-to-depth re-layout when folded).
                let src = if n == 0 {
                    img.clone()
                } else {
                    let d = sb.front_dims();
                    Tensor::new(vec![d.c, d.h, d.w], to_f64(&sb.front_tensor()))?
                };
                let x = match &st.fold {
                    Some(f) => f.fold_input(&src)?,
                    None => src,
                };
                let data: Vec<f32> = x.data().iter().map(|&v| self.fidelity.store_f64(v)).collect();
                sb.load_front(st.input, &data);
            }
            let to_ddr = n + 1 == prepared.len();
            let (stats, ddr) = self.execute_conv(p, &mut sb, to_ddr)?;
            let out = if to_ddr { ddr } else { sb.front_tensor() };
            let mut acc = ErrorAccumulator::default();
            acc.add(&to_f64(&out), reference.stage_output(image, conv_idx[n]));
            res.errs.push(acc);
            res.stats.push(stats);
            if self.keep_outputs {
                let d = st.output;
                res.kept.push(Tensor::new(vec![d.c, d.h, d.w], to_f64(&out))?);
            }
            if to_ddr {
                res.feature = out;
            }
        }
        Ok(res)
    }
}

/// Names of the plan's stages, in the order outputs are kept.
pub fn stage_names(t: &Topology, plan: &DevicePlan) -> Vec<String> {
    plan.stages.iter().map(|s| stage_name(t, s).to_string()).collect()
}
