//! Convolution mode: sticks broadcast down the PE chain, Winograd or direct
//! dot products, interleaved accumulation and the post-processing units.

use serde::{Deserialize, Serialize};

use super::filter_cache::FilterCacheArray;
use super::stream_buffer::StreamBufferArray;
use super::{Fidelity, Simulator};
use crate::arch::M20K_WORDS;
use crate::error::{Error, Result};
use crate::shared_exp::{dot_value, encode_into, int_dot, MANTISSA_BITS};
use crate::tensor::Tensor;
use crate::topology::{ConvSpec, ConvStage, Dims, DevicePlan, NormSpec, PoolSpec, Stage};
use crate::weights::LayerParams;
use crate::winograd::{WinogradF43, TILE};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvStats {
    /// Issue slots walked by the sequencer.
    pub cycles: u64,
    pub stick_reads: u64,
    pub read_conflicts: u64,
    /// Accumulator slots read back at a distance other than `L` cycles.
    pub accumulator_violations: u64,
    /// Filter reads that hit the back half of a cache.
    pub stray_filter_reads: u64,
    pub filter_cache_peak_words: usize,
    pub filter_cache_capacity_words: usize,
    /// Peak words held in one stream-buffer bank (input plus output).
    pub stream_peak_words: u64,
    /// Per-bank depth the resource model reserves for this layer.
    pub stream_depth_budget: u64,
    /// Words the crossbar delivered to the busiest bank.
    pub max_bank_writes: u64,
    /// Output channels buffered ahead of normalization, at peak.
    pub reorder_peak_channels: usize,
    /// Cycles the crossbar would need beyond the compute time.
    pub stalls: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvRun {
    pub output: Tensor,
    pub stats: ConvStats,
}

/// Filters of one stage in cache order, with groups of `C_vec` lanes
/// indexed by `(k, c_slice, row, strip, j)`.
#[derive(Debug, Clone)]
pub(crate) struct PreparedConv {
    pub stage: ConvStage,
    n_cs: usize,
    n_strips: usize,
    width: usize,
    exps: Vec<i32>,
    mants: Vec<i32>,
    vals: Vec<f32>,
    bias: Vec<f32>,
}

impl PreparedConv {
    #[inline(always)]
    fn group(&self, k: usize, cs: usize, r: usize, st: usize) -> usize {
        (((k * self.n_cs + cs) * self.stage.conv.kernel_h + r) * self.n_strips + st) * self.width
    }
}

/// Relu is applied in the PE output path; LRN and pooling here, as K-tiles
/// complete in channel order.
struct PostUnit {
    dims: Dims,
    norm: Option<NormSpec>,
    pool: Option<PoolSpec>,
    next: usize,
    peak_held: usize,
    plane: Vec<f32>,
}

impl PostUnit {
    fn new(dims: Dims, norm: Option<NormSpec>, pool: Option<PoolSpec>) -> Self {
        PostUnit {
            dims,
            norm,
            pool,
            next: 0,
            peak_held: 0,
            plane: vec![0.0; dims.h * dims.w],
        }
    }

    /// Emits every channel whose normalization window is complete.
    fn advance(&mut self, staging: &[f32], completed: usize, emit: &mut impl FnMut(usize, usize, usize, f32)) {
        let k = self.dims.c;
        let ready = match self.norm {
            Some(n) if completed < k => completed.saturating_sub(n.size / 2),
            _ => completed,
        };
        self.peak_held = self.peak_held.max(completed - self.next);
        let (h, w) = (self.dims.h, self.dims.w);
        let plane = h * w;
        for c in self.next..ready.max(self.next) {
            match self.norm {
                Some(n) => {
                    let half = n.size / 2;
                    let lo = c.saturating_sub(half);
                    let hi = (c + half).min(k - 1);
                    let a = (n.alpha / n.size as f64) as f32;
                    let (kk, beta) = (n.k as f32, n.beta as f32);
                    for i in 0..plane {
                        let mut ss = 0.0f32;
                        for cc in lo..=hi {
                            let v = staging[cc * plane + i];
                            ss += v * v;
                        }
                        self.plane[i] = staging[c * plane + i] / (kk + a * ss).powf(beta);
                    }
                }
                None => self.plane.copy_from_slice(&staging[c * plane..(c + 1) * plane]),
            }
            match self.pool {
                Some(p) => {
                    let (ph, pw) = p.output_hw(h, w).expect("pool shape checked by lowering");
                    for y in 0..ph {
                        for x in 0..pw {
                            let mut m = f32::NEG_INFINITY;
                            for dy in 0..p.window {
                                for dx in 0..p.window {
                                    m = m.max(self.plane[(y * p.stride + dy) * w + x * p.stride + dx]);
                                }
                            }
                            emit(c, y, x, m);
                        }
                    }
                }
                None => {
                    for y in 0..h {
                        for x in 0..w {
                            emit(c, y, x, self.plane[y * w + x]);
                        }
                    }
                }
            }
        }
        self.next = self.next.max(ready);
    }
}

impl Simulator {
    pub(crate) fn prepare_conv(&self, stage: &ConvStage, params: &LayerParams) -> Result<PreparedConv> {
        let conv = &stage.conv;
        if conv.stride != 1 {
            return Err(Error::Unsupported {
                layer: stage.layer,
                msg: format!("PE array runs stride-1 convolutions, got stride {}", conv.stride),
            });
        }
        let folded;
        let weights = match &stage.fold {
            Some(f) => {
                folded = f.fold_filters(&params.weights)?;
                &folded
            }
            None => &params.weights,
        };
        let (k, cg, rr, ss) = (
            conv.out_channels,
            conv.channels_per_group(),
            conv.kernel_h,
            conv.kernel_w,
        );
        if weights.shape() != [k, cg, rr, ss] || params.bias.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "layer '{}' expects filters [{k}, {cg}, {rr}, {ss}], got {:?}",
                stage.name,
                weights.shape()
            )));
        }
        let cfg = &self.cfg;
        let c_vec = cfg.c_vec;
        let n_cs = cg.div_ceil(c_vec);
        let n_strips = ss.div_ceil(cfg.s_vec);
        let width = if cfg.winograd { TILE } else { cfg.s_vec };
        let n_groups = k * n_cs * rr * n_strips * width;
        let device = self.fidelity == Fidelity::DeviceFp16SharedExp;
        let w = weights.data();
        let wino = WinogradF43::get();

        let mut vals = vec![0.0f32; n_groups * c_vec];
        let mut idx = 0;
        let mut taps = vec![0.0f32; cfg.s_vec];
        for ko in 0..k {
            for cs in 0..n_cs {
                for r in 0..rr {
                    for st in 0..n_strips {
                        let base = idx;
                        for lane in 0..c_vec {
                            let c = cs * c_vec + lane;
                            for (t, tap) in taps.iter_mut().enumerate() {
                                let s = st * cfg.s_vec + t;
                                *tap = if c < cg && s < ss {
                                    self.fidelity.store_f64(w[((ko * cg + c) * rr + r) * ss + s])
                                } else {
                                    0.0
                                };
                            }
                            if cfg.winograd {
                                let u = wino.transform_filter(&[taps[0], taps[1], taps[2]]);
                                for (j, v) in u.iter().enumerate() {
                                    vals[(base + j) * c_vec + lane] = *v;
                                }
                            } else {
                                for (j, v) in taps.iter().enumerate() {
                                    vals[(base + j) * c_vec + lane] = *v;
                                }
                            }
                        }
                        idx += width;
                    }
                }
            }
        }
        let (exps, mants) = if device {
            let mut exps = vec![0; n_groups];
            let mut mants = vec![0; n_groups * c_vec];
            let mut buf = vec![0.0f64; c_vec];
            for (g, e) in exps.iter_mut().enumerate() {
                for (b, v) in buf.iter_mut().zip(&vals[g * c_vec..(g + 1) * c_vec]) {
                    *b = *v as f64;
                }
                *e = encode_into(&buf, MANTISSA_BITS, &mut mants[g * c_vec..(g + 1) * c_vec]);
            }
            vals = Vec::new();
            (exps, mants)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(PreparedConv {
            stage: stage.clone(),
            n_cs,
            n_strips,
            width,
            exps,
            mants,
            vals,
            bias: params.bias.iter().map(|&b| self.fidelity.store_f64(b)).collect(),
        })
    }

    /// Runs one stage reading the front half of `sb`. The output goes to the
    /// back half (then swapped to the front) or, with `to_ddr`, is returned.
    pub(crate) fn execute_conv(
        &self,
        p: &PreparedConv,
        sb: &mut StreamBufferArray,
        to_ddr: bool,
    ) -> Result<(ConvStats, Vec<f32>)> {
        let cfg = &self.cfg;
        let st = &p.stage;
        let conv = &st.conv;
        if sb.front_dims() != st.input {
            return Err(Error::ShapeMismatch(format!(
                "stage '{}' expects input {:?}, stream buffer holds {:?}",
                st.name,
                st.input,
                sb.front_dims()
            )));
        }
        sb.reset_peak();
        let (c_vec, k_vec, q_vec, s_vec, w_vec) = (cfg.c_vec, cfg.k_vec, cfg.q_vec, cfg.s_vec, cfg.w_vec);
        let (l_w, l_h) = (cfg.l_w, cfg.l_h);
        let l = cfg.interleave();
        let device = self.fidelity == Fidelity::DeviceFp16SharedExp;
        let acc_w = if cfg.winograd { TILE } else { q_vec };
        let (cg, kg) = (conv.channels_per_group(), conv.filters_per_group());
        let (ph, qw) = (st.conv_output.h, st.conv_output.w);
        let pad = conv.pad as isize;
        let n_kt = kg.div_ceil(k_vec);
        let n_rb = ph.div_ceil(l_h);
        let n_cb = qw.div_ceil(q_vec * l_w);
        let (n_cs, n_st, rr) = (p.n_cs, p.n_strips, conv.kernel_h);
        let wino = WinogradF43::get();

        let mut acc = vec![0.0f32; k_vec * l * acc_w];
        let mut written = vec![0u64; l];
        let mut stick = vec![0.0f32; w_vec * c_vec];
        let mut tf = vec![0.0f32; w_vec * c_vec];
        let mut tf64 = vec![0.0f64; c_vec];
        let mut fexp = vec![0i32; w_vec];
        let mut fmant = vec![0i32; w_vec * c_vec];
        let mut staging = vec![0.0f32; st.conv_output.volume()];
        let mut post = PostUnit::new(st.conv_output, st.norm, st.pool);
        let mut cache = FilterCacheArray::new(
            k_vec,
            n_cs * rr * n_st,
            (M20K_WORDS / 2) as usize,
        );
        let mut ddr = if to_ddr { vec![0.0f32; st.output.volume()] } else { Vec::new() };
        if !to_ddr {
            sb.begin_output(st.output);
        }
        let out_dims = st.output;
        let mut stats = ConvStats {
            stream_depth_budget: (sb.depth_for(st.input) + if to_ddr { 0 } else { sb.depth_for(out_dims) })
                as u64,
            ..ConvStats::default()
        };

        let mut cycle = 0u64;
        let n_tiles = conv.groups * n_kt;
        cache.prefetch(0);
        for g in 0..conv.groups {
            for kt in 0..n_kt {
                let tile = g * n_kt + kt;
                cache.swap();
                if tile + 1 < n_tiles {
                    cache.prefetch(tile + 1);
                }
                let k_lo = kt * k_vec;
                let k_hi = (k_lo + k_vec).min(kg);
                for rb in 0..n_rb {
                    for cb in 0..n_cb {
                        for cs in 0..n_cs {
                            let c0 = g * cg + cs * c_vec;
                            let n_c = c_vec.min(cg - cs * c_vec);
                            for r in 0..rr {
                                for s in 0..n_st {
                                    let first = cs == 0 && r == 0 && s == 0;
                                    let last = cs + 1 == n_cs && r + 1 == rr && s + 1 == n_st;
                                    for slot in 0..l {
                                        let issue = cycle;
                                        cycle += 1;
                                        if !first && written[slot] + l as u64 != issue {
                                            stats.accumulator_violations += 1;
                                        }
                                        written[slot] = issue;
                                        let y = rb * l_h + slot / l_w;
                                        let x0 = cb * q_vec * l_w + (slot % l_w) * q_vec;
                                        if y >= ph || x0 >= qw {
                                            continue;
                                        }
                                        sb.read_stick(
                                            c0,
                                            n_c,
                                            (y + r) as isize - pad,
                                            (x0 + s * s_vec) as isize - pad,
                                            &mut stick,
                                        );
                                        stats.stick_reads += 1;
                                        if cfg.winograd {
                                            for lane in 0..c_vec {
                                                let i: [f32; TILE] = std::array::from_fn(|j| stick[j * c_vec + lane]);
                                                let v = wino.transform_input(&i);
                                                for (j, x) in v.iter().enumerate() {
                                                    tf[j * c_vec + lane] = *x;
                                                }
                                            }
                                        } else {
                                            tf.copy_from_slice(&stick);
                                        }
                                        if device {
                                            for j in 0..w_vec {
                                                for (b, v) in tf64.iter_mut().zip(&tf[j * c_vec..(j + 1) * c_vec]) {
                                                    *b = *v as f64;
                                                }
                                                fexp[j] = encode_into(
                                                    &tf64,
                                                    MANTISSA_BITS,
                                                    &mut fmant[j * c_vec..(j + 1) * c_vec],
                                                );
                                            }
                                        }
                                        cache.read(tile);
                                        for pos in 0..k_vec {
                                            let kl = k_lo + self.pe_order[pos];
                                            if kl >= k_hi {
                                                continue;
                                            }
                                            let k = g * kg + kl;
                                            let gi = p.group(k, cs, r, s);
                                            let accs = &mut acc[(pos * l + slot) * acc_w..(pos * l + slot + 1) * acc_w];
                                            if first {
                                                accs.fill(0.0);
                                            }
                                            let dot = |fj: usize, wj: usize| -> f32 {
                                                let fo = fj * c_vec;
                                                let wo = (gi + wj) * c_vec;
                                                if device {
                                                    dot_value(
                                                        int_dot(&fmant[fo..fo + c_vec], &p.mants[wo..wo + c_vec]),
                                                        fexp[fj],
                                                        p.exps[gi + wj],
                                                        MANTISSA_BITS,
                                                    ) as f32
                                                } else {
                                                    tf[fo..fo + c_vec]
                                                        .iter()
                                                        .zip(&p.vals[wo..wo + c_vec])
                                                        .fold(0.0f32, |a, (x, y)| a + x * y)
                                                }
                                            };
                                            if cfg.winograd {
                                                for (j, a) in accs.iter_mut().enumerate() {
                                                    *a += dot(j, j);
                                                }
                                            } else {
                                                for (q, a) in accs.iter_mut().enumerate() {
                                                    let mut sum = 0.0f32;
                                                    for t in 0..s_vec {
                                                        sum += dot(q + t, t);
                                                    }
                                                    *a += sum;
                                                }
                                            }
                                            if last {
                                                let outs: Vec<f32> = if cfg.winograd {
                                                    let m: [f32; TILE] = std::array::from_fn(|j| accs[j]);
                                                    wino.output_transform(&m).to_vec()
                                                } else {
                                                    accs.to_vec()
                                                };
                                                for (q, o) in outs.iter().enumerate() {
                                                    let x = x0 + q;
                                                    if x < qw {
                                                        let mut v = o + p.bias[k];
                                                        if st.relu {
                                                            v = v.max(0.0);
                                                        }
                                                        staging[(k * ph + y) * qw + x] = v;
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let fid = self.fidelity;
                let completed = g * kg + k_hi;
                if to_ddr {
                    post.advance(&staging, completed, &mut |c, h, w, v| {
                        ddr[(c * out_dims.h + h) * out_dims.w + w] = fid.store(v);
                    });
                } else {
                    post.advance(&staging, completed, &mut |c, h, w, v| {
                        sb.write_back(c, h, w, fid.store(v));
                    });
                }
            }
        }
        if !to_ddr {
            stats.max_bank_writes = sb.max_bank_writes();
            sb.swap();
        }
        stats.cycles = cycle;
        stats.read_conflicts = sb.read_conflicts();
        stats.stray_filter_reads = cache.stray_reads();
        stats.filter_cache_peak_words = cache.peak_words();
        stats.filter_cache_capacity_words = (M20K_WORDS / 2) as usize;
        stats.stream_peak_words = sb.peak_words() as u64;
        stats.reorder_peak_channels = post.peak_held;
        stats.stalls = stats.max_bank_writes.saturating_sub(cycle);
        if let Some(n) = st.norm {
            if n.size / 2 > k_vec {
                return Err(Error::Unsupported {
                    layer: st.layer,
                    msg: format!("LRN window {} exceeds the one-tile reorder buffer", n.size),
                });
            }
        }
        Ok((stats, ddr))
    }

    /// Runs a single stride-1 convolution (with its own ReLU flag) on
    /// `input`, which is loaded into the stream buffer as stored values.
    pub fn run_conv_layer(&self, conv: &ConvSpec, input: &Tensor, params: &LayerParams) -> Result<ConvRun> {
        let (c, h, w) = input.chw()?;
        if conv.stride != 1 {
            return Err(Error::Unsupported {
                layer: 0,
                msg: format!("PE array runs stride-1 convolutions, got stride {}", conv.stride),
            });
        }
        if c != conv.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, layer expects {}",
                conv.in_channels
            )));
        }
        let (p, q) = conv
            .output_hw(h, w)
            .ok_or_else(|| Error::ShapeMismatch("filter does not fit padded input".into()))?;
        let dims = Dims::new(c, h, w);
        let out = Dims::new(conv.out_channels, p, q);
        let stage = ConvStage {
            name: "conv".into(),
            layer: 0,
            last_layer: 0,
            conv: *conv,
            fold: None,
            input: dims,
            conv_output: out,
            output: out,
            useful_macs: (conv.out_channels * p * q * conv.channels_per_group() * conv.kernel_h * conv.kernel_w)
                as u64,
            relu: conv.relu,
            norm: None,
            pool: None,
        };
        self.check_device(&DevicePlan {
            input: dims,
            stages: vec![Stage::Conv(stage.clone())],
        })?;
        let prepared = self.prepare_conv(&stage, params)?;
        let mut sb = StreamBufferArray::new(self.cfg.w_vec, self.cfg.c_vec);
        let data: Vec<f32> = input.data().iter().map(|&v| self.fidelity.store_f64(v)).collect();
        sb.load_front(dims, &data);
        let (stats, ddr) = self.execute_conv(&prepared, &mut sb, true)?;
        let output = Tensor::new(vec![out.c, out.h, out.w], ddr.iter().map(|&v| v as f64).collect())?;
        Ok(ConvRun { output, stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::VectorConfig;
    use crate::reference::direct_conv;
    use crate::test_util::rand_tensor;
    use crate::ErrorStats;

    fn spec(c: usize, k: usize, r: usize, pad: usize, groups: usize) -> ConvSpec {
        ConvSpec {
            in_channels: c,
            out_channels: k,
            kernel_h: r,
            kernel_w: r,
            stride: 1,
            pad,
            groups,
            relu: false,
        }
    }

    fn params(conv: &ConvSpec, seed: u64) -> LayerParams {
        LayerParams {
            weights: rand_tensor(
                vec![conv.out_channels, conv.channels_per_group(), conv.kernel_h, conv.kernel_w],
                seed,
            ),
            bias: rand_tensor(vec![conv.out_channels], seed + 1).into_data(),
        }
    }

    #[test]
    fn single_tile_row() {
        let cfg = VectorConfig::new(1, 1);
        let sim = Simulator::new(cfg, Fidelity::ExactFp32).unwrap();
        let conv = spec(1, 1, 1, 0, 1);
        let conv = ConvSpec { kernel_w: 3, ..conv };
        let input = Tensor::new(vec![1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = LayerParams {
            weights: Tensor::new(vec![1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap(),
            bias: vec![0.0],
        };
        let run = sim.run_conv_layer(&conv, &input, &p).unwrap();
        let want: Vec<f64> = (0..4)
            .map(|q| 0.5 * (q + 1) as f64 - (q + 2) as f64 + 2.0 * (q + 3) as f64)
            .collect();
        for (a, b) in run.output.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_reference_in_both_modes() {
        for (conv, dims) in [
            (spec(8, 12, 3, 1, 1), (8, 9, 10)),
            (spec(6, 10, 5, 2, 2), (6, 7, 13)),
            (spec(3, 5, 1, 0, 1), (3, 4, 5)),
        ] {
            let input = rand_tensor(vec![dims.0, dims.1, dims.2], 3);
            let p = params(&conv, 4);
            let want = direct_conv(&input, &p.weights, &p.bias, 1, conv.pad, conv.groups).unwrap();
            for wino in [true, false] {
                let mut cfg = VectorConfig::new(4, 8);
                cfg.winograd = wino;
                let exact = Simulator::new(cfg, Fidelity::ExactFp32)
                    .unwrap()
                    .run_conv_layer(&conv, &input, &p)
                    .unwrap();
                let e = ErrorStats::between(exact.output.data(), want.data());
                assert!(e.max_rel < 1e-5, "{conv:?} wino={wino}: {e:?}");
                assert_eq!(exact.stats.read_conflicts, 0);
                assert_eq!(exact.stats.accumulator_violations, 0);
                assert_eq!(exact.stats.stray_filter_reads, 0);

                let dev = Simulator::new(cfg, Fidelity::DeviceFp16SharedExp)
                    .unwrap()
                    .run_conv_layer(&conv, &input, &p)
                    .unwrap();
                let e = ErrorStats::between(dev.output.data(), want.data());
                assert!(e.mean_rel < 2e-3 && e.max_rel < 1e-2, "{conv:?} wino={wino}: {e:?}");
            }
        }
    }

    #[test]
    fn rejects_strided() {
        let sim = Simulator::new(VectorConfig::new(4, 8), Fidelity::ExactFp32).unwrap();
        let conv = ConvSpec {
            stride: 2,
            ..spec(4, 4, 3, 0, 1)
        };
        let p = params(&conv, 1);
        assert!(sim.run_conv_layer(&conv, &rand_tensor(vec![4, 9, 9], 2), &p).is_err());
    }
}
