//! Fully-connected mode. Each PE caches the features of `N = S_batch / K_vec`
//! images; weights stream from DDR in `C_vec`-wide chunks, `W_vec / N`
//! chunks per cycle shared by every PE, so one weight serves the whole batch.

use serde::Serialize;

use super::{Fidelity, Simulator};
use crate::arch::pe_cache_words;
use crate::error::{Error, Result};
use crate::shared_exp::{dot_value, encode_into, int_dot, MANTISSA_BITS};
use crate::topology::FcSpec;
use crate::weights::LayerParams;

#[derive(Debug, Clone, Copy)]
pub struct FcLayer<'a> {
    pub spec: FcSpec,
    pub relu: bool,
    pub params: &'a LayerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FcLayerRun {
    pub cycles: u64,
    /// Stored outputs, one vector per image of the batch.
    #[serde(skip)]
    pub outputs: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FcRun {
    pub layers: Vec<FcLayerRun>,
    pub warnings: Vec<String>,
}

impl FcRun {
    pub fn final_outputs(&self) -> &[Vec<f32>] {
        self.layers.last().map_or(&[], |l| &l.outputs)
    }
}

impl Simulator {
    /// Runs a chain of fully-connected layers on exactly `S_batch` feature
    /// vectors, which are first rounded to the storage format.
    pub fn run_fc_layers(&self, layers: &[FcLayer<'_>], batch: &[Vec<f64>]) -> Result<FcRun> {
        let x = batch
            .iter()
            .map(|v| v.iter().map(|&a| self.fidelity.store_f64(a)).collect())
            .collect();
        self.fc_batch(layers, x)
    }

    pub(crate) fn fc_batch(&self, layers: &[FcLayer<'_>], mut x: Vec<Vec<f32>>) -> Result<FcRun> {
        let s_batch = self.cfg.fc_batch();
        if x.len() != s_batch {
            return Err(Error::BatchSize {
                expected: s_batch,
                got: x.len(),
            });
        }
        let mut run = FcRun {
            layers: Vec::new(),
            warnings: Vec::new(),
        };
        for l in layers {
            let need = (self.cfg.fc_images_per_pe() * l.spec.n_in) as u64;
            if need > pe_cache_words(&self.cfg) {
                run.warnings.push(format!(
                    "{} features per PE exceed the {}-word cache",
                    need,
                    pe_cache_words(&self.cfg)
                ));
            }
            let (cycles, y) = self.fc_layer(l, &x)?;
            run.layers.push(FcLayerRun {
                cycles,
                outputs: y.clone(),
            });
            x = y;
        }
        Ok(run)
    }

    fn fc_layer(&self, l: &FcLayer<'_>, x: &[Vec<f32>]) -> Result<(u64, Vec<Vec<f32>>)> {
        let cfg = &self.cfg;
        let (n_in, n_out) = (l.spec.n_in, l.spec.n_out);
        if l.params.weights.shape() != [n_out, n_in] || l.params.bias.len() != n_out {
            return Err(Error::ShapeMismatch(format!(
                "fc weights {:?} do not match {n_in} -> {n_out}",
                l.params.weights.shape()
            )));
        }
        if let Some(v) = x.iter().find(|v| v.len() != n_in) {
            return Err(Error::ShapeMismatch(format!(
                "fc input has {} elements, layer expects {n_in}",
                v.len()
            )));
        }
        let units = cfg.fc_units_per_image();
        if units == 0 {
            return Err(Error::InvalidConfig("W_vec too small for the fc batch".into()));
        }
        let device = self.fidelity == Fidelity::DeviceFp16SharedExp;
        let (c_vec, nb) = (cfg.c_vec, x.len());
        let chunks = n_in.div_ceil(c_vec);

        // Feature caches, chunk major so a streamed chunk meets every image.
        let mut fval = vec![0.0f32; chunks * nb * c_vec];
        for (b, v) in x.iter().enumerate() {
            for (i, &a) in v.iter().enumerate() {
                fval[((i / c_vec) * nb + b) * c_vec + i % c_vec] = a;
            }
        }
        let (mut fexp, mut fmant) = (Vec::new(), Vec::new());
        if device {
            fexp = vec![0i32; chunks * nb];
            fmant = vec![0i32; chunks * nb * c_vec];
            let mut buf = vec![0.0f64; c_vec];
            for (g, e) in fexp.iter_mut().enumerate() {
                for (d, s) in buf.iter_mut().zip(&fval[g * c_vec..(g + 1) * c_vec]) {
                    *d = *s as f64;
                }
                *e = encode_into(&buf, MANTISSA_BITS, &mut fmant[g * c_vec..(g + 1) * c_vec]);
            }
        }

        let w = l.params.weights.data();
        let bias: Vec<f32> = l.params.bias.iter().map(|&b| self.fidelity.store_f64(b)).collect();
        let block = cfg.interleave() * units;
        let mut acc = vec![0.0f32; n_out * nb];
        let mut out = vec![vec![0.0f32; n_out]; nb];
        let mut wbuf = vec![0.0f64; c_vec];
        let mut wval = vec![0.0f32; c_vec];
        let mut wmant = vec![0i32; c_vec];
        let mut partial = vec![0.0f32; nb];
        let mut pending: Option<usize> = None;
        let mut pending_sum = vec![0.0f32; nb];
        let mut cycles = 0u64;
        let mut in_cycle = 0usize;

        let flush = |pending: &mut Option<usize>, sum: &mut [f32], acc: &mut [f32]| {
            if let Some(o) = pending.take() {
                for (a, s) in acc[o * nb..(o + 1) * nb].iter_mut().zip(sum.iter_mut()) {
                    *a += *s;
                    *s = 0.0;
                }
            }
        };

        for start in (0..n_out).step_by(block) {
            let end = (start + block).min(n_out);
            for j in 0..chunks {
                let lo = j * c_vec;
                let n_c = c_vec.min(n_in - lo);
                for o in start..end {
                    if in_cycle == 0 {
                        cycles += 1;
                    }
                    for lane in 0..c_vec {
                        let v = if lane < n_c {
                            self.fidelity.store_f64(w[o * n_in + lo + lane])
                        } else {
                            0.0
                        };
                        wval[lane] = v;
                        wbuf[lane] = v as f64;
                    }
                    if device {
                        let we = encode_into(&wbuf, MANTISSA_BITS, &mut wmant);
                        for (b, p) in partial.iter_mut().enumerate() {
                            let g = j * nb + b;
                            *p = dot_value(
                                int_dot(&fmant[g * c_vec..(g + 1) * c_vec], &wmant),
                                fexp[g],
                                we,
                                MANTISSA_BITS,
                            ) as f32;
                        }
                    } else {
                        for (b, p) in partial.iter_mut().enumerate() {
                            let g = j * nb + b;
                            *p = fval[g * c_vec..(g + 1) * c_vec]
                                .iter()
                                .zip(&wval)
                                .fold(0.0f32, |a, (x, y)| a + x * y);
                        }
                    }
                    // Dot units of one cycle working on the same neuron are
                    // reduced before the accumulator.
                    if pending != Some(o) {
                        flush(&mut pending, &mut pending_sum, &mut acc);
                        pending = Some(o);
                    }
                    for (s, p) in pending_sum.iter_mut().zip(&partial) {
                        *s += p;
                    }
                    in_cycle += 1;
                    if in_cycle == units {
                        in_cycle = 0;
                        flush(&mut pending, &mut pending_sum, &mut acc);
                    }
                }
            }
            flush(&mut pending, &mut pending_sum, &mut acc);
            for o in start..end {
                for (b, y) in out.iter_mut().enumerate() {
                    let mut v = acc[o * nb + b] + bias[o];
                    if l.relu {
                        v = v.max(0.0);
                    }
                    y[o] = self.fidelity.store(v);
                }
            }
        }
        Ok((cycles, out))
    }
}
