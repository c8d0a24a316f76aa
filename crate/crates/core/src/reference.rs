//! FP64 reference implementations of every layer type. These are the ground
//! truth the simulator is diffed against; clarity over speed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{ConvSpec, LayerSpec, NormSpec, PoolSpec, Topology};
use crate::weights::Weights;

/// Grouped 2-D cross-correlation with zero padding and per-channel bias.
///
/// `filters` is `K x C/g x R x S`; `input` is `C x H x W`.
pub fn direct_conv(
    input: &Tensor,
    filters: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let &[k, cg, r, s] = filters.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "filters must be 4-d, got {:?}",
            filters.shape()
        )));
    };
    if groups == 0 || c % groups != 0 || k % groups != 0 || cg != c / groups {
        return Err(Error::ShapeMismatch(format!(
            "filters {:?} incompatible with {c} input channels in {groups} groups",
            filters.shape()
        )));
    }
    if bias.len() != k {
        return Err(Error::ShapeMismatch(format!("bias has {} entries, K={k}", bias.len())));
    }
    let spec = ConvSpec {
        in_channels: c,
        out_channels: k,
        kernel_h: r,
        kernel_w: s,
        stride,
        pad,
        groups,
        relu: false,
    };
    let (p, q) = spec
        .output_hw(h, w)
        .ok_or_else(|| Error::ShapeMismatch("filter does not fit padded input".into()))?;
    let kg = k / groups;
    let x = input.data();
    let wt = filters.data();
    let mut out = vec![0.0; k * p * q];
    for ko in 0..k {
        let g = ko / kg;
        let plane = &mut out[ko * p * q..(ko + 1) * p * q];
        plane.fill(bias[ko]);
        for ci in 0..cg {
            let xc = &x[(g * cg + ci) * h * w..(g * cg + ci + 1) * h * w];
            for ri in 0..r {
                for si in 0..s {
                    let wv = wt[((ko * cg + ci) * r + ri) * s + si];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..p {
                        let iy = (y * stride + ri) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xc[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[y * q..(y + 1) * q];
                        // Output columns whose input column lies inside the row.
                        let off = si as isize - pad as isize;
                        let x_lo = if off < 0 {
                            ((-off) as usize).div_ceil(stride)
                        } else {
                            0
                        };
                        let x_hi = if (w as isize) > off {
                            ((w as isize - off) as usize).div_ceil(stride).min(q)
                        } else {
                            0
                        };
                        if x_lo >= x_hi {
                            continue;
                        }
                        let ix0 = ((x_lo * stride) as isize + off) as usize;
                        if stride == 1 {
                            for (o, v) in orow[x_lo..x_hi].iter_mut().zip(&row[ix0..]) {
                                *o += wv * v;
                            }
                        } else {
                            for (o, v) in orow[x_lo..x_hi].iter_mut().zip(row[ix0..].iter().step_by(stride)) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![k, p, q], out)
}

/// `W v + b` for `W` of shape `n_out x n_in`.
pub fn fully_connected(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let (n_out, n_in) = fc_dims(weights, bias)?;
    if input.len() != n_in {
        return Err(Error::ShapeMismatch(format!(
            "fc input has {} elements, weights expect {n_in}",
            input.len()
        )));
    }
    let w = weights.data();
    Ok((0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            row.iter().zip(input).fold(bias[o], |acc, (a, b)| acc + a * b)
        })
        .collect())
}

/// Batched form `W V + b`: `input` is `n_in x b`, the result `n_out x b`.
pub fn fully_connected_batch(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (n_out, n_in) = fc_dims(weights, bias)?;
    let &[rows, b] = input.shape() else {
        return Err(Error::ShapeMismatch("batched fc input must be n_in x b".into()));
    };
    if rows != n_in {
        return Err(Error::ShapeMismatch(format!(
            "batched fc input has {rows} rows, weights expect {n_in}"
        )));
    }
    let v = input.data();
    let w = weights.data();
    let mut out = vec![0.0; n_out * b];
    for o in 0..n_out {
        let acc = &mut out[o * b..(o + 1) * b];
        acc.fill(bias[o]);
        for i in 0..n_in {
            let wv = w[o * n_in + i];
            for (a, x) in acc.iter_mut().zip(&v[i * b..(i + 1) * b]) {
                *a += wv * x;
            }
        }
    }
    Tensor::new(vec![n_out, b], out)
}

fn fc_dims(weights: &Tensor, bias: &[f64]) -> Result<(usize, usize)> {
    let &[n_out, n_in] = weights.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "fc weights must be 2-d, got {:?}",
            weights.shape()
        )));
    };
    if bias.len() != n_out {
        return Err(Error::ShapeMismatch(format!(
            "bias has {} entries, n_out={n_out}",
            bias.len()
        )));
    }
    Ok((n_out, n_in))
}

/// Cross-channel local response normalization; the window is clipped at the
/// channel boundaries.
pub fn lrn_norm(input: &Tensor, norm: &NormSpec) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let half = norm.size / 2;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let lo = ch.saturating_sub(half);
        let hi = (ch + half).min(c - 1);
        for i in 0..plane {
            let sum_sq: f64 = (lo..=hi).map(|cc| x[cc * plane + i].powi(2)).sum();
            let scale = norm.k + norm.alpha / norm.size as f64 * sum_sq;
            out[ch * plane + i] = x[ch * plane + i] / scale.powf(norm.beta);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn max_pool(input: &Tensor, pool: &PoolSpec) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (p, q) = pool
        .output_hw(h, w)
        .ok_or_else(|| Error::ShapeMismatch(format!("pool window does not fit {h}x{w}")))?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * p * q);
    for ch in 0..c {
        for y in 0..p {
            for xo in 0..q {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..pool.window {
                    for dx in 0..pool.window {
                        m = m.max(x[(ch * h + y * pool.stride + dy) * w + xo * pool.stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, p, q], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Max-subtracted softmax.
pub fn softmax(input: &[f64]) -> Vec<f64> {
    let m = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = input.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Runs every layer at FP64 and returns each layer's output.
pub fn run_reference(t: &Topology, weights: &Weights, input: &Tensor) -> Result<Vec<Tensor>> {
    if input.is_empty() {
        return Err(Error::ShapeMismatch("empty input".into()));
    }
    let expected = [t.input.c, t.input.h, t.input.w];
    if input.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "input shape {:?}, topology expects {expected:?}",
            input.shape()
        )));
    }
    let mut outs: Vec<Tensor> = Vec::with_capacity(t.layers.len());
    for layer in &t.layers {
        let x = outs.last().unwrap_or(input);
        let y = match &layer.spec {
            LayerSpec::Conv(c) => {
                let p = weights.get(&layer.name)?;
                let y = direct_conv(x, &p.weights, &p.bias, c.stride, c.pad, c.groups)?;
                if c.relu {
                    relu(&y)
                } else {
                    y
                }
            }
            LayerSpec::FullyConnected(f) => {
                let p = weights.get(&layer.name)?;
                let y = Tensor::vector(fully_connected(x.data(), &p.weights, &p.bias)?);
                if f.relu {
                    relu(&y)
                } else {
                    y
                }
            }
            LayerSpec::MaxPool(p) => max_pool(x, p)?,
            LayerSpec::Norm(n) => lrn_norm(x, n)?,
            LayerSpec::Relu => relu(x),
            LayerSpec::Softmax => Tensor::vector(softmax(x.data())),
        };
        outs.push(y);
    }
    Ok(outs)
}
