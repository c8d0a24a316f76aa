//! Independent oracles for the analytical models and the reference kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dla_core::arch::{stream_buffer_depths, DeviceSpec, VectorConfig};
use dla_core::perf::{conv_layer_perf, dsp_efficiency};
use dla_core::reference::{direct_conv, fully_connected};
use dla_core::sim::StreamBufferArray;
use dla_core::topology::{builtin_alexnet, lower, ConvSpec, ConvStage, Dims, Layer, LayerSpec, Topology};
use dla_core::Tensor;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Walks the PE-array schedule slot by slot. Returns (cycles, useful MACs,
/// issued MACs); `per_mac` enumerates every multiplier lane.
fn trip_count(cfg: &VectorConfig, st: &ConvStage, per_mac: bool) -> (u64, u64, u64) {
    let c = &st.conv;
    let (kg, cg) = (c.filters_per_group(), c.channels_per_group());
    let (p_out, q_out) = (st.conv_output.h, st.conv_output.w);
    let (mut cycles, mut useful, mut issued) = (0u64, 0u64, 0u64);
    let lanes = (cfg.k_vec * cfg.c_vec * cfg.q_vec * cfg.s_vec) as u64;
    let count = |lo: usize, n: usize, lim: usize| (0..n).filter(|i| lo + i < lim).count() as u64;
    for _g in 0..c.groups {
        let mut kt = 0;
        while kt * cfg.k_vec < kg {
            let mut rb = 0;
            while rb * cfg.l_h < p_out {
                let mut cb = 0;
                while cb * cfg.l_w * cfg.q_vec < q_out {
                    let mut cs = 0;
                    while cs * cfg.c_vec < cg {
                        for _r in 0..c.kernel_h {
                            let mut sp = 0;
                            while sp * cfg.s_vec < c.kernel_w {
                                for lh in 0..cfg.l_h {
                                    for lw in 0..cfg.l_w {
                                        cycles += 1;
                                        issued += lanes;
                                        let p = rb * cfg.l_h + lh;
                                        let q0 = (cb * cfg.l_w + lw) * cfg.q_vec;
                                        if p >= p_out {
                                            continue;
                                        }
                                        if per_mac {
                                            for k in 0..cfg.k_vec {
                                                for ch in 0..cfg.c_vec {
                                                    for q in 0..cfg.q_vec {
                                                        for s in 0..cfg.s_vec {
                                                            if kt * cfg.k_vec + k < kg
                                                                && cs * cfg.c_vec + ch < cg
                                                                && q0 + q < q_out
                                                                && sp * cfg.s_vec + s < c.kernel_w
                                                            {
                                                                useful += 1;
                                                            }
                                                        }
                                                    }
                                                }
                                            }
                                        } else {
                                            useful += count(kt * cfg.k_vec, cfg.k_vec, kg)
                                                * count(cs * cfg.c_vec, cfg.c_vec, cg)
                                                * count(q0, cfg.q_vec, q_out)
                                                * count(sp * cfg.s_vec, cfg.s_vec, c.kernel_w);
                                        }
                                    }
                                }
                                sp += 1;
                            }
                        }
                        cs += 1;
                    }
                    cb += 1;
                }
                rb += 1;
            }
            kt += 1;
        }
    }
    (cycles, useful, issued)
}

fn single_conv(spec: ConvSpec, h: usize, w: usize) -> ConvStage {
    let t = Topology::new(
        "t",
        Dims::new(spec.in_channels, h, w),
        vec![Layer::new("conv", LayerSpec::Conv(spec))],
    )
    .unwrap();
    lower(&t).unwrap().conv_stages().next().unwrap().clone()
}

#[test]
fn alexnet_conv2_trip_count() {
    let cfg = VectorConfig::new(8, 48);
    let plan = lower(&builtin_alexnet()).unwrap();
    let st = plan.conv_stages().find(|s| s.name == "conv2").unwrap();
    let (cycles, useful, issued) = trip_count(&cfg, st, false);
    assert_eq!(cycles, 77_760);
    assert_eq!(useful, st.useful_macs);
    let perf = conv_layer_perf(&cfg, st, 0, &DeviceSpec::arria10_1150()).unwrap();
    assert_eq!(perf.n_cycles, cycles);
    assert_eq!(perf.padded_macs, issued);
    assert!((dsp_efficiency(&cfg, st).unwrap() - useful as f64 / issued as f64).abs() < 1e-12);
}

#[test]
fn efficiency_matches_brute_force_on_small_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        let groups = rng.random_range(1..=2);
        let spec = ConvSpec {
            in_channels: groups * rng.random_range(1..=11),
            out_channels: groups * rng.random_range(1..=13),
            kernel_h: rng.random_range(1..=5),
            kernel_w: rng.random_range(1..=7),
            stride: 1,
            pad: rng.random_range(0..=1),
            groups,
            relu: false,
        };
        let h = spec.kernel_h + rng.random_range(0..9);
        let w = spec.kernel_w + rng.random_range(0..13);
        let st = single_conv(spec, h, w);
        let c_vec = [1, 2, 4][rng.random_range(0..3)];
        let cfg = VectorConfig {
            l_w: rng.random_range(1..=3),
            l_h: rng.random_range(1..=4),
            ..VectorConfig::new(c_vec, 2 * c_vec * rng.random_range(1..=3))
        };
        let (cycles, useful, issued) = trip_count(&cfg, &st, true);
        let perf = conv_layer_perf(&cfg, &st, 0, &DeviceSpec::arria10_1150()).unwrap();
        assert_eq!(perf.n_cycles, cycles, "{spec:?} {cfg:?}");
        assert_eq!(useful, st.useful_macs, "{spec:?}");
        let eff = dsp_efficiency(&cfg, &st).unwrap();
        assert!((eff - useful as f64 / issued as f64).abs() < 1e-12, "{spec:?} {cfg:?}");
    }
}

#[test]
fn fully_connected_is_a_full_window_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (c, h, w, k) = (
            rng.random_range(1..6),
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..9),
        );
        let x = rand_tensor(vec![c, h, w], &mut rng);
        let filters = rand_tensor(vec![k, c, h, w], &mut rng);
        let bias: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let conv = direct_conv(&x, &filters, &bias, 1, 0, 1).unwrap();
        assert_eq!(conv.shape(), [k, 1, 1]);
        let fc = fully_connected(x.data(), &filters.reshape(vec![k, c * h * w]).unwrap(), &bias).unwrap();
        for (a, b) in conv.data().iter().zip(&fc) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn stream_buffer_depth_matches_bank_layout() {
    let cfg = VectorConfig::new(8, 48);
    let plan = lower(&builtin_alexnet()).unwrap();
    let depths = stream_buffer_depths(&cfg, &plan);
    let sb = StreamBufferArray::new(cfg.w_vec, cfg.c_vec);
    for (st, &(d_in, d_out)) in plan.conv_stages().zip(&depths) {
        assert_eq!(sb.depth_for(st.input) as u64, d_in, "{}", st.name);
        if d_out > 0 {
            assert_eq!(sb.depth_for(st.output) as u64, d_out, "{}", st.name);
        }
    }
    assert_eq!(depths[0], (3249, 1458));
}
