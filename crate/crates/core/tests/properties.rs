use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dla_core::arch::{check_fit, dsp_usage, filter_cache_m20k, DeviceSpec, VectorConfig};
use dla_core::dse::{select_best, sweep_grid};
use dla_core::perf::{conv_layer_perf, fc_layer_perf, quantization_terms, system_throughput, LayerKind};
use dla_core::reference::{direct_conv, softmax};
use dla_core::shared_exp::{dot, dot_exact, to_fp16, Fp16, SharedExpGroup};
use dla_core::sim::{Fidelity, Simulator};
use dla_core::topology::{builtin_alexnet, fold_strided_conv, infer_shapes, lower, ConvSpec, Dims, Layer, LayerSpec, Topology};
use dla_core::weights::LayerParams;
use dla_core::winograd::WinogradF43;
use dla_core::Tensor;

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv(c: usize, k: usize, r: usize, stride: usize, pad: usize, groups: usize) -> ConvSpec {
    ConvSpec {
        in_channels: c,
        out_channels: k,
        kernel_h: r,
        kernel_w: r,
        stride,
        pad,
        groups,
        relu: false,
    }
}

fn single_conv(spec: ConvSpec, h: usize) -> Topology {
    Topology::new("t", Dims::new(spec.in_channels, h, h), vec![Layer::new("conv", LayerSpec::Conv(spec))]).unwrap()
}

/// A stride-1 conv layer small enough to simulate quickly.
fn small_conv() -> impl Strategy<Value = (ConvSpec, usize)> {
    (1usize..=2, 1usize..=6, 1usize..=9, prop::sample::select(vec![1usize, 3, 5]), 0usize..=2, 5usize..=12).prop_map(
        |(g, cg, kg, r, pad, h)| (conv(g * cg, g * kg, r, 1, pad.min(r / 2), g), h),
    )
}

fn small_cfg() -> impl Strategy<Value = VectorConfig> {
    (prop::sample::select(vec![1usize, 2, 4]), 1usize..=4, 1usize..=3, 1usize..=3).prop_map(|(c, kk, lw, lh)| {
        VectorConfig {
            l_w: lw,
            l_h: lh,
            ..VectorConfig::new(c, 2 * c * kk)
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn shared_exp_round_trip_within_half_ulp(
        vals in prop::collection::vec(-1.0f64..1.0, 1..16),
        scale in -20i32..20,
    ) {
        let vals: Vec<f64> = vals.iter().map(|v| v * 2f64.powi(scale)).collect();
        let g = SharedExpGroup::encode(&vals).unwrap();
        if let Some(e) = g.e_max() {
            let bound = 2f64.powi(e - 17);
            for (j, v) in vals.iter().enumerate() {
                prop_assert!((g.decode(j) - v).abs() <= bound);
            }
        } else {
            prop_assert!(vals.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shared_exp_integer_dots_are_exact(
        pairs in prop::collection::vec((-15i32..=15, -15i32..=15), 1..8),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let want: i32 = pairs.iter().map(|p| p.0 * p.1).sum();
        let (ga, gb) = (SharedExpGroup::encode(&a).unwrap(), SharedExpGroup::encode(&b).unwrap());
        prop_assert_eq!(dot_exact(&ga, &gb).unwrap(), want as f64);
        prop_assert_eq!(dot(&ga, &gb, 0.0).unwrap().to_f64(), want as f64);
    }

    #[test]
    fn fp16_rounding_matches_half(v in -65504.0f64..65504.0, tiny in -1e-4f64..1e-4) {
        for x in [v, tiny] {
            prop_assert_eq!(to_fp16(x).to_bits(), half::f16::from_f64(x).to_bits(), "{}", x);
        }
    }

    #[test]
    fn topology_json_round_trip((spec, h) in small_conv(), pool in any::<bool>()) {
        let mut layers = vec![Layer::new("c", LayerSpec::Conv(spec)), Layer::new("r", LayerSpec::Relu)];
        if pool && spec.output_hw(h, h).unwrap().0 >= 2 {
            layers.push(Layer::new("p", LayerSpec::MaxPool(dla_core::topology::PoolSpec { window: 2, stride: 2 })));
        }
        let t = Topology::new("t", Dims::new(spec.in_channels, h, h), layers).unwrap();
        let back = Topology::from_json(&t.to_json()).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(infer_shapes(&t).unwrap(), infer_shapes(&back).unwrap());
    }

    #[test]
    fn fold_preserves_convolution(
        cg in 1usize..=3, k in 1usize..=4, r in 2usize..=7, f in 2usize..=4,
        pad in 0usize..=2, extra in 0usize..=6, groups in 1usize..=2, seed in any::<u64>(),
    ) {
        let spec = conv(cg * groups, k * groups, r, f, pad, groups);
        let h = r + extra;
        let dims = Dims::new(spec.in_channels, h, h + 1);
        let (folded, plan) = fold_strided_conv(&spec, dims).unwrap();
        let x = rand_tensor(vec![dims.c, dims.h, dims.w], seed);
        let w = rand_tensor(vec![spec.out_channels, cg, r, r], seed ^ 1);
        let bias = rand_tensor(vec![spec.out_channels], seed ^ 2).into_data();
        let want = direct_conv(&x, &w, &bias, f, pad, groups).unwrap();
        let got = direct_conv(&plan.fold_input(&x).unwrap(), &plan.fold_filters(&w).unwrap(), &bias, 1, 0, groups).unwrap();
        prop_assert_eq!(got.shape(), want.shape());
        let scale = want.max_abs().max(1e-30);
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * scale);
        }
        let (p, q) = spec.output_hw(dims.h, dims.w).unwrap();
        let useful = (spec.out_channels * p * q * cg * r * r) as u64;
        let plan_t = Topology::new("s", dims, vec![Layer::new("c", LayerSpec::Conv(spec))]).unwrap();
        let dp = lower(&plan_t).unwrap();
        let st = dp.conv_stages().next().unwrap();
        prop_assert_eq!(st.useful_macs, useful);
        prop_assert_eq!(st.conv, folded);
    }

    #[test]
    fn conv_linearity(seed in any::<u64>(), a in -4.0f64..4.0) {
        let x = rand_tensor(vec![3, 7, 6], seed);
        let w = rand_tensor(vec![4, 3, 3, 3], seed ^ 5);
        let zero = vec![0.0; 4];
        let y = direct_conv(&x, &w, &zero, 1, 1, 1).unwrap();
        let ya = direct_conv(&x.map(|v| a * v), &w, &zero, 1, 1, 1).unwrap();
        let scale = y.max_abs() * a.abs();
        for (p, q) in ya.data().iter().zip(y.data()) {
            prop_assert!((p - a * q).abs() <= 1e-12 * scale.max(1e-300));
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-15.0f64..15.0, 1..40)) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x < 1.0 || v.len() == 1 && x == 1.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn winograd_is_bilinear(
        i in prop::array::uniform6(-1.0f64..1.0), j in prop::array::uniform6(-1.0f64..1.0),
        f in prop::array::uniform3(-1.0f64..1.0), g in prop::array::uniform3(-1.0f64..1.0),
        a in -3.0f64..3.0,
    ) {
        let w = WinogradF43::get();
        let ij: [f64; 6] = std::array::from_fn(|n| i[n] + a * j[n]);
        let fg: [f64; 3] = std::array::from_fn(|n| f[n] + a * g[n]);
        let (yi, yj) = (w.conv_tile(&i, &f), w.conv_tile(&j, &f));
        let (yf, yg) = (w.conv_tile(&i, &f), w.conv_tile(&i, &g));
        let (lin_i, lin_f) = (w.conv_tile(&ij, &f), w.conv_tile(&i, &fg));
        for n in 0..4 {
            prop_assert!((lin_i[n] - (yi[n] + a * yj[n])).abs() < 1e-12);
            prop_assert!((lin_f[n] - (yf[n] + a * yg[n])).abs() < 1e-12);
        }
    }

    #[test]
    fn perf_identities((spec, h) in small_conv(), cfg in small_cfg(), ddr in 1u64..128) {
        let dev = DeviceSpec { ddr_bytes_per_cycle: ddr, ..DeviceSpec::arria10_1150() };
        let plan = lower(&single_conv(spec, h)).unwrap();
        let st = plan.conv_stages().next().unwrap();
        let next = 5_000u64 * ddr;
        let l = conv_layer_perf(&cfg, st, next, &dev).unwrap();
        prop_assert_eq!(l.n_cycles * cfg.conv_macs_per_cycle(), l.padded_macs);
        let ratio = (l.byte_req as f64 / l.byte_ddr as f64).max(1.0);
        prop_assert_eq!(l.n_real / l.n_cycles as f64, ratio);
        let q = quantization_terms(&cfg, st).unwrap();
        prop_assert!((q.product() - l.dsp_eff).abs() < 1e-12);
        // Compute conservation: effective throughput over the layer's run
        // time accounts for every useful MAC exactly once.
        let work = l.eff_gflops * 1e9 * l.n_cycles as f64 / dev.fmax_hz();
        prop_assert!((work - 2.0 * l.useful_macs as f64).abs() <= 1e-9 * work);
    }

    #[test]
    fn row_interleave_never_beats_unit((spec, h) in small_conv(), lh in 1usize..=8) {
        let plan = lower(&single_conv(spec, h)).unwrap();
        let st = plan.conv_stages().next().unwrap();
        let base = VectorConfig { l_h: 1, ..VectorConfig::new(4, 8) };
        let p1 = quantization_terms(&base, st).unwrap().p_eff;
        let pl = quantization_terms(&VectorConfig { l_h: lh, ..base }, st).unwrap().p_eff;
        prop_assert_eq!(p1, 1.0);
        prop_assert!(pl <= p1);
    }

    #[test]
    fn dsp_usage_monotone(c in 1usize..=32, k in 1usize..=128, q in 1usize..=6) {
        let wino = VectorConfig::new(c, k);
        prop_assert!(dsp_usage(&VectorConfig::new(c + 1, k)) >= dsp_usage(&wino));
        prop_assert!(dsp_usage(&VectorConfig::new(c, k + 1)) >= dsp_usage(&wino));
        let direct = |q: usize| VectorConfig { q_vec: q, s_vec: 3, w_vec: q + 2, ..VectorConfig::new(c, k).direct() };
        prop_assert!(dsp_usage(&direct(q + 1)) >= dsp_usage(&direct(q)));
        prop_assert_eq!(filter_cache_m20k(&VectorConfig::new(c, 2 * k)), 2 * filter_cache_m20k(&wino));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feasibility_monotone_in_k(dsps in 100u64..3000, m20k in 200u64..4000) {
        let dev = DeviceSpec { dsp_count: dsps, m20k_count: m20k, ..DeviceSpec::arria10_1150() };
        let plan = lower(&builtin_alexnet()).unwrap();
        for c in [4usize, 8, 16] {
            for k in (8..=96).step_by(8) {
                let a = check_fit(&VectorConfig::new(c, k), &plan, &dev).feasible;
                let b = check_fit(&VectorConfig::new(c, 2 * k), &plan, &dev).feasible;
                prop_assert!(a || !b, "({c},{k}) infeasible but ({c},{}) feasible", 2 * k);
            }
        }
    }

    #[test]
    fn best_point_dominates(dsps in 300u64..3000, m20k in 500u64..4000) {
        let dev = DeviceSpec { dsp_count: dsps, m20k_count: m20k, ..DeviceSpec::arria10_1150() };
        let plan = lower(&builtin_alexnet()).unwrap();
        let pts = sweep_grid(&plan, &dev, &VectorConfig::new(8, 48), &[4, 8, 16], &(1..=12).map(|i| 8 * i).collect::<Vec<_>>(), 0.16).unwrap();
        for p in &pts {
            prop_assert_eq!(p.perf.is_some(), p.explored && p.resources.feasible);
        }
        match select_best(&pts) {
            Ok(best) => {
                for p in pts.iter().filter(|p| p.perf.is_some()) {
                    prop_assert!(best.img_per_s_system() >= p.img_per_s_system());
                }
            }
            Err(_) => prop_assert!(pts.iter().all(|p| p.perf.is_none())),
        }
    }

    #[test]
    fn fc_conservation(c in prop::sample::select(vec![4usize, 8, 16]), kk in 1usize..=6, n_in in 1usize..5000, n_out in 1usize..3000) {
        let cfg = VectorConfig::new(c, 2 * c * kk);
        let dev = DeviceSpec::arria10_1150();
        let t = Topology::new(
            "fc",
            Dims::flat(n_in),
            vec![Layer::new("fc", LayerSpec::FullyConnected(dla_core::topology::FcSpec { n_in, n_out, relu: false }))],
        ).unwrap();
        let plan = lower(&t).unwrap();
        let l = fc_layer_perf(&cfg, plan.fc_stages().next().unwrap(), &dev).unwrap();
        let work = l.act_gflops * 1e9 * l.n_cycles as f64 / dev.fmax_hz();
        prop_assert!((work - 2.0 * l.useful_macs as f64).abs() <= 1e-9 * work);
        prop_assert_eq!(l.n_real / l.n_cycles as f64, (l.byte_req as f64 / l.byte_ddr as f64).max(1.0));
        let sp = system_throughput(&cfg, &plan, &dev, 0.16).unwrap();
        prop_assert_eq!(sp.layers[0].kind, LayerKind::Fc);
    }

    #[test]
    fn simulator_dataflow_properties((spec, h) in small_conv(), cfg in small_cfg(), seed in any::<u64>()) {
        let x = rand_tensor(vec![spec.in_channels, h, h], seed);
        let params = LayerParams {
            weights: rand_tensor(vec![spec.out_channels, spec.channels_per_group(), spec.kernel_h, spec.kernel_w], seed ^ 7),
            bias: rand_tensor(vec![spec.out_channels], seed ^ 8).into_data(),
        };
        let sim = Simulator::new(cfg, Fidelity::ExactFp32).unwrap();
        let base = sim.run_conv_layer(&spec, &x, &params).unwrap();
        let s = &base.stats;
        prop_assert_eq!(s.read_conflicts + s.accumulator_violations + s.stray_filter_reads + s.stalls, 0);
        prop_assert!(s.stream_peak_words <= s.stream_depth_budget);

        let mut order: Vec<usize> = (0..cfg.k_vec).collect();
        order.rotate_left((seed % cfg.k_vec as u64) as usize);
        order.swap(0, cfg.k_vec - 1);
        let permuted = sim.clone().with_pe_order(order).unwrap().run_conv_layer(&spec, &x, &params).unwrap();
        prop_assert_eq!(&permuted.output, &base.output);

        let flat = Simulator::new(VectorConfig { l_w: 1, l_h: 1, ..cfg }, Fidelity::ExactFp32).unwrap();
        let unit = flat.run_conv_layer(&spec, &x, &params).unwrap();
        prop_assert_eq!(&unit.output, &base.output);
    }
}

#[test]
fn fp16_decoding_matches_half_for_every_pattern() {
    for bits in 0..=u16::MAX {
        let ours = Fp16::from_bits(bits).to_f64();
        let theirs = half::f16::from_bits(bits).to_f64();
        assert!(ours == theirs || ours.is_nan() && theirs.is_nan(), "{bits:#06x}");
    }
}

#[test]
fn narrower_mantissas_never_reduce_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let suite: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0) * 2f64.powi(rng.random_range(-8..8))).collect())
        .collect();
    let err = |bits: u32| -> f64 {
        suite
            .iter()
            .map(|v| {
                let g = SharedExpGroup::encode_with_bits(v, bits).unwrap();
                v.iter().enumerate().map(|(j, x)| (g.decode(j) - x).abs()).sum::<f64>()
            })
            .sum()
    };
    let errs: Vec<f64> = (3..=24).map(err).collect();
    for w in errs.windows(2) {
        assert!(w[0] >= w[1], "{errs:?}");
    }
}

#[test]
fn shared_exp_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let run = || {
            let (ga, gb) = (SharedExpGroup::encode(&a).unwrap(), SharedExpGroup::encode(&b).unwrap());
            (ga.clone(), dot(&ga, &gb, 0.5).unwrap().to_bits(), dot_exact(&ga, &gb).unwrap().to_bits())
        };
        assert_eq!(run(), run());
    }
}
