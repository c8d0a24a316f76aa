//! `dla`: shape checks, performance model, design-space sweep and dataflow
//! simulation for the Winograd CNN accelerator.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dla_core::arch::{check_fit, DeviceSpec, Resource, VectorConfig};
use dla_core::dlat::{self, DType};
use dla_core::dse::{default_ranges, select_best, sweep_grid, to_csv};
use dla_core::perf::{gflops_report, system_throughput, SystemPerf, SYSTEM_DERATE};
use dla_core::sim::{Fidelity, SimResult, Simulator};
use dla_core::topology::{builtin_alexnet, infer_shapes, load_topology, lower, Topology};
use dla_core::weights::{random_images, random_weights};

const EXIT_INPUT: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_FIDELITY: u8 = 4;

#[derive(Parser)]
#[command(name = "dla", version, about = "Winograd CNN accelerator models and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a topology and print its layer shapes
    Validate {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Per-layer efficiency and system throughput for one configuration
    Model {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        point: PointArgs,
        /// Fraction of device throughput lost at system level
        #[arg(long, default_value_t = SYSTEM_DERATE)]
        derate: f64,
    },
    /// Sweep C_vec x K_vec and pick the fastest feasible point
    Dse {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        arch: ArchArgs,
        /// C_vec values to sweep
        #[arg(long = "cvec", value_delimiter = ',')]
        cvecs: Vec<usize>,
        /// K_vec values to sweep
        #[arg(long = "kvec", value_delimiter = ',')]
        kvecs: Vec<usize>,
        #[arg(long, default_value_t = SYSTEM_DERATE)]
        derate: f64,
    },
    /// Run images through the simulator and compare with the FP64 oracle
    Simulate {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        point: PointArgs,
        #[arg(long, default_value = "exact_fp32")]
        fidelity: Fidelity,
        /// Seed for the synthetic weights and images
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of synthetic images
        #[arg(long, default_value_t = 1)]
        images: usize,
        /// Manifest of DLAT weight (and optional image) files
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also write the weights and images used as a DLAT manifest here
        #[arg(long)]
        save_inputs: Option<PathBuf>,
    },
}

#[derive(Args)]
struct IoArgs {
    /// Topology JSON file, or `alexnet`
    #[arg(long, default_value = "alexnet")]
    topology: String,
    /// Device JSON file, or `arria10`
    #[arg(long, default_value = "arria10")]
    device: String,
    /// Directory for text and JSON reports
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of text
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value_t = 4)]
    qvec: usize,
    #[arg(long, default_value_t = 6)]
    wvec: usize,
    #[arg(long, default_value_t = 2)]
    lw: usize,
    #[arg(long, default_value_t = 3)]
    lh: usize,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    winograd: OnOff,
}

#[derive(Args)]
struct PointArgs {
    #[arg(long, default_value_t = 8)]
    cvec: usize,
    #[arg(long, default_value_t = 48)]
    kvec: usize,
    #[command(flatten)]
    arch: ArchArgs,
}

impl ArchArgs {
    fn config(&self, c_vec: usize, k_vec: usize) -> VectorConfig {
        VectorConfig {
            q_vec: self.qvec,
            w_vec: self.wvec,
            s_vec: (self.wvec + 1).saturating_sub(self.qvec),
            l_w: self.lw,
            l_h: self.lh,
            winograd: self.winograd == OnOff::On,
            ..VectorConfig::new(c_vec, k_vec)
        }
    }
}

impl PointArgs {
    fn config(&self) -> VectorConfig {
        self.arch.config(self.cvec, self.kvec)
    }
}

impl IoArgs {
    fn topology(&self) -> Result<Topology> {
        if self.topology == "alexnet" {
            return Ok(builtin_alexnet());
        }
        Ok(load_topology(&self.topology)?)
    }

    fn device(&self) -> Result<DeviceSpec> {
        match self.device.as_str() {
            "arria10" | "arria10_1150" => Ok(DeviceSpec::arria10_1150()),
            path => Ok(DeviceSpec::load(path)?),
        }
    }

    /// Prints `text` or `json` and writes both under `--out`.
    fn emit(&self, stem: &str, text: &str, json: &str) -> Result<()> {
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_file(&dir.join(format!("{stem}.txt")), text)?;
            write_file(&dir.join(format!("{stem}.json")), json)?;
        }
        print!("{}", if self.json { json } else { text });
        Ok(())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn cmd_validate(io: &IoArgs) -> Result<u8> {
    let t = io.topology()?;
    let shapes = infer_shapes(&t)?;
    let mut text = format!("topology {} ({} layers)\n", t.name, t.layers.len());
    let _ = writeln!(
        text,
        "{:>3} {:<10} {:<8} {:>16} {:>16} {:>14}",
        "#", "layer", "kind", "input", "output", "macs"
    );
    for (i, (l, s)) in t.layers.iter().zip(&shapes.layers).enumerate() {
        let dims = |d: dla_core::topology::Dims| format!("{}x{}x{}", d.c, d.h, d.w);
        let _ = writeln!(
            text,
            "{:>3} {:<10} {:<8} {:>16} {:>16} {:>14}",
            i,
            l.name,
            l.spec.kind_name(),
            dims(s.input),
            dims(s.output),
            s.macs
        );
    }
    let _ = writeln!(text, "total conv MACs: {}", shapes.total_conv_macs(&t));
    io.emit("shapes", &text, &to_json(&shapes))?;
    Ok(0)
}

fn model_text(cfg: &VectorConfig, perf: &SystemPerf, dsps: u64, m20k: u64) -> String {
    let mut s = format!(
        "C_vec={} K_vec={} Q_vec={} W_vec={} L_w={} L_h={} winograd={}\n",
        cfg.c_vec, cfg.k_vec, cfg.q_vec, cfg.w_vec, cfg.l_w, cfg.l_h, cfg.winograd
    );
    let _ = writeln!(s, "DSP blocks: {dsps}  M20Ks: {m20k}\n");
    s.push_str(&gflops_report(perf).to_text());
    let _ = writeln!(s, "\ncycles/image:  {:.2}", perf.cycles_per_image);
    let _ = writeln!(s, "img/s device:  {:.1}", perf.img_per_s_device);
    let _ = writeln!(
        s,
        "img/s system:  {:.1} (derate {:.2})",
        perf.img_per_s_system, perf.derate
    );
    let _ = writeln!(s, "img/s/W:       {:.2}", perf.img_per_s_per_watt);
    s
}

fn cmd_model(io: &IoArgs, point: &PointArgs, derate: f64) -> Result<u8> {
    let t = io.topology()?;
    let dev = io.device()?;
    let cfg = point.config();
    cfg.validate()?;
    let plan = lower(&t)?;
    let r = check_fit(&cfg, &plan, &dev);
    if let Some(res) = r.limiting_resource {
        eprintln!(
            "infeasible: {} budget exceeded ({} DSPs of {}, {} M20Ks of {})",
            match res {
                Resource::Dsp => "DSP",
                Resource::M20k => "M20K",
            },
            r.n_dsps,
            dev.dsp_count,
            r.m20k_total(),
            dev.m20k_count
        );
        if io.json {
            print!("{}", to_json(&r));
        }
        return Ok(EXIT_INFEASIBLE);
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    let perf = system_throughput(&cfg, &plan, &dev, derate)?;
    let text = model_text(&cfg, &perf, r.n_dsps, r.m20k_total());
    let json = to_json(&serde_json::json!({
        "config": cfg,
        "resources": r,
        "performance": perf,
        "gflops": gflops_report(&perf),
    }));
    io.emit("model", &text, &json)?;
    Ok(0)
}

fn cmd_dse(io: &IoArgs, arch: &ArchArgs, cvecs: &[usize], kvecs: &[usize], derate: f64) -> Result<u8> {
    let t = io.topology()?;
    let dev = io.device()?;
    let plan = lower(&t)?;
    let (dc, dk) = default_ranges();
    let cvecs = if cvecs.is_empty() { &dc } else { cvecs };
    let kvecs = if kvecs.is_empty() { &dk } else { kvecs };
    let points = sweep_grid(&plan, &dev, &arch.config(cvecs[0].max(1), kvecs[0].max(1)), cvecs, kvecs, derate)?;
    let csv = to_csv(&points);
    if let Some(dir) = &io.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join("dse.csv"), &csv)?;
    }
    let best = match select_best(&points) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("{e}");
            if io.out.is_none() {
                print!("{csv}");
            }
            return Ok(EXIT_INFEASIBLE);
        }
    };
    let summary = format!(
        "best: C_vec={} K_vec={} img/s system {:.1} device {:.1} ({} DSPs, {} M20Ks)\n",
        best.cfg.c_vec,
        best.cfg.k_vec,
        best.img_per_s_system(),
        best.img_per_s_device(),
        best.resources.n_dsps,
        best.resources.m20k_total()
    );
    let json = to_json(best);
    if let Some(dir) = &io.out {
        write_file(&dir.join("best.json"), &json)?;
    }
    if io.json {
        print!("{json}");
    } else {
        print!("{csv}{summary}");
    }
    Ok(0)
}

fn sim_text(r: &SimResult) -> String {
    let mut s = format!(
        "fidelity {}  images {} (padded {})  fc batches {}\n",
        r.fidelity, r.images, r.padded_images, r.fc_batches
    );
    let _ = writeln!(
        s,
        "{:<10} {:<7} {:>12} {:>7} {:>11} {:>11} {:>11}",
        "layer", "kind", "cycles", "stalls", "max_abs", "max_rel", "mean_rel"
    );
    for l in &r.layers {
        let _ = writeln!(
            s,
            "{:<10} {:<7} {:>12} {:>7} {:>11.3e} {:>11.3e} {:>11.3e}",
            l.name, l.kind, l.cycles, l.stalls, l.errors.max_abs, l.errors.max_rel, l.errors.mean_rel
        );
    }
    let _ = writeln!(s, "total cycles: {}", r.total_cycles);
    let _ = writeln!(s, "cycles/image: {:.2}", r.cycles_per_image);
    let _ = writeln!(s, "top-1 agreement: {}/{}", r.argmax_agreement, r.images);
    let _ = writeln!(s, "final mean abs error: {:.3e}", r.final_mean_abs_err);
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    io: &IoArgs,
    point: &PointArgs,
    fidelity: Fidelity,
    seed: u64,
    n_images: usize,
    weights: Option<&Path>,
    save_inputs: Option<&Path>,
) -> Result<u8> {
    let t = io.topology()?;
    let dev = io.device()?;
    let cfg = point.config();
    let (w, mut images) = match weights {
        Some(m) => dlat::load_manifest(m)?,
        None => (random_weights(&t, seed), Vec::new()),
    };
    if images.is_empty() {
        images = random_images(t.input, n_images, seed.wrapping_add(1));
    }
    if let Some(dir) = save_inputs {
        dlat::save_manifest(dir, &w, &images, DType::F64)?;
    }
    let sim = Simulator::new(cfg, fidelity)?.with_device(dev);
    let r = sim.run_network(&t, &w, &images)?;
    for warn in &r.warnings {
        eprintln!("warning: {warn}");
    }
    io.emit("simulate", &sim_text(&r), &r.to_json())?;
    let verdict = r.verdict();
    if verdict.passed {
        Ok(0)
    } else {
        for f in &verdict.failures {
            eprintln!("fidelity check failed: {f}");
        }
        Ok(EXIT_FIDELITY)
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<dla_core::Error>() {
        Some(dla_core::Error::Infeasible(_) | dla_core::Error::NoFeasiblePoint) => EXIT_INFEASIBLE,
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Validate { io } => cmd_validate(io),
        Command::Model { io, point, derate } => cmd_model(io, point, *derate),
        Command::Dse {
            io,
            arch,
            cvecs,
            kvecs,
            derate,
        } => cmd_dse(io, arch, cvecs, kvecs, *derate),
        Command::Simulate {
            io,
            point,
            fidelity,
            seed,
            images,
            weights,
            save_inputs,
        } => cmd_simulate(
            io,
            point,
            *fidelity,
            *seed,
            *images,
            weights.as_deref(),
            save_inputs.as_deref(),
        ),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
