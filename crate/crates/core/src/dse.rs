//! Design-space exploration over `(C_vec, K_vec)`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{check_fit, DeviceSpec, ResourceReport, VectorConfig};
use crate::error::{Error, Result};
use crate::perf::{system_throughput, SystemPerf};
use crate::topology::DevicePlan;

pub const CSV_HEADER: &str = "c_vec,k_vec,dsps,m20k_total,feasible,img_per_s_device,img_per_s_system";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsePoint {
    pub cfg: VectorConfig,
    pub resources: ResourceReport,
    /// False when `K_vec` is not an even multiple of `C_vec`; such points
    /// report zero throughput.
    pub explored: bool,
    /// Present iff the point was explored and fits the device.
    pub perf: Option<SystemPerf>,
}

impl DsePoint {
    pub fn img_per_s_device(&self) -> f64 {
        self.perf.as_ref().map_or(0.0, |p| p.img_per_s_device)
    }

    pub fn img_per_s_system(&self) -> f64 {
        self.perf.as_ref().map_or(0.0, |p| p.img_per_s_system)
    }
}

/// Default grid: `C_vec` in {4, 8, 16} and `K_vec` in steps of 8 up to 96.
pub fn default_ranges() -> (Vec<usize>, Vec<usize>) {
    (vec![4, 8, 16], (1..=12).map(|i| 8 * i).collect())
}

/// Evaluates every `(c, k)` of the grid, `C_vec` major. `template` supplies
/// the remaining factors.
pub fn sweep_grid(
    plan: &DevicePlan,
    dev: &DeviceSpec,
    template: &VectorConfig,
    c_range: &[usize],
    k_range: &[usize],
    derate: f64,
) -> Result<Vec<DsePoint>> {
    if c_range.is_empty() || k_range.is_empty() {
        return Err(Error::InvalidConfig("sweep ranges must be non-empty".into()));
    }
    let grid: Vec<(usize, usize)> = c_range
        .iter()
        .flat_map(|&c| k_range.iter().map(move |&k| (c, k)))
        .collect();
    grid.par_iter()
        .map(|&(c_vec, k_vec)| {
            let cfg = VectorConfig {
                c_vec,
                k_vec,
                ..*template
            };
            cfg.validate()?;
            let resources = check_fit(&cfg, plan, dev);
            let explored = k_vec % (2 * c_vec) == 0;
            let perf = if explored && resources.feasible {
                Some(system_throughput(&cfg, plan, dev, derate)?)
            } else {
                None
            };
            Ok(DsePoint {
                cfg,
                resources,
                explored,
                perf,
            })
        })
        .collect()
}

/// Highest system throughput among feasible points; ties go to fewer DSPs,
/// then fewer M20Ks, then smaller `K_vec`.
pub fn select_best(points: &[DsePoint]) -> Result<&DsePoint> {
    points
        .iter()
        .filter(|p| p.perf.is_some())
        .min_by(|a, b| {
            b.img_per_s_system()
                .total_cmp(&a.img_per_s_system())
                .then(a.resources.n_dsps.cmp(&b.resources.n_dsps))
                .then(a.resources.m20k_total().cmp(&b.resources.m20k_total()))
                .then(a.cfg.k_vec.cmp(&b.cfg.k_vec))
        })
        .ok_or(Error::NoFeasiblePoint)
}

pub fn to_csv(points: &[DsePoint]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.3},{:.3}",
            p.cfg.c_vec,
            p.cfg.k_vec,
            p.resources.n_dsps,
            p.resources.m20k_total(),
            p.resources.feasible,
            p.img_per_s_device(),
            p.img_per_s_system()
        );
    }
    s
}
