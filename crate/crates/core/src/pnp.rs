//! Plug-and-play reconstruction: alternate the learned prior with a
//! quadratically anchored least-squares solve, choosing the anchor weight on a
//! few centre slices before each solve.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, FilterSpec};
use crate::geometry::ConeBeamGeometry;
use crate::prior::{denoise_volume, PriorParams};
use crate::projector::{restrict_center, CenterRestriction, Operator, ProjectionSet, Volume};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// `{2^(1-i)}` for `i = 0..n`.
pub fn default_beta_grid(n: usize) -> Vec<f64> {
    (0..n as i32).map(|i| 2f64.powi(1 - i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnPConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub cg_steps: usize,
    pub beta_grid: Vec<f64>,
    pub n_sel: usize,
    pub half_rows: usize,
    /// Relative slack on the best centre-slab residual when picking beta.
    pub tolerance: f64,
    /// Skips selection and uses this beta in every iteration.
    pub fixed_beta: Option<f64>,
}

impl Default for PnPConfig {
    fn default() -> Self {
        PnPConfig {
            k: 3,
            cg_steps: 10,
            beta_grid: default_beta_grid(15),
            n_sel: 5,
            half_rows: 4,
            tolerance: 0.05,
            fixed_beta: None,
        }
    }
}

impl PnPConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.cg_steps == 0 || self.n_sel == 0 {
            return Err(Error::Param("K, cg_steps and n_sel must be at least 1".into()));
        }
        check_grid(&self.beta_grid)?;
        if !(self.tolerance >= 0.0) {
            return Err(Error::Param("selection tolerance must be nonnegative".into()));
        }
        if let Some(b) = self.fixed_beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Param(format!("fixed beta {b} must be positive")));
            }
        }
        Ok(())
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Param("beta grid is empty".into()));
    }
    if grid.iter().any(|b| !(*b > 0.0 && b.is_finite())) || grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Param("beta grid must be positive and strictly decreasing".into()));
    }
    Ok(())
}

/// Per-solve record of the conjugate gradient iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CgReport {
    /// `||b - M x||` at the start and after each step.
    pub residual_norms: Vec<f64>,
    /// `0.5 ||Ax - y||^2 + 0.5 beta ||x - z||^2` at the start and after each
    /// step.
    pub objectives: Vec<f64>,
    pub steps: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Value of the anchored least-squares objective at `x`.
pub fn subproblem_objective(
    op: &Operator,
    beta: f64,
    z: &Volume,
    y: &ProjectionSet,
    x: &Volume,
) -> Result<f64> {
    let ax = op.forward(x)?;
    let fit: f64 = ax.data.iter().zip(&y.data).map(|(a, b)| (a - b).powi(2)).sum();
    let anchor: f64 = x.data.iter().zip(&z.data).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(0.5 * fit + 0.5 * beta * anchor)
}

/// `n_steps` of conjugate gradients on `(A^T A + beta I) x = A^T y + beta z`
/// from `x0`. Stops early only once the residual falls below `1e-12` relative
/// to the right-hand side.
pub fn cg_solve(
    op: &Operator,
    beta: f64,
    z: &Volume,
    y: &ProjectionSet,
    x0: &Volume,
    n_steps: usize,
) -> Result<(Volume, CgReport)> {
    let dims = op.volume_dims();
    if z.dims != dims || x0.dims != dims {
        return Err(Error::Shape(format!(
            "operator expects volumes {dims:?}, got z {:?} and x0 {:?}",
            z.dims, x0.dims
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Param(format!("beta {beta} must be positive")));
    }
    if n_steps == 0 {
        return Err(Error::Param("CG needs at least one step".into()));
    }
    let mut x = x0.clone();
    let ax = op.forward(&x)?;
    let resid_y: Vec<f64> = ax.data.iter().zip(&y.data).map(|(a, b)| a - b).collect();
    let mut f = 0.5 * dot(&resid_y, &resid_y)
        + 0.5 * beta * x.data.iter().zip(&z.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    // r = A^T (y - Ax) + beta (z - x)
    let mut r = op.adjoint(&ProjectionSet {
        data: resid_y.iter().map(|v| -v).collect(),
        ..ax
    })?
    .data;
    for i in 0..r.len() {
        r[i] += beta * (z.data[i] - x.data[i]);
    }
    let b_norm = {
        let mut b = op.adjoint(y)?.data;
        b.iter_mut().zip(&z.data).for_each(|(v, zz)| *v += beta * zz);
        norm(&b)
    };
    let mut rr = dot(&r, &r);
    let mut report = CgReport {
        residual_norms: vec![rr.sqrt()],
        objectives: vec![f],
        steps: 0,
    };
    let mut p = r.clone();
    let mut pv = Volume::from_data(dims, z.voxel_size_mm, vec![0.0; r.len()])?;
    for _ in 0..n_steps {
        if rr.sqrt() <= 1e-12 * b_norm.max(f64::MIN_POSITIVE) {
            break;
        }
        pv.data.copy_from_slice(&p);
        let ap = op.forward(&pv)?;
        let mut mp = op.adjoint(&ap)?.data;
        mp.iter_mut().zip(&p).for_each(|(m, pi)| *m += beta * pi);
        let pmp = dot(&p, &mp);
        if !(pmp > 0.0) {
            break;
        }
        let pr = dot(&p, &r);
        let alpha = rr / pmp;
        for i in 0..r.len() {
            x.data[i] += alpha * p[i];
            r[i] -= alpha * mp[i];
        }
        f += -alpha * pr + 0.5 * alpha * alpha * pmp;
        let rr_new = dot(&r, &r);
        let gamma = rr_new / rr;
        rr = rr_new;
        for i in 0..p.len() {
            p[i] = r[i] + gamma * p[i];
        }
        report.residual_norms.push(rr.sqrt());
        report.objectives.push(f);
        report.steps += 1;
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CG iterate".into()));
    }
    Ok((x, report))
}

/// Centre-slab data residual for one candidate beta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPoint {
    pub beta: f64,
    pub residual: f64,
}

/// Picks the largest grid value whose normalized centre-slab residual is
/// within `(1 + tolerance)` of the best one.
pub fn regularization_selection(
    z: &Volume,
    geom: &ConeBeamGeometry,
    restriction: &CenterRestriction,
    y_c: &ProjectionSet,
    grid: &[f64],
    n_sel: usize,
    tolerance: f64,
) -> Result<(f64, Vec<SelectionPoint>)> {
    check_grid(grid)?;
    let op = Operator::center(geom, *restriction);
    let z_c = z.slab(restriction.slab_lo, restriction.slab_hi);
    let y_norm = norm(&y_c.data);
    if y_norm == 0.0 {
        return Err(Error::Data("centre rows of the measurements are all zero".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &beta in grid {
        let (x, _) = cg_solve(&op, beta, &z_c, y_c, &z_c, n_sel)?;
        let ax = op.forward(&x)?;
        let diff: f64 = ax.data.iter().zip(&y_c.data).map(|(a, b)| (a - b).powi(2)).sum();
        points.push(SelectionPoint {
            beta,
            residual: diff.sqrt() / y_norm,
        });
    }
    Ok((select_beta(&points, tolerance), points))
}

/// The selection rule on precomputed residuals. Residuals within `1e-9` of
/// the cut are treated as ties.
pub fn select_beta(points: &[SelectionPoint], tolerance: f64) -> f64 {
    let best = points.iter().map(|p| p.residual).fold(f64::INFINITY, f64::min);
    let cut = (1.0 + tolerance) * best + 1e-9;
    points
        .iter()
        .filter(|p| p.residual <= cut)
        .map(|p| p.beta)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub beta: f64,
    pub selection: Vec<SelectionPoint>,
    pub objective_before: f64,
    pub objective_after: f64,
    pub cg: CgReport,
    /// Seconds since the start of the reconstruction.
    pub wall_time_s: f64,
    /// Largest estimated working set so far, in bytes.
    pub peak_memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnPTrace {
    pub schema_version: u32,
    pub fdk_wall_time_s: f64,
    pub denoiser_calls: usize,
    pub selections: usize,
    pub cg_steps_total: usize,
    pub iterations: Vec<IterationTrace>,
}

impl PnPTrace {
    /// Copy with the timing fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> PnPTrace {
        let mut t = self.clone();
        t.fdk_wall_time_s = 0.0;
        t.iterations.iter_mut().for_each(|i| i.wall_time_s = 0.0);
        t
    }
}

/// Rough working-set size: the CG vectors, a few projection buffers and the
/// largest per-slice network activation set.
fn memory_estimate(geom: &ConeBeamGeometry, prior: &PriorParams) -> u64 {
    let nv = geom.n_voxels() as u64;
    let nm = geom.n_measurements() as u64;
    let [nx, ny, _] = geom.vol_dims;
    let slice = (nx * ny) as u64;
    let act = slice * (prior.arch.base_features as u64) * 8 + prior.values.len() as u64;
    8 * (7 * nv + 3 * nm + act)
}

/// Runs `K` prior/solve rounds starting from the FDK reconstruction.
pub fn pnp_reconstruct(
    y: &ProjectionSet,
    geom: &ConeBeamGeometry,
    prior: &PriorParams,
    cfg: &PnPConfig,
    filter: &FilterSpec,
) -> Result<(Volume, PnPTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut x = fdk_reconstruct(y, geom, filter)?;
    x.check_finite()?;
    let restriction = restrict_center(geom, cfg.half_rows)?;
    let y_c = y.rows(restriction.row_lo, restriction.row_hi);
    let op = Operator::full(geom);
    let mut trace = PnPTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        fdk_wall_time_s: start.elapsed().as_secs_f64(),
        denoiser_calls: 0,
        selections: 0,
        cg_steps_total: 0,
        iterations: Vec::with_capacity(cfg.k),
    };
    let mem = memory_estimate(geom, prior);
    for k in 1..=cfg.k {
        let z = denoise_volume(prior, &x, prior.arch.half_width)?;
        trace.denoiser_calls += 1;
        z.check_finite()?;
        let (beta, selection) = match cfg.fixed_beta {
            Some(b) => (b, Vec::new()),
            None => {
                trace.selections += 1;
                regularization_selection(&z, geom, &restriction, &y_c, &cfg.beta_grid, cfg.n_sel, cfg.tolerance)?
            }
        };
        let (next, cg) = cg_solve(&op, beta, &z, y, &x, cfg.cg_steps)?;
        trace.cg_steps_total += cg.steps;
        trace.iterations.push(IterationTrace {
            iteration: k,
            beta,
            selection,
            objective_before: cg.objectives[0],
            objective_after: *cg.objectives.last().expect("initial objective"),
            cg,
            wall_time_s: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
            peak_memory_bytes: mem,
        });
        x = next;
    }
    Ok((x, trace))
}
