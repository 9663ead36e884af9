//! Matched cone-beam forward projector and its exact transpose.
//!
//! The discretisation is Joseph's method: every ray is marched plane by plane
//! along its dominant axis, the volume is bilinearly interpolated in the plane
//! and each sample is weighted by the ray length per plane. The backprojector
//! scatters exactly the same weights, so the pair is a matrix and its
//! transpose up to floating-point summation order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{magnification, ConeBeamGeometry, ViewFrame};

/// Attenuation volume in mm^-1, stored z-major, then y, then x.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxel_size_mm: f64,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], voxel_size_mm: f64) -> Self {
        Volume {
            dims,
            voxel_size_mm,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_data(dims: [usize; 3], voxel_size_mm: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "volume {:?} needs {} values, got {}",
                dims,
                dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            voxel_size_mm,
            data,
        })
    }

    pub fn for_geometry(geom: &ConeBeamGeometry) -> Self {
        Self::zeros(geom.vol_dims, geom.voxel_size_mm)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f64] {
        let n = self.slice_len();
        &mut self.data[z * n..(z + 1) * n]
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    /// Copies slices `z_lo..=z_hi` into a new volume.
    pub fn slab(&self, z_lo: usize, z_hi: usize) -> Volume {
        let n = self.slice_len();
        Volume {
            dims: [self.dims[0], self.dims[1], z_hi - z_lo + 1],
            voxel_size_mm: self.voxel_size_mm,
            data: self.data[z_lo * n..(z_hi + 1) * n].to_vec(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("volume".into()))
        }
    }
}

/// Line-integral measurements, stored view-major, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub n_views: usize,
    pub det_rows: usize,
    pub det_cols: usize,
    pub angles_deg: Vec<f64>,
    pub data: Vec<f64>,
}

impl ProjectionSet {
    pub fn zeros(n_views: usize, det_rows: usize, det_cols: usize, angles_deg: Vec<f64>) -> Self {
        ProjectionSet {
            n_views,
            det_rows,
            det_cols,
            angles_deg,
            data: vec![0.0; n_views * det_rows * det_cols],
        }
    }

    pub fn for_geometry(geom: &ConeBeamGeometry) -> Self {
        Self::zeros(geom.n_views(), geom.det_rows, geom.det_cols, geom.angles_deg.clone())
    }

    pub fn view_len(&self) -> usize {
        self.det_rows * self.det_cols
    }

    pub fn view(&self, v: usize) -> &[f64] {
        let n = self.view_len();
        &self.data[v * n..(v + 1) * n]
    }

    #[inline]
    pub fn get(&self, view: usize, row: usize, col: usize) -> f64 {
        self.data[(view * self.det_rows + row) * self.det_cols + col]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("projections".into()))
        }
    }

    /// Keeps detector rows `row_lo..=row_hi` of every view.
    pub fn rows(&self, row_lo: usize, row_hi: usize) -> ProjectionSet {
        let nr = row_hi - row_lo + 1;
        let mut out = ProjectionSet::zeros(self.n_views, nr, self.det_cols, self.angles_deg.clone());
        for v in 0..self.n_views {
            let src = &self.view(v)[row_lo * self.det_cols..(row_hi + 1) * self.det_cols];
            out.data[v * nr * self.det_cols..(v + 1) * nr * self.det_cols].copy_from_slice(src);
        }
        out
    }
}

/// Row window of the detector around its middle row together with the volume
/// slab those rows see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenterRestriction {
    pub row_lo: usize,
    pub row_hi: usize,
    pub slab_lo: usize,
    pub slab_hi: usize,
}

impl CenterRestriction {
    pub fn full(geom: &ConeBeamGeometry) -> Self {
        CenterRestriction {
            row_lo: 0,
            row_hi: geom.det_rows - 1,
            slab_lo: 0,
            slab_hi: geom.vol_dims[2] - 1,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_hi - self.row_lo + 1
    }

    pub fn n_slices(&self) -> usize {
        self.slab_hi - self.slab_lo + 1
    }
}

pub fn restrict_center(geom: &ConeBeamGeometry, half_rows: usize) -> Result<CenterRestriction> {
    if 2 * half_rows + 1 > geom.det_rows {
        return Err(Error::Range(format!(
            "row window of {} rows exceeds detector with {} rows",
            2 * half_rows + 1,
            geom.det_rows
        )));
    }
    let mid = (geom.det_rows - 1) / 2;
    let nz = geom.vol_dims[2];
    let half_mm = half_rows as f64 * geom.pixel_pitch_mm / magnification(geom);
    let half_vox = (half_mm / geom.voxel_size_mm - 1e-9).ceil().max(0.0) as usize;
    let zc = (nz - 1) / 2;
    Ok(CenterRestriction {
        row_lo: mid - half_rows,
        row_hi: mid + half_rows,
        slab_lo: zc.saturating_sub(half_vox),
        slab_hi: (zc + half_vox).min(nz - 1),
    })
}

/// Voxel grid seen by the ray tracer: the full grid geometry plus the index
/// box `[lo, hi)` (global indices) whose voxels may receive weight. The data
/// buffer covers only that box for the z axis.
#[derive(Clone, Copy)]
struct Grid {
    n: [usize; 3],
    lo: [usize; 3],
    hi: [usize; 3],
    vs: f64,
    /// Offset of z index `lo[2]` in the data buffer.
    z_base: usize,
}

impl Grid {
    #[inline]
    fn local_index(&self, g: [usize; 3]) -> usize {
        ((g[2] - self.z_base) * self.n[1] + g[1]) * self.n[0] + g[0]
    }

    #[inline]
    fn frac(&self, p: f64, axis: usize) -> f64 {
        p / self.vs + (self.n[axis] as f64 - 1.0) / 2.0
    }
}

/// Visits every (voxel, weight) pair of the Joseph discretisation for the ray
/// from `src` to `dst`.
#[inline]
fn trace_ray<F: FnMut(usize, f64)>(grid: &Grid, src: [f64; 3], dst: [f64; 3], mut visit: F) {
    let d = [dst[0] - src[0], dst[1] - src[1], dst[2] - src[2]];
    let a = if d[0].abs() >= d[1].abs() && d[0].abs() >= d[2].abs() {
        0
    } else if d[1].abs() >= d[2].abs() {
        1
    } else {
        2
    };
    let (b, c) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let da = d[a];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let step = grid.vs * len / da.abs();

    // fractional index along b and c at plane ia: f0 + ia * df
    let fa0 = grid.frac(src[a], a);
    let db = d[b] / da;
    let dc = d[c] / da;
    let fb0 = grid.frac(src[b], b) - fa0 * db;
    let fc0 = grid.frac(src[c], c) - fa0 * dc;

    // planes where both in-plane coordinates lie in (lo - 1, hi)
    let mut lo = grid.lo[a] as f64;
    let mut hi = grid.hi[a] as f64 - 1.0;
    for (f0, df, ax) in [(fb0, db, b), (fc0, dc, c)] {
        let l = grid.lo[ax] as f64 - 1.0;
        let h = grid.hi[ax] as f64;
        if df == 0.0 {
            if !(f0 > l && f0 < h) {
                return;
            }
        } else {
            let (t0, t1) = ((l - f0) / df, (h - f0) / df);
            let (t0, t1) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            lo = lo.max(t0.floor());
            hi = hi.min(t1.ceil());
        }
    }
    if hi < lo {
        return;
    }
    let (ia_lo, ia_hi) = (lo as usize, hi as usize);
    for ia in ia_lo..=ia_hi {
        let fb = fb0 + ia as f64 * db;
        let fc = fc0 + ia as f64 * dc;
        let b0 = fb.floor();
        let c0 = fc.floor();
        let wb = fb - b0;
        let wc = fc - c0;
        let (b0, c0) = (b0 as i64, c0 as i64);
        for (ob, wbv) in [(0i64, 1.0 - wb), (1, wb)] {
            let bi = b0 + ob;
            if bi < grid.lo[b] as i64 || bi >= grid.hi[b] as i64 || wbv == 0.0 {
                continue;
            }
            for (oc, wcv) in [(0i64, 1.0 - wc), (1, wc)] {
                let ci = c0 + oc;
                if ci < grid.lo[c] as i64 || ci >= grid.hi[c] as i64 || wcv == 0.0 {
                    continue;
                }
                let mut g = [0usize; 3];
                g[a] = ia;
                g[b] = bi as usize;
                g[c] = ci as usize;
                visit(grid.local_index(g), step * wbv * wcv);
            }
        }
    }
}

fn pixel_world(geom: &ConeBeamGeometry, frame: &ViewFrame, row: usize, col: usize) -> [f64; 3] {
    let (u, v) = geom.pixel_center(row, col);
    [
        frame.det_center[0] + u * frame.u_axis[0] + v * frame.v_axis[0],
        frame.det_center[1] + u * frame.u_axis[1] + v * frame.v_axis[1],
        frame.det_center[2] + u * frame.u_axis[2] + v * frame.v_axis[2],
    ]
}

fn check_volume(vol: &Volume, geom: &ConeBeamGeometry, nz: usize) -> Result<()> {
    let want = [geom.vol_dims[0], geom.vol_dims[1], nz];
    if vol.dims != want {
        return Err(Error::Shape(format!(
            "volume dims {:?} do not match geometry {:?}",
            vol.dims, want
        )));
    }
    if (vol.voxel_size_mm - geom.voxel_size_mm).abs() > 1e-12 * geom.voxel_size_mm {
        return Err(Error::Shape(format!(
            "voxel size {} does not match geometry {}",
            vol.voxel_size_mm, geom.voxel_size_mm
        )));
    }
    Ok(())
}

fn check_projections(projs: &ProjectionSet, geom: &ConeBeamGeometry, rows: usize) -> Result<()> {
    if projs.n_views != geom.n_views()
        || projs.det_rows != rows
        || projs.det_cols != geom.det_cols
        || projs.data.len() != projs.n_views * rows * projs.det_cols
    {
        return Err(Error::Shape(format!(
            "projections {}x{}x{} do not match geometry {}x{}x{}",
            projs.n_views,
            projs.det_rows,
            projs.det_cols,
            geom.n_views(),
            rows,
            geom.det_cols
        )));
    }
    Ok(())
}

fn grid_for(geom: &ConeBeamGeometry, r: &CenterRestriction) -> Grid {
    let [nx, ny, nz] = geom.vol_dims;
    Grid {
        n: [nx, ny, nz],
        lo: [0, 0, r.slab_lo],
        hi: [nx, ny, r.slab_hi + 1],
        vs: geom.voxel_size_mm,
        z_base: r.slab_lo,
    }
}

/// `A x` for the rows and slab selected by `r`. `vol` holds only the slab.
fn forward_impl(vol: &Volume, geom: &ConeBeamGeometry, r: &CenterRestriction) -> ProjectionSet {
    let grid = grid_for(geom, r);
    let frames = geom.view_frames();
    let nrows = r.n_rows();
    let ncols = geom.det_cols;
    let mut out = ProjectionSet::zeros(geom.n_views(), nrows, ncols, geom.angles_deg.clone());
    out.data
        .par_chunks_mut(nrows * ncols)
        .zip(frames.par_iter())
        .for_each(|(view, frame)| {
            for (i, px) in view.iter_mut().enumerate() {
                let (row, col) = (r.row_lo + i / ncols, i % ncols);
                let dst = pixel_world(geom, frame, row, col);
                let mut acc = 0.0;
                trace_ray(&grid, frame.source, dst, |idx, w| acc += w * vol.data[idx]);
                *px = acc;
            }
        });
    out
}

/// `A^T y` for the rows and slab selected by `r`.
///
/// Work is split into z-chunks of the output; every chunk replays all rays in
/// the same order and keeps only its own voxels, so each voxel accumulates in
/// a fixed order whatever the chunking.
fn back_impl(projs: &ProjectionSet, geom: &ConeBeamGeometry, r: &CenterRestriction) -> Volume {
    let frames = geom.view_frames();
    let [nx, ny, _] = geom.vol_dims;
    let ns = r.n_slices();
    let mut out = Volume::zeros([nx, ny, ns], geom.voxel_size_mm);
    let n_chunks = (rayon::current_num_threads() * 2).clamp(1, ns);
    let per = ns.div_ceil(n_chunks);
    let slice = nx * ny;
    let ncols = geom.det_cols;
    out.data
        .par_chunks_mut(per * slice)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let z_lo = r.slab_lo + ci * per;
            let z_hi = z_lo + chunk.len() / slice;
            let grid = Grid {
                n: geom.vol_dims,
                lo: [0, 0, z_lo],
                hi: [nx, ny, z_hi],
                vs: geom.voxel_size_mm,
                z_base: z_lo,
            };
            for (v, frame) in frames.iter().enumerate() {
                let view = projs.view(v);
                for (i, &val) in view.iter().enumerate() {
                    if val == 0.0 {
                        continue;
                    }
                    let (row, col) = (r.row_lo + i / ncols, i % ncols);
                    let dst = pixel_world(geom, frame, row, col);
                    trace_ray(&grid, frame.source, dst, |idx, w| chunk[idx] += w * val);
                }
            }
        });
    out
}

pub fn forward_project(vol: &Volume, geom: &ConeBeamGeometry) -> Result<ProjectionSet> {
    check_volume(vol, geom, geom.vol_dims[2])?;
    Ok(forward_impl(vol, geom, &CenterRestriction::full(geom)))
}

pub fn back_project(projs: &ProjectionSet, geom: &ConeBeamGeometry) -> Result<Volume> {
    check_projections(projs, geom, geom.det_rows)?;
    Ok(back_impl(projs, geom, &CenterRestriction::full(geom)))
}

fn check_restriction(geom: &ConeBeamGeometry, r: &CenterRestriction) -> Result<()> {
    if r.row_lo > r.row_hi
        || r.row_hi >= geom.det_rows
        || r.slab_lo > r.slab_hi
        || r.slab_hi >= geom.vol_dims[2]
    {
        return Err(Error::Range(format!("invalid restriction {r:?}")));
    }
    Ok(())
}

/// Restricted forward operator `A_c`: slab volume in, row-window projections out.
pub fn forward_project_center(
    r: &CenterRestriction,
    slab: &Volume,
    geom: &ConeBeamGeometry,
) -> Result<ProjectionSet> {
    check_restriction(geom, r)?;
    check_volume(slab, geom, r.n_slices())?;
    Ok(forward_impl(slab, geom, r))
}

/// Restricted backprojector `A_c^T`.
pub fn back_project_center(
    r: &CenterRestriction,
    projs: &ProjectionSet,
    geom: &ConeBeamGeometry,
) -> Result<Volume> {
    check_restriction(geom, r)?;
    check_projections(projs, geom, r.n_rows())?;
    Ok(back_impl(projs, geom, r))
}

/// Bundles a geometry and a restriction into a reusable linear operator.
#[derive(Debug, Clone)]
pub struct Operator<'a> {
    pub geom: &'a ConeBeamGeometry,
    pub restriction: CenterRestriction,
}

impl<'a> Operator<'a> {
    pub fn full(geom: &'a ConeBeamGeometry) -> Self {
        Operator {
            geom,
            restriction: CenterRestriction::full(geom),
        }
    }

    pub fn center(geom: &'a ConeBeamGeometry, restriction: CenterRestriction) -> Self {
        Operator { geom, restriction }
    }

    pub fn forward(&self, vol: &Volume) -> Result<ProjectionSet> {
        forward_project_center(&self.restriction, vol, self.geom)
    }

    pub fn adjoint(&self, projs: &ProjectionSet) -> Result<Volume> {
        back_project_center(&self.restriction, projs, self.geom)
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        let [nx, ny, _] = self.geom.vol_dims;
        [nx, ny, self.restriction.n_slices()]
    }
}
