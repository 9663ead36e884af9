//! Feldkamp-Davis-Kress filtered backprojection for flat-detector circular
//! scans, with Parker weighting for short scans.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fan_angle, magnification, ConeBeamGeometry, ScanKind};
use crate::projector::{ProjectionSet, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FilterWindow {
    #[default]
    RamLak,
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterSpec {
    pub window: FilterWindow,
    pub padded_len: usize,
}

impl FilterSpec {
    /// Smallest power of two holding twice the row length.
    pub fn for_cols(det_cols: usize, window: FilterWindow) -> Self {
        FilterSpec {
            window,
            padded_len: (2 * det_cols).next_power_of_two(),
        }
    }
}

/// Spatial Ram-Lak tap for unit sample spacing.
pub fn ramlak_tap(k: i64) -> f64 {
    if k == 0 {
        0.25
    } else if k % 2 == 0 {
        0.0
    } else {
        -1.0 / (PI * PI * (k * k) as f64)
    }
}

/// Parker's short-scan weight for source angle `beta` (radians from the start
/// of the arc) and fan coordinate `gamma`, with half fan angle `half_fan`.
///
/// In this crate's geometry the conjugate of `(beta, gamma)` is
/// `(beta + pi - 2 gamma, -gamma)`.
pub fn parker_weight(beta: f64, gamma: f64, half_fan: f64) -> f64 {
    let rise_end = 2.0 * (half_fan + gamma);
    let fall_start = PI + 2.0 * gamma;
    let arc = PI + 2.0 * half_fan;
    if beta < 0.0 || beta > arc {
        0.0
    } else if beta < rise_end {
        (PI / 4.0 * beta / (half_fan + gamma)).sin().powi(2)
    } else if beta <= fall_start {
        1.0
    } else {
        (PI / 4.0 * (arc - beta) / (half_fan - gamma)).sin().powi(2)
    }
}

/// Per-(view, column) Parker weights, row-major by view.
pub fn parker_weights(geom: &ConeBeamGeometry) -> Result<Vec<f64>> {
    if geom.scan_kind != ScanKind::ShortScan {
        return Err(Error::NotShortScan);
    }
    let half_fan = fan_angle(geom).half_rad();
    let a0 = geom.angles_deg[0];
    let gammas: Vec<f64> = (0..geom.det_cols)
        .map(|c| (geom.pixel_center(0, c).0 / geom.source_detector_dist_mm).atan())
        .collect();
    let mut w = Vec::with_capacity(geom.n_views() * geom.det_cols);
    for &a in &geom.angles_deg {
        let beta = (a - a0).to_radians();
        w.extend(gammas.iter().map(|&g| parker_weight(beta, g, half_fan)));
    }
    Ok(w)
}

/// Frequency response of the (optionally apodised) ramp kernel with its DC
/// term pinned to zero.
fn ramp_response(spec: &FilterSpec, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let p = spec.padded_len;
    let half = (p / 2) as i64;
    let mut h: Vec<Complex<f64>> = (0..p as i64)
        .map(|i| {
            let k = if i < half { i } else { i - p as i64 };
            Complex::new(ramlak_tap(k), 0.0)
        })
        .collect();
    planner.plan_fft_forward(p).process(&mut h);
    h[0] = Complex::new(0.0, 0.0);
    if spec.window == FilterWindow::Hann {
        for (i, v) in h.iter_mut().enumerate() {
            let f = i.min(p - i) as f64 / p as f64;
            *v *= 0.5 * (1.0 + (2.0 * PI * f).cos());
        }
    }
    h
}

fn filter_rows(data: &mut [f64], cols: usize, spec: &FilterSpec) {
    let p = spec.padded_len;
    let mut planner = FftPlanner::new();
    let resp = ramp_response(spec, &mut planner);
    let fwd = planner.plan_fft_forward(p);
    let inv = planner.plan_fft_inverse(p);
    let pad = p - cols;
    let right = pad / 2;
    let mut buf = vec![Complex::new(0.0, 0.0); p];
    for row in data.chunks_mut(cols) {
        // edge-extended so a constant row stays constant on the circle
        for (i, b) in buf.iter_mut().enumerate() {
            let v = if i < cols {
                row[i]
            } else if i < cols + right {
                row[cols - 1]
            } else {
                row[0]
            };
            *b = Complex::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, r) in buf.iter_mut().zip(&resp) {
            *b *= r;
        }
        inv.process(&mut buf);
        for (o, b) in row.iter_mut().zip(&buf) {
            *o = b.re / p as f64;
        }
    }
}

/// Filters every detector row with the unit-spacing ramp kernel.
pub fn ramp_filter(projs: &ProjectionSet, spec: &FilterSpec) -> Result<ProjectionSet> {
    if spec.padded_len < 2 * projs.det_cols {
        return Err(Error::Param(format!(
            "padded length {} shorter than twice the row length {}",
            spec.padded_len, projs.det_cols
        )));
    }
    let mut out = projs.clone();
    let cols = projs.det_cols;
    out.data
        .par_chunks_mut(projs.view_len().max(1))
        .for_each(|view| filter_rows(view, cols, spec));
    Ok(out)
}

pub fn fdk_reconstruct(
    projs: &ProjectionSet,
    geom: &ConeBeamGeometry,
    spec: &FilterSpec,
) -> Result<Volume> {
    if projs.n_views != geom.n_views()
        || projs.det_rows != geom.det_rows
        || projs.det_cols != geom.det_cols
    {
        return Err(Error::Shape(format!(
            "projections {}x{}x{} do not match geometry {}x{}x{}",
            projs.n_views,
            projs.det_rows,
            projs.det_cols,
            geom.n_views(),
            geom.det_rows,
            geom.det_cols
        )));
    }
    let sod = geom.source_object_dist_mm;
    let sdd = geom.source_detector_dist_mm;
    let mag = magnification(geom);
    let (rows, cols) = (geom.det_rows, geom.det_cols);

    // cosine pre-weighting on the detector scaled to the isocentre
    let mut weighted = projs.clone();
    let parker = match geom.scan_kind {
        ScanKind::ShortScan => Some(parker_weights(geom)?),
        ScanKind::FullScan => None,
    };
    weighted
        .data
        .par_chunks_mut(rows * cols)
        .enumerate()
        .for_each(|(v, view)| {
            for r in 0..rows {
                for c in 0..cols {
                    let (u, w) = geom.pixel_center(r, c);
                    let (u, w) = (u / mag, w / mag);
                    let mut f = sod / (sod * sod + u * u + w * w).sqrt();
                    if let Some(p) = &parker {
                        f *= p[v * cols + c];
                    }
                    view[r * cols + c] *= f;
                }
            }
        });
    let filtered = ramp_filter(&weighted, spec)?;

    let n = geom.n_views() as f64;
    let (span, redundancy) = match geom.scan_kind {
        ScanKind::FullScan => (2.0 * PI, 0.5),
        ScanKind::ShortScan => (PI + 2.0 * fan_angle(geom).half_rad(), 1.0),
    };
    let tau = geom.pixel_pitch_mm / mag;
    let scale = redundancy * (span / n) / tau;

    let frames = geom.view_frames();
    let [nx, ny, nz] = geom.vol_dims;
    let mut vol = Volume::for_geometry(geom);
    let pitch = geom.pixel_pitch_mm;
    let (c_off, r_off) = ((cols as f64 - 1.0) / 2.0, (rows as f64 - 1.0) / 2.0);
    vol.data
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slice)| {
            let pz = geom.voxel_coord(z as f64, nz);
            for (v, frame) in frames.iter().enumerate() {
                let view = filtered.view(v);
                for y in 0..ny {
                    let py = geom.voxel_coord(y as f64, ny);
                    for x in 0..nx {
                        let px = geom.voxel_coord(x as f64, nx);
                        let depth = sod + px * frame.ray_axis[0] + py * frame.ray_axis[1];
                        let lateral = px * frame.u_axis[0] + py * frame.u_axis[1];
                        let m = sdd / depth;
                        let fc = lateral * m / pitch + c_off;
                        let fr = pz * m / pitch + r_off;
                        let val = bilinear(view, rows, cols, fr, fc);
                        slice[y * nx + x] += val * (sod * sod) / (depth * depth);
                    }
                }
            }
            for s in slice.iter_mut() {
                *s *= scale;
            }
        });
    Ok(vol)
}

#[inline]
fn bilinear(img: &[f64], rows: usize, cols: usize, fr: f64, fc: f64) -> f64 {
    let r0 = fr.floor();
    let c0 = fc.floor();
    let (wr, wc) = (fr - r0, fc - c0);
    let (r0, c0) = (r0 as i64, c0 as i64);
    let mut acc = 0.0;
    for (dr, w_r) in [(0, 1.0 - wr), (1, wr)] {
        let r = r0 + dr;
        if r < 0 || r >= rows as i64 {
            continue;
        }
        for (dc, w_c) in [(0, 1.0 - wc), (1, wc)] {
            let c = c0 + dc;
            if c < 0 || c >= cols as i64 {
                continue;
            }
            acc += w_r * w_c * img[r as usize * cols + c as usize];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row_set(row: Vec<f64>) -> ProjectionSet {
        let n = row.len();
        ProjectionSet {
            n_views: 1,
            det_rows: 1,
            det_cols: n,
            angles_deg: vec![0.0],
            data: row,
        }
    }

    #[test]
    fn constant_row_loses_dc() {
        let cols = 64;
        let p = row_set(vec![3.0; cols]);
        let f = ramp_filter(&p, &FilterSpec { window: FilterWindow::RamLak, padded_len: 4 * cols }).unwrap();
        assert!(f.data.iter().all(|v| v.abs() < 1e-6 * 3.0));
    }

    #[test]
    fn impulse_row_returns_ramlak_taps() {
        let cols = 64;
        let mut row = vec![0.0; cols];
        row[32] = 1.0;
        let f = ramp_filter(&row_set(row), &FilterSpec { window: FilterWindow::RamLak, padded_len: 256 })
            .unwrap();
        for (i, v) in f.data.iter().enumerate() {
            let k = i as i64 - 32;
            assert_abs_diff_eq!(*v, ramlak_tap(k), epsilon = 1e-4);
        }
        assert_abs_diff_eq!(f.data[32], 0.25, epsilon = 1e-4);
        assert_abs_diff_eq!(f.data[33], -1.0 / (PI * PI), epsilon = 1e-4);
    }

    #[test]
    fn filter_is_linear() {
        let spec = FilterSpec::for_cols(32, FilterWindow::Hann);
        let a: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..32).map(|i| (i as f64 * 0.17).cos() * 2.0).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = ramp_filter(&row_set(a), &spec).unwrap();
        let fb = ramp_filter(&row_set(b), &spec).unwrap();
        let fab = ramp_filter(&row_set(ab), &spec).unwrap();
        for i in 0..32 {
            assert_abs_diff_eq!(fab.data[i], fa.data[i] + fb.data[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn parker_plateau_and_ramp() {
        let half = 8.5f64.to_radians();
        assert_eq!(parker_weight(PI / 2.0, 0.0, half), 1.0);
        for g in [-0.1, 0.0, 0.05, 0.14] {
            let w = parker_weight(0.0, g, half);
            assert_eq!(w, 0.0);
            let b = 0.01;
            let expect = (PI / 4.0 * b / (half + g)).sin().powi(2);
            assert_abs_diff_eq!(parker_weight(b, g, half), expect, epsilon = 1e-15);
            assert!(parker_weight(b, g, half) <= 1.0);
        }
    }

    #[test]
    fn parker_conjugates_sum_to_one() {
        let half = 8.5f64.to_radians();
        for i in 0..200 {
            let g = -half * 0.99 + (2.0 * half * 0.99) * (i as f64 / 199.0);
            for j in 0..=400 {
                let beta = (PI + 2.0 * half) * (j as f64 / 400.0);
                let mut conj = beta + PI - 2.0 * g;
                if conj >= 2.0 * PI {
                    conj -= 2.0 * PI;
                }
                let w = parker_weight(beta, g, half) + parker_weight(conj, -g, half);
                assert_abs_diff_eq!(w, 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn parker_needs_short_scan() {
        let g = ConeBeamGeometry::desk(ScanKind::FullScan, 8).unwrap();
        assert!(matches!(parker_weights(&g), Err(Error::NotShortScan)));
        let g = ConeBeamGeometry::desk(ScanKind::ShortScan, 36).unwrap();
        let w = parker_weights(&g).unwrap();
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn zero_projections_zero_volume() {
        let g = ConeBeamGeometry::desk(ScanKind::ShortScan, 6).unwrap();
        let v = fdk_reconstruct(&ProjectionSet::for_geometry(&g), &g, &FilterSpec::for_cols(g.det_cols, FilterWindow::RamLak))
            .unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
    }
}
