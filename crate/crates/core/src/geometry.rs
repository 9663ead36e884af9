//! Acquisition geometry for circular cone-beam scans.
//!
//! Conventions used throughout the crate:
//!
//! * The volume is centred on the rotation axis (the z axis). Voxel `(i, j, k)`
//!   sits at `((i - (nx-1)/2) * s, (j - (ny-1)/2) * s, (k - (nz-1)/2) * s)`.
//! * The source rotates counter-clockwise about +z. At angle 0 it sits on the
//!   -y axis at distance `source_object_dist_mm`, looking towards +y.
//! * The flat detector is perpendicular to the central ray at distance
//!   `source_detector_dist_mm` from the source. Its column axis is the rotated
//!   +x axis, its row axis is +z, and it is centred on the central ray.
//! * Angles are kept in degrees in every public structure and converted to
//!   radians once, when [`ViewFrame`]s are built.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanKind {
    FullScan,
    ShortScan,
}

/// Full fan opening angle in the axial plane, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FanAngle {
    pub value_deg: f64,
}

impl FanAngle {
    pub fn half_rad(&self) -> f64 {
        (self.value_deg / 2.0).to_radians()
    }
}

/// Complete description of a circular cone-beam acquisition and the
/// reconstruction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeBeamGeometry {
    pub source_object_dist_mm: f64,
    pub source_detector_dist_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub pixel_pitch_mm: f64,
    pub vol_dims: [usize; 3],
    pub voxel_size_mm: f64,
    pub angles_deg: Vec<f64>,
    pub scan_kind: ScanKind,
}

/// Per-view source/detector frame, in millimetres and radians.
#[derive(Debug, Clone, Copy)]
pub struct ViewFrame {
    pub source: [f64; 3],
    /// Detector centre.
    pub det_center: [f64; 3],
    /// Unit vector along increasing detector column.
    pub u_axis: [f64; 3],
    /// Unit vector along increasing detector row.
    pub v_axis: [f64; 3],
    /// Unit vector from the source towards the detector centre.
    pub ray_axis: [f64; 3],
}

impl ViewFrame {
    pub fn new(angle_deg: f64, sod: f64, sdd: f64) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let ray_axis = [-s, c, 0.0];
        let source = [sod * s, -sod * c, 0.0];
        let odd = sdd - sod;
        ViewFrame {
            source,
            det_center: [odd * ray_axis[0], odd * ray_axis[1], 0.0],
            u_axis: [c, s, 0.0],
            v_axis: [0.0, 0.0, 1.0],
            ray_axis,
        }
    }
}

pub fn fan_angle(geom: &ConeBeamGeometry) -> FanAngle {
    fan_angle_for(geom.det_cols, geom.pixel_pitch_mm, geom.source_detector_dist_mm)
}

pub fn fan_angle_for(det_cols: usize, pixel_pitch_mm: f64, sdd_mm: f64) -> FanAngle {
    let half_width = det_cols as f64 * pixel_pitch_mm / 2.0;
    FanAngle {
        value_deg: 2.0 * (half_width / sdd_mm).atan().to_degrees(),
    }
}

/// Equispaced view angles, endpoint excluded.
pub fn make_angles(scan_kind: ScanKind, fan: FanAngle, n_views: usize) -> Result<Vec<f64>> {
    if n_views == 0 {
        return Err(Error::EmptyScan);
    }
    let span = scan_span_deg(scan_kind, fan);
    let step = span / n_views as f64;
    Ok((0..n_views).map(|i| i as f64 * step).collect())
}

pub fn scan_span_deg(scan_kind: ScanKind, fan: FanAngle) -> f64 {
    match scan_kind {
        ScanKind::FullScan => 360.0,
        ScanKind::ShortScan => 180.0 + fan.value_deg,
    }
}

pub fn magnification(geom: &ConeBeamGeometry) -> f64 {
    geom.source_detector_dist_mm / geom.source_object_dist_mm
}

impl ConeBeamGeometry {
    /// Builds a geometry with angles generated for `scan_kind` and validates it.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        source_object_dist_mm: f64,
        source_detector_dist_mm: f64,
        det_rows: usize,
        det_cols: usize,
        pixel_pitch_mm: f64,
        vol_dims: [usize; 3],
        voxel_size_mm: f64,
        scan_kind: ScanKind,
        n_views: usize,
    ) -> Result<Self> {
        let fan = fan_angle_for(det_cols, pixel_pitch_mm, source_detector_dist_mm);
        let geom = ConeBeamGeometry {
            source_object_dist_mm,
            source_detector_dist_mm,
            det_rows,
            det_cols,
            pixel_pitch_mm,
            vol_dims,
            voxel_size_mm,
            angles_deg: make_angles(scan_kind, fan, n_views)?,
            scan_kind,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Desk-scale system: 64^3 volume of 0.5 mm voxels, 96x96 detector with
    /// 1 mm pixels, magnification 2 (one pixel per voxel at the isocentre).
    pub fn desk(scan_kind: ScanKind, n_views: usize) -> Result<Self> {
        Self::new(200.0, 400.0, 96, 96, 1.0, [64, 64, 64], 0.5, scan_kind, n_views)
    }

    /// Same acquisition with a different angle list.
    pub fn with_views(&self, scan_kind: ScanKind, n_views: usize) -> Result<Self> {
        let fan = fan_angle(self);
        let geom = ConeBeamGeometry {
            angles_deg: make_angles(scan_kind, fan, n_views)?,
            scan_kind,
            ..self.clone()
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.vol_dims.iter().product()
    }

    pub fn n_measurements(&self) -> usize {
        self.n_views() * self.det_rows * self.det_cols
    }

    pub fn view_frames(&self) -> Vec<ViewFrame> {
        self.angles_deg
            .iter()
            .map(|&a| ViewFrame::new(a, self.source_object_dist_mm, self.source_detector_dist_mm))
            .collect()
    }

    /// Detector coordinates (u, v) in mm of pixel centre (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let u = (col as f64 - (self.det_cols as f64 - 1.0) / 2.0) * self.pixel_pitch_mm;
        let v = (row as f64 - (self.det_rows as f64 - 1.0) / 2.0) * self.pixel_pitch_mm;
        (u, v)
    }

    /// Physical centre of voxel index `idx` along an axis with `n` voxels.
    pub fn voxel_coord(&self, idx: f64, n: usize) -> f64 {
        (idx - (n as f64 - 1.0) / 2.0) * self.voxel_size_mm
    }

    /// Projects a world point onto the detector, returning (u, v) in mm.
    pub fn project_point(&self, frame: &ViewFrame, p: [f64; 3]) -> Option<(f64, f64)> {
        let rel = [p[0] - frame.source[0], p[1] - frame.source[1], p[2] - frame.source[2]];
        let depth = dot(rel, frame.ray_axis);
        if depth <= 0.0 {
            return None;
        }
        let scale = self.source_detector_dist_mm / depth;
        Some((dot(rel, frame.u_axis) * scale, dot(rel, frame.v_axis) * scale))
    }

    pub fn validate(&self) -> Result<()> {
        let g = |m: &str| Err(Error::Geometry(m.to_string()));
        if !(self.source_object_dist_mm > 0.0) {
            return g("source-object distance must be positive");
        }
        if !(self.source_detector_dist_mm > self.source_object_dist_mm) {
            return g("source-detector distance must exceed source-object distance");
        }
        if self.det_rows == 0 || self.det_cols == 0 || self.vol_dims.contains(&0) {
            return g("all counts must be at least 1");
        }
        if !(self.voxel_size_mm > 0.0) || !(self.pixel_pitch_mm > 0.0) {
            return g("voxel size and pixel pitch must be positive");
        }
        let n = self.angles_deg.len();
        if n == 0 {
            return Err(Error::EmptyScan);
        }
        if self.angles_deg.iter().any(|a| !a.is_finite()) {
            return g("non-finite view angle");
        }
        if self.angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return g("view angles must be strictly increasing");
        }
        let extent = self.angles_deg[n - 1] - self.angles_deg[0];
        match self.scan_kind {
            ScanKind::FullScan => {
                if extent >= 360.0 {
                    return g("full scan must span less than 360 degrees");
                }
            }
            ScanKind::ShortScan => {
                if n >= 2 {
                    let span = extent * n as f64 / (n as f64 - 1.0);
                    let want = scan_span_deg(ScanKind::ShortScan, fan_angle(self));
                    if (span - want).abs() > 1e-9 {
                        return Err(Error::Geometry(format!(
                            "short scan spans {span} degrees, expected {want}"
                        )));
                    }
                }
            }
        }
        self.check_field_of_view()
    }

    fn check_field_of_view(&self) -> Result<()> {
        let half = [
            self.vol_dims[0] as f64 * self.voxel_size_mm / 2.0,
            self.vol_dims[1] as f64 * self.voxel_size_mm / 2.0,
            self.vol_dims[2] as f64 * self.voxel_size_mm / 2.0,
        ];
        let du = self.det_cols as f64 * self.pixel_pitch_mm / 2.0;
        let dv = self.det_rows as f64 * self.pixel_pitch_mm / 2.0;
        for frame in self.view_frames() {
            for corner in 0..8 {
                let p = [
                    if corner & 1 == 0 { -half[0] } else { half[0] },
                    if corner & 2 == 0 { -half[1] } else { half[1] },
                    if corner & 4 == 0 { -half[2] } else { half[2] },
                ];
                match self.project_point(&frame, p) {
                    Some((u, v)) if u.abs() <= du && v.abs() <= dv => {}
                    _ => {
                        return Err(Error::Geometry(
                            "volume extends outside the scanned field of view".into(),
                        ))
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
