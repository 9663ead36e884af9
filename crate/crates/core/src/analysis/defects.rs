//! Pore extraction by connected components and diameter-binned
//! recall/precision against ground truth.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::Volume;
use crate::simulator::TruthPore;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Diameter bins sized for the desk phantom's 0.75 to 2 mm pores.
pub const DESK_BIN_EDGES_MM: [f64; 5] = [0.0, 1.0, 1.25, 1.5, 2.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Linear voxel indices in ascending order.
    pub voxels: Vec<usize>,
    /// Voxel coordinates `(x, y, z)`.
    pub centroid: [f64; 3],
    pub equivalent_diameter_mm: f64,
}

pub fn equivalent_diameter(n_voxels: usize, voxel_size_mm: f64) -> f64 {
    2.0 * (3.0 * n_voxels as f64 / (4.0 * PI)).cbrt() * voxel_size_mm
}

fn neighbours(dims: [usize; 3], idx: usize, full: bool, mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = dims;
    let (x, y, z) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if manhattan == 0 || (!full && manhattan > 1) {
                    continue;
                }
                let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                    continue;
                }
                f((zz as usize * ny + yy as usize) * nx + xx as usize);
            }
        }
    }
}

/// 26-connected components of the selected voxels, ordered by their first
/// voxel in raster order.
pub fn connected_components(selected: &[bool], dims: [usize; 3], voxel_size_mm: f64) -> Vec<Component> {
    let [nx, ny, _] = dims;
    let mut seen = vec![false; selected.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..selected.len() {
        if !selected[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(i) = queue.pop_front() {
            voxels.push(i);
            neighbours(dims, i, true, |j| {
                if selected[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            });
        }
        voxels.sort_unstable();
        let n = voxels.len() as f64;
        let mut c = [0.0; 3];
        for &i in &voxels {
            c[0] += (i % nx) as f64;
            c[1] += ((i / nx) % ny) as f64;
            c[2] += (i / (nx * ny)) as f64;
        }
        out.push(Component {
            equivalent_diameter_mm: equivalent_diameter(voxels.len(), voxel_size_mm),
            centroid: [c[0] / n, c[1] / n, c[2] / n],
            voxels,
        });
    }
    out
}

/// Foreground (`>= threshold`) with every enclosed cavity filled: a voxel is
/// outside the body when it is below threshold and face-connected through
/// below-threshold voxels to the volume boundary.
pub fn body_mask(vol: &Volume, threshold: f64) -> Vec<bool> {
    let [nx, ny, nz] = vol.dims;
    let mut outside = vec![false; vol.data.len()];
    let mut queue = VecDeque::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let border = x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1;
                let i = vol.index(x, y, z);
                if border && vol.data[i] < threshold {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        neighbours(vol.dims, i, false, |j| {
            if !outside[j] && vol.data[j] < threshold {
                outside[j] = true;
                queue.push_back(j);
            }
        });
    }
    outside.into_iter().map(|o| !o).collect()
}

/// Below-threshold voxels inside the mask, grouped into components.
pub fn extract_defects(vol: &Volume, threshold: f64, mask: &[bool]) -> Result<Vec<Component>> {
    if mask.len() != vol.data.len() {
        return Err(Error::Shape(format!(
            "mask has {} voxels, volume {}",
            mask.len(),
            vol.data.len()
        )));
    }
    let selected: Vec<bool> = vol.data.iter().zip(mask).map(|(&v, &m)| m && v < threshold).collect();
    Ok(connected_components(&selected, vol.dims, vol.voxel_size_mm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo_mm: f64,
    pub hi_mm: f64,
    pub n_gt: usize,
    pub n_recalled: usize,
    pub n_det: usize,
    pub n_true_det: usize,
    /// `None` when the bin holds no ground-truth pores.
    pub recall: Option<f64>,
    /// `None` when the bin holds no detections.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub n_voxels: usize,
    pub centroid: [f64; 3],
    pub equivalent_diameter_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub schema_version: u32,
    pub truth: Vec<TruthPore>,
    pub detected: Vec<ComponentSummary>,
    /// `(truth index, component index)` pairs sharing at least one voxel.
    pub matches: Vec<(usize, usize)>,
    pub bin_edges_mm: Vec<f64>,
    pub bins: Vec<BinStats>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
}

impl DefectReport {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"));
        let mut s = String::from("bin_lo_mm,bin_hi_mm,recall,precision,n_gt,n_det\n");
        for b in &self.bins {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.lo_mm,
                b.hi_mm,
                opt(b.recall),
                opt(b.precision),
                b.n_gt,
                b.n_det
            ));
        }
        s
    }
}

fn bin_of(edges: &[f64], d: f64) -> Option<usize> {
    (0..edges.len() - 1).find(|&i| d >= edges[i] && d < edges[i + 1])
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Matches detections to pores by voxel overlap and bins the outcome by
/// diameter. Bins are half-open `[lo, hi)`.
pub fn recall_precision(
    truth: &[TruthPore],
    detected: &[Component],
    dims: [usize; 3],
    voxel_size_mm: f64,
    bin_edges_mm: &[f64],
) -> Result<DefectReport> {
    if bin_edges_mm.len() < 2 || bin_edges_mm.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Param("bin edges must be increasing with at least two entries".into()));
    }
    let n: usize = dims.iter().product();
    let mut owner = vec![usize::MAX; n];
    for (ci, c) in detected.iter().enumerate() {
        for &v in &c.voxels {
            if v >= n {
                return Err(Error::Shape(format!("component voxel {v} outside grid of {n}")));
            }
            owner[v] = ci;
        }
    }
    let mut matches = Vec::new();
    let mut recalled = vec![false; truth.len()];
    let mut true_det = vec![false; detected.len()];
    for (ti, t) in truth.iter().enumerate() {
        let mut hit: Vec<usize> = t
            .voxels(dims, voxel_size_mm)
            .into_iter()
            .filter_map(|v| (owner[v] != usize::MAX).then_some(owner[v]))
            .collect();
        hit.sort_unstable();
        hit.dedup();
        for ci in hit {
            recalled[ti] = true;
            true_det[ci] = true;
            matches.push((ti, ci));
        }
    }
    let mut bins: Vec<BinStats> = bin_edges_mm
        .windows(2)
        .map(|w| BinStats {
            lo_mm: w[0],
            hi_mm: w[1],
            n_gt: 0,
            n_recalled: 0,
            n_det: 0,
            n_true_det: 0,
            recall: None,
            precision: None,
        })
        .collect();
    for (t, &r) in truth.iter().zip(&recalled) {
        if let Some(b) = bin_of(bin_edges_mm, t.diameter_mm) {
            bins[b].n_gt += 1;
            bins[b].n_recalled += r as usize;
        }
    }
    for (c, &tp) in detected.iter().zip(&true_det) {
        if let Some(b) = bin_of(bin_edges_mm, c.equivalent_diameter_mm) {
            bins[b].n_det += 1;
            bins[b].n_true_det += tp as usize;
        }
    }
    for b in &mut bins {
        b.recall = ratio(b.n_recalled, b.n_gt);
        b.precision = ratio(b.n_true_det, b.n_det);
    }
    Ok(DefectReport {
        schema_version: REPORT_SCHEMA_VERSION,
        truth: truth.to_vec(),
        detected: detected
            .iter()
            .map(|c| ComponentSummary {
                n_voxels: c.voxels.len(),
                centroid: c.centroid,
                equivalent_diameter_mm: c.equivalent_diameter_mm,
            })
            .collect(),
        matches,
        bin_edges_mm: bin_edges_mm.to_vec(),
        recall: ratio(recalled.iter().filter(|&&r| r).count(), truth.len()),
        precision: ratio(true_det.iter().filter(|&&t| t).count(), detected.len()),
        bins,
    })
}

/// Otsu threshold, filled body mask, sub-threshold components and the report.
pub fn detect_and_score(
    vol: &Volume,
    truth: &[TruthPore],
    bin_edges_mm: &[f64],
) -> Result<(f64, DefectReport)> {
    let t = super::otsu_threshold(vol, 256)?;
    let mask = body_mask(vol, t);
    let comps = extract_defects(vol, t, &mask)?;
    Ok((t, recall_precision(truth, &comps, vol.dims, vol.voxel_size_mm, bin_edges_mm)?))
}
