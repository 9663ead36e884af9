//! Image and region metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::Volume;

fn check_same(x: &Volume, reference: &Volume) -> Result<()> {
    if !x.same_shape(reference) {
        return Err(Error::Shape(format!(
            "volumes {:?} and {:?} differ in shape",
            x.dims, reference.dims
        )));
    }
    Ok(())
}

/// `||x - ref|| / ||ref||`.
pub fn nrmse(x: &Volume, reference: &Volume) -> Result<f64> {
    check_same(x, reference)?;
    let den: f64 = reference.data.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::MetricUndefined("reference volume is zero".into()));
    }
    let num: f64 = x.data.iter().zip(&reference.data).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_taps(p: &SsimParams) -> Vec<f64> {
    let r = (p.window / 2) as f64;
    let t: Vec<f64> = (0..p.window)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * p.sigma * p.sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing; the window is truncated at the borders and
/// renormalised over the samples that remain.
fn blur(img: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, &t) in taps.iter().enumerate() {
                    let d = k as isize - r;
                    let (sx, sy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += t * src[sy as usize * w + sx as usize];
                    wsum += t;
                }
                out[y * w + x] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Mean local SSIM of one slice pair.
pub fn ssim_slice(x: &[f64], y: &[f64], w: usize, h: usize, l: f64, p: &SsimParams) -> f64 {
    let taps = gaussian_taps(p);
    let c1 = (p.k1 * l).powi(2);
    let c2 = (p.k2 * l).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = blur(x, w, h, &taps);
    let my = blur(y, w, h, &taps);
    let sxx = blur(&prod(x, x), w, h, &taps);
    let syy = blur(&prod(y, y), w, h, &taps);
    let sxy = blur(&prod(x, y), w, h, &taps);
    let mut total = 0.0;
    for i in 0..x.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    total / x.len() as f64
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Slice-averaged SSIM with dynamic range taken from `reference`.
pub fn ssim(x: &Volume, reference: &Volume, p: &SsimParams) -> Result<f64> {
    check_same(x, reference)?;
    let (lo, hi) = range(&reference.data);
    ssim_with_range(x, reference, hi - lo, p)
}

/// Slice-averaged SSIM with dynamic range taken over both volumes.
pub fn ssim_joint(x: &Volume, reference: &Volume, p: &SsimParams) -> Result<f64> {
    check_same(x, reference)?;
    let (a, b) = range(&x.data);
    let (c, d) = range(&reference.data);
    ssim_with_range(x, reference, b.max(d) - a.min(c), p)
}

pub fn ssim_with_range(x: &Volume, reference: &Volume, l: f64, p: &SsimParams) -> Result<f64> {
    check_same(x, reference)?;
    if !(l > 0.0) {
        return Err(Error::MetricUndefined("SSIM dynamic range is zero".into()));
    }
    if p.window % 2 == 0 || p.window == 0 || !(p.sigma > 0.0) {
        return Err(Error::Param("SSIM window must be odd with positive sigma".into()));
    }
    let [nx, ny, nz] = x.dims;
    let total: f64 = (0..nz)
        .map(|z| ssim_slice(x.slice(z), reference.slice(z), nx, ny, l, p))
        .sum();
    Ok(total / nz as f64)
}

/// Axis-aligned pixel window `[x0, x0+w) x [y0, y0+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    /// Inclusive slice range.
    pub z_lo: usize,
    pub z_hi: usize,
    pub background: Window,
    pub material: Window,
}

impl RegionSpec {
    /// Ten slices around the middle with `size`-pixel square windows centred
    /// at the given pixel positions.
    pub fn around(vol: &Volume, size: usize, background: [usize; 2], material: [usize; 2]) -> Self {
        let nz = vol.dims[2];
        let z_lo = (nz / 2).saturating_sub(5);
        let win = |c: [usize; 2]| Window {
            x0: c[0].saturating_sub(size / 2),
            y0: c[1].saturating_sub(size / 2),
            w: size,
            h: size,
        };
        RegionSpec {
            z_lo,
            z_hi: (z_lo + 9).min(nz - 1),
            background: win(background),
            material: win(material),
        }
    }

    pub fn validate(&self, vol: &Volume) -> Result<()> {
        let [nx, ny, nz] = vol.dims;
        if self.z_lo > self.z_hi || self.z_hi >= nz {
            return Err(Error::Range(format!("slice range {}..={} invalid", self.z_lo, self.z_hi)));
        }
        for w in [self.background, self.material] {
            if w.w == 0 || w.h == 0 || w.x0 + w.w > nx || w.y0 + w.h > ny {
                return Err(Error::Range(format!("window {w:?} outside {nx}x{ny} slice")));
            }
        }
        Ok(())
    }

    fn values(&self, vol: &Volume, w: &Window) -> Vec<f64> {
        let mut out = Vec::with_capacity(w.w * w.h * (self.z_hi - self.z_lo + 1));
        for z in self.z_lo..=self.z_hi {
            for y in w.y0..w.y0 + w.h {
                for x in w.x0..w.x0 + w.w {
                    out.push(vol.get(x, y, z));
                }
            }
        }
        out
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// `20 log10(mu / sigma)` of the material window; `+inf` when sigma is 0.
pub fn snr(vol: &Volume, region: &RegionSpec) -> Result<f64> {
    region.validate(vol)?;
    let (m, s) = mean_std(&region.values(vol, &region.material));
    Ok(snr_from(m, s))
}

pub fn snr_from(mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (mean / std).log10()
    }
}

/// `|mu_b - mu_m| / sqrt(sigma_b^2 + sigma_m^2)`; `+inf` when both sigmas are 0.
pub fn cnr(vol: &Volume, region: &RegionSpec) -> Result<f64> {
    region.validate(vol)?;
    let (mb, sb) = mean_std(&region.values(vol, &region.background));
    let (mm, sm) = mean_std(&region.values(vol, &region.material));
    Ok(cnr_from(mb, sb, mm, sm))
}

pub fn cnr_from(mean_b: f64, std_b: f64, mean_m: f64, std_m: f64) -> f64 {
    let d = (std_b * std_b + std_m * std_m).sqrt();
    let c = (mean_b - mean_m).abs();
    if d == 0.0 {
        if c == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        c / d
    }
}

/// Values along row `row` of slice `z`.
pub fn line_profile(vol: &Volume, z: usize, row: usize) -> Result<Vec<f64>> {
    let [nx, ny, nz] = vol.dims;
    if z >= nz || row >= ny {
        return Err(Error::Range(format!("row {row} of slice {z} outside {nx}x{ny}x{nz}")));
    }
    Ok(vol.slice(z)[row * nx..(row + 1) * nx].to_vec())
}

pub fn profile_csv(values: &[f64]) -> String {
    let mut s = String::from("index,value\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{v:e}\n"));
    }
    s
}
