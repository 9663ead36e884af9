//! Synthetic scans: parametric phantoms with spherical pores, monochromatic
//! and polychromatic photon counts, and Gaussian-approximated Poisson noise.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`). Noise for detector sample
//! `i` is drawn from stream `i` of a generator seeded with the scan seed, and
//! normals use the Ziggurat sampler of `rand_distr`, so every sample is a pure
//! function of `(seed, i)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, ScanKind};
use crate::projector::{forward_project, ProjectionSet, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Solid {
    Box {
        min_mm: [f64; 3],
        max_mm: [f64; 3],
        mu: f64,
    },
    /// Cylinder parallel to the z axis.
    Cylinder {
        center_mm: [f64; 2],
        radius_mm: f64,
        z_min_mm: f64,
        z_max_mm: f64,
        mu: f64,
    },
    Sphere {
        center_mm: [f64; 3],
        radius_mm: f64,
        mu: f64,
    },
}

impl Solid {
    pub fn mu(&self) -> f64 {
        match self {
            Solid::Box { mu, .. } | Solid::Cylinder { mu, .. } | Solid::Sphere { mu, .. } => *mu,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_ball(p, 0.0)
    }

    /// Whether the ball of radius `r` about `p` lies inside the solid, keeping
    /// a strict gap when `r > 0`.
    pub fn contains_ball(&self, p: [f64; 3], r: f64) -> bool {
        let inside = |a: f64, lo: f64, hi: f64| {
            if r > 0.0 {
                a - r > lo && a + r < hi
            } else {
                a >= lo && a <= hi
            }
        };
        match self {
            Solid::Box { min_mm, max_mm, .. } => (0..3).all(|k| inside(p[k], min_mm[k], max_mm[k])),
            Solid::Cylinder {
                center_mm,
                radius_mm,
                z_min_mm,
                z_max_mm,
                ..
            } => {
                let d = ((p[0] - center_mm[0]).powi(2) + (p[1] - center_mm[1]).powi(2)).sqrt();
                let radial = if r > 0.0 { d + r < *radius_mm } else { d <= *radius_mm };
                radial && inside(p[2], *z_min_mm, *z_max_mm)
            }
            Solid::Sphere {
                center_mm,
                radius_mm,
                ..
            } => {
                let d = dist(p, *center_mm);
                if r > 0.0 {
                    d + r < *radius_mm
                } else {
                    d <= *radius_mm
                }
            }
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Solid::Box { min_mm, max_mm, .. } => (*min_mm, *max_mm),
            Solid::Cylinder {
                center_mm,
                radius_mm,
                z_min_mm,
                z_max_mm,
                ..
            } => (
                [center_mm[0] - radius_mm, center_mm[1] - radius_mm, *z_min_mm],
                [center_mm[0] + radius_mm, center_mm[1] + radius_mm, *z_max_mm],
            ),
            Solid::Sphere {
                center_mm,
                radius_mm,
                ..
            } => (
                [center_mm[0] - radius_mm, center_mm[1] - radius_mm, center_mm[2] - radius_mm],
                [center_mm[0] + radius_mm, center_mm[1] + radius_mm, center_mm[2] + radius_mm],
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pore {
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
}

/// Rejection-sampled pores added on top of the explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPores {
    pub count: usize,
    pub diameter_min_mm: f64,
    pub diameter_max_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Solids listed from outermost to innermost; a voxel takes the
    /// attenuation of the last solid containing it.
    #[serde(default)]
    pub body: Vec<Solid>,
    #[serde(default)]
    pub pores: Vec<Pore>,
    #[serde(default)]
    pub random_pores: Option<RandomPores>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl PhantomSpec {
    /// Aluminium-like cylinder with randomly placed pores, sized for the desk
    /// geometry (32 mm field of view).
    pub fn desk_part(seed: u64) -> Self {
        PhantomSpec {
            body: vec![Solid::Cylinder {
                center_mm: [0.0, 0.0],
                radius_mm: 11.0,
                z_min_mm: -11.0,
                z_max_mm: 11.0,
                mu: 0.08,
            }],
            pores: vec![],
            random_pores: Some(RandomPores {
                count: 32,
                diameter_min_mm: 0.75,
                diameter_max_mm: 2.0,
            }),
            rng_seed: seed,
        }
    }

    fn in_body(&self, p: [f64; 3], r: f64) -> bool {
        self.body.iter().any(|s| s.contains_ball(p, r))
    }

    /// Explicit pores plus the sampled ones, validated.
    pub fn resolve_pores(&self, voxel_size_mm: f64) -> Result<Vec<Pore>> {
        let mut pores = Vec::new();
        for p in &self.pores {
            if !(p.diameter_mm > 0.0) {
                return Err(Error::Spec(format!("pore diameter {} must be positive", p.diameter_mm)));
            }
            if !self.in_body(p.center_mm, p.diameter_mm / 2.0) {
                return Err(Error::Spec(format!("pore at {:?} is not inside the body", p.center_mm)));
            }
            if pores.iter().any(|q: &Pore| overlaps(p, q, 0.0)) {
                return Err(Error::Spec(format!("pore at {:?} overlaps another pore", p.center_mm)));
            }
            pores.push(p.clone());
        }
        if let Some(rp) = &self.random_pores {
            if !(rp.diameter_min_mm > 0.0 && rp.diameter_max_mm >= rp.diameter_min_mm) {
                return Err(Error::Spec("invalid random pore diameter range".into()));
            }
            if self.body.is_empty() && rp.count > 0 {
                return Err(Error::Spec("random pores need a body".into()));
            }
            let (mut lo, mut hi) = ([f64::MAX; 3], [f64::MIN; 3]);
            for s in &self.body {
                let (a, b) = s.bounds();
                for k in 0..3 {
                    lo[k] = lo[k].min(a[k]);
                    hi[k] = hi[k].max(b[k]);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
            let mut placed = 0;
            let mut attempts = 0;
            while placed < rp.count {
                attempts += 1;
                if attempts > 100_000 {
                    return Err(Error::Spec(format!(
                        "could only place {placed} of {} random pores",
                        rp.count
                    )));
                }
                let d = rng.random_range(rp.diameter_min_mm..=rp.diameter_max_mm);
                let c = [
                    rng.random_range(lo[0]..hi[0]),
                    rng.random_range(lo[1]..hi[1]),
                    rng.random_range(lo[2]..hi[2]),
                ];
                let cand = Pore {
                    center_mm: c,
                    diameter_mm: d,
                };
                // wall distance of at least one radius
                if !self.in_body(c, d) {
                    continue;
                }
                if pores.iter().any(|q| overlaps(&cand, q, 2.0 * voxel_size_mm)) {
                    continue;
                }
                pores.push(cand);
                placed += 1;
            }
        }
        Ok(pores)
    }
}

fn overlaps(a: &Pore, b: &Pore, gap: f64) -> bool {
    dist(a.center_mm, b.center_mm) <= (a.diameter_mm + b.diameter_mm) / 2.0 + gap
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Ground-truth pore on the voxel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthPore {
    /// Fractional voxel index (x, y, z).
    pub center_vox: [f64; 3],
    pub diameter_mm: f64,
}

impl TruthPore {
    /// Linear indices of the voxels whose centres lie inside the pore.
    pub fn voxels(&self, dims: [usize; 3], voxel_size_mm: f64) -> Vec<usize> {
        let r = self.diameter_mm / 2.0 / voxel_size_mm;
        let mut out = Vec::new();
        let lo = |c: f64| (c - r).floor().max(0.0) as usize;
        let hi = |c: f64, n: usize| ((c + r).ceil() as usize).min(n - 1);
        let c = self.center_vox;
        for z in lo(c[2])..=hi(c[2], dims[2]) {
            for y in lo(c[1])..=hi(c[1], dims[1]) {
                for x in lo(c[0])..=hi(c[0], dims[0]) {
                    let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                    if d2 <= r * r {
                        out.push((z * dims[1] + y) * dims[0] + x);
                    }
                }
            }
        }
        out
    }
}

/// Voxelises the phantom on the grid and returns the pore ground truth.
pub fn build_phantom(
    spec: &PhantomSpec,
    dims: [usize; 3],
    voxel_size_mm: f64,
) -> Result<(Volume, Vec<TruthPore>)> {
    let pores = spec.resolve_pores(voxel_size_mm)?;
    let mut vol = Volume::zeros(dims, voxel_size_mm);
    let coord = |i: usize, n: usize| (i as f64 - (n as f64 - 1.0) / 2.0) * voxel_size_mm;
    let [nx, ny, nz] = dims;
    vol.data.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slice)| {
        let pz = coord(z, nz);
        for y in 0..ny {
            let py = coord(y, ny);
            for x in 0..nx {
                let p = [coord(x, nx), py, pz];
                let mut mu = 0.0;
                for s in &spec.body {
                    if s.contains(p) {
                        mu = s.mu();
                    }
                }
                if mu != 0.0
                    && pores
                        .iter()
                        .any(|q| dist(p, q.center_mm) <= q.diameter_mm / 2.0)
                {
                    mu = 0.0;
                }
                slice[y * nx + x] = mu;
            }
        }
    });
    let to_vox = |c: f64, n: usize| c / voxel_size_mm + (n as f64 - 1.0) / 2.0;
    let truth = pores
        .iter()
        .map(|p| TruthPore {
            center_vox: [
                to_vox(p.center_mm[0], nx),
                to_vox(p.center_mm[1], ny),
                to_vox(p.center_mm[2], nz),
            ],
            diameter_mm: p.diameter_mm,
        })
        .collect();
    Ok((vol, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumBin {
    pub weight: f64,
    pub mu_scale: f64,
}

/// Discrete source spectrum. Each bin scales the reference attenuation;
/// later bins are harder (attenuate less).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spectrum {
    pub bins: Vec<SpectrumBin>,
}

impl Spectrum {
    pub fn monochromatic() -> Self {
        Spectrum {
            bins: vec![SpectrumBin {
                weight: 1.0,
                mu_scale: 1.0,
            }],
        }
    }

    /// Three-bin stand-in for a filtered tungsten tube spectrum.
    pub fn polychromatic() -> Self {
        Spectrum {
            bins: vec![
                SpectrumBin { weight: 0.3, mu_scale: 1.9 },
                SpectrumBin { weight: 0.4, mu_scale: 0.8 },
                SpectrumBin { weight: 0.3, mu_scale: 0.45 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.is_empty() {
            return Err(Error::Param("spectrum has no bins".into()));
        }
        let sum: f64 = self.bins.iter().map(|b| b.weight).sum();
        if self.bins.iter().any(|b| !(b.weight >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Param(format!("spectrum weights must be non-negative and sum to 1, got {sum}")));
        }
        if self.bins.iter().any(|b| !(b.mu_scale > 0.0)) {
            return Err(Error::Param("spectrum mu scales must be positive".into()));
        }
        if self.bins.windows(2).any(|w| w[1].mu_scale >= w[0].mu_scale) {
            return Err(Error::Param("spectrum mu scales must strictly decrease".into()));
        }
        Ok(())
    }

    /// Detected intensity fraction for path integral `p`.
    #[inline]
    pub fn transmission(&self, p: f64) -> f64 {
        self.bins.iter().map(|b| b.weight * (-b.mu_scale * p).exp()).sum()
    }
}

/// Detected photon counts, laid out like a [`ProjectionSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonCounts {
    pub counts: ProjectionSet,
    pub i0: f64,
}

impl PhotonCounts {
    pub fn floor(&self) -> f64 {
        1e-6 * self.i0
    }
}

pub fn counts_from_paths(paths: &ProjectionSet, spectrum: &Spectrum, i0: f64) -> Result<PhotonCounts> {
    spectrum.validate()?;
    if !(i0 > 0.0) {
        return Err(Error::Param(format!("incident intensity {i0} must be positive")));
    }
    let mut counts = paths.clone();
    counts
        .data
        .par_iter_mut()
        .for_each(|p| *p = i0 * spectrum.transmission(*p));
    Ok(PhotonCounts { counts, i0 })
}

pub fn project_counts(
    phantom: &Volume,
    geom: &ConeBeamGeometry,
    spectrum: &Spectrum,
    i0: f64,
) -> Result<PhotonCounts> {
    let paths = forward_project(phantom, geom)?;
    counts_from_paths(&paths, spectrum, i0)
}

/// `W + sqrt(W) * sigma * N(0, 1)`, clamped below at `1e-6 * I0`.
pub fn add_noise(w: &PhotonCounts, sigma: f64, seed: u64) -> Result<PhotonCounts> {
    if !(sigma >= 0.0) {
        return Err(Error::Param(format!("noise level {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(w.clone());
    }
    let floor = w.floor();
    let base = ChaCha8Rng::seed_from_u64(seed);
    let mut out = w.clone();
    let chunk = out.counts.view_len().max(1);
    out.counts
        .data
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(v, view)| {
            for (i, x) in view.iter_mut().enumerate() {
                let mut rng = base.clone();
                rng.set_stream((v * chunk + i) as u64);
                let n: f64 = rng.sample(StandardNormal);
                *x = (*x + x.max(0.0).sqrt() * sigma * n).max(floor);
            }
        });
    Ok(out)
}

/// `-ln(max(W, eps) / I0)`.
pub fn log_normalize(w: &PhotonCounts) -> ProjectionSet {
    let floor = w.floor();
    let mut out = w.counts.clone();
    out.data
        .iter_mut()
        .for_each(|x| *x = -(x.max(floor) / w.i0).ln());
    out
}

/// One simulated acquisition of a phantom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSettings {
    pub n_views: usize,
    pub scan_kind: ScanKind,
    pub sigma: f64,
    pub beam_hardening: bool,
}

impl ScanSettings {
    /// Sparse, short, noisy, polychromatic input scan.
    pub fn desk_input() -> Self {
        ScanSettings {
            n_views: 36,
            scan_kind: ScanKind::ShortScan,
            sigma: 1.0,
            beam_hardening: true,
        }
    }

    /// Dense, full, noiseless, monochromatic reference scan.
    pub fn desk_reference() -> Self {
        ScanSettings {
            n_views: 360,
            scan_kind: ScanKind::FullScan,
            sigma: 0.0,
            beam_hardening: false,
        }
    }
}

/// Projections of one scan and the geometry they belong to.
#[derive(Debug, Clone)]
pub struct Scan {
    pub geom: ConeBeamGeometry,
    pub projections: ProjectionSet,
}

pub fn simulate_scan(
    phantom: &Volume,
    geom: &ConeBeamGeometry,
    spectrum: &Spectrum,
    sigma: f64,
    i0: f64,
    seed: u64,
) -> Result<ProjectionSet> {
    let w = project_counts(phantom, geom, spectrum, i0)?;
    let noisy = add_noise(&w, sigma, seed)?;
    Ok(log_normalize(&noisy))
}

#[derive(Debug, Clone)]
pub struct PairedScan {
    pub input: Scan,
    pub reference: Scan,
    pub phantom: Volume,
    pub truth: Vec<TruthPore>,
}

/// Builds the phantom once and simulates an input/reference scan pair of it.
#[allow(clippy::too_many_arguments)]
pub fn simulate_pair(
    spec: &PhantomSpec,
    base: &ConeBeamGeometry,
    input: &ScanSettings,
    reference: &ScanSettings,
    spectrum: &Spectrum,
    i0: f64,
    seed: u64,
) -> Result<PairedScan> {
    let (phantom, truth) = build_phantom(spec, base.vol_dims, base.voxel_size_mm)?;
    let run = |s: &ScanSettings, seed: u64| -> Result<Scan> {
        let geom = base.with_views(s.scan_kind, s.n_views)?;
        let mono = Spectrum::monochromatic();
        let spec = if s.beam_hardening { spectrum } else { &mono };
        let projections = simulate_scan(&phantom, &geom, spec, s.sigma, i0, seed)?;
        Ok(Scan { geom, projections })
    };
    Ok(PairedScan {
        input: run(input, seed)?,
        reference: run(reference, seed.wrapping_add(1))?,
        phantom,
        truth,
    })
}
