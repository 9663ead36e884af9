//! Run configuration: one JSON document with a section per stage. Every field
//! is optional and falls back to the desk-scale defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdk::{FilterSpec, FilterWindow};
use crate::geometry::{ConeBeamGeometry, ScanKind};
use crate::io::read_json;
use crate::pnp::PnPConfig;
use crate::prior::{Architecture, TrainConfig};
use crate::simulator::{PhantomSpec, ScanSettings, Spectrum};

/// Scanner and grid; the angle list comes from the scan sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub source_object_dist_mm: f64,
    pub source_detector_dist_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub pixel_pitch_mm: f64,
    pub vol_dims: [usize; 3],
    pub voxel_size_mm: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            source_object_dist_mm: 200.0,
            source_detector_dist_mm: 400.0,
            det_rows: 96,
            det_cols: 96,
            pixel_pitch_mm: 1.0,
            vol_dims: [64, 64, 64],
            voxel_size_mm: 0.5,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self, scan_kind: ScanKind, n_views: usize) -> Result<ConeBeamGeometry> {
        ConeBeamGeometry::new(
            self.source_object_dist_mm,
            self.source_detector_dist_mm,
            self.det_rows,
            self.det_cols,
            self.pixel_pitch_mm,
            self.vol_dims,
            self.voxel_size_mm,
            scan_kind,
            n_views,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub n_views: usize,
    pub scan_kind: ScanKind,
    pub beam_hardening: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScansConfig {
    pub input: ScanConfig,
    pub reference: ScanConfig,
}

impl Default for ScansConfig {
    fn default() -> Self {
        let (i, r) = (ScanSettings::desk_input(), ScanSettings::desk_reference());
        ScansConfig {
            input: ScanConfig {
                n_views: i.n_views,
                scan_kind: i.scan_kind,
                beam_hardening: i.beam_hardening,
            },
            reference: ScanConfig {
                n_views: r.n_views,
                scan_kind: r.scan_kind,
                beam_hardening: r.beam_hardening,
            },
        }
    }
}

/// Noise on the input scan; the reference scan is always noiseless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
    #[serde(rename = "I0")]
    pub i0: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: 1.0,
            seed: 0,
            i0: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FdkConfig {
    pub window: FilterWindow,
}

impl FdkConfig {
    pub fn filter(&self, det_cols: usize) -> FilterSpec {
        FilterSpec::for_cols(det_cols, self.window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub levels: usize,
    pub base_features: usize,
    pub half_width: usize,
    pub input_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            levels: 2,
            base_features: 8,
            half_width: 2,
            input_scale: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_scale: self.input_scale,
            ..Architecture::new(self.levels, self.base_features, self.half_width)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub phantom: PhantomSpec,
    pub spectrum: Spectrum,
    pub scans: ScansConfig,
    pub noise: NoiseConfig,
    pub fdk: FdkConfig,
    pub pnp: PnPConfig,
    pub prior: PriorConfig,
    pub training: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: GeometryConfig::default(),
            phantom: PhantomSpec::desk_part(0),
            spectrum: Spectrum::polychromatic(),
            scans: ScansConfig::default(),
            noise: NoiseConfig::default(),
            fdk: FdkConfig::default(),
            pnp: PnPConfig::default(),
            prior: PriorConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.build(ScanKind::FullScan, 1)?;
        self.spectrum.validate()?;
        if !(self.noise.sigma >= 0.0) || !(self.noise.i0 > 0.0) {
            return Err(Error::Param("noise sigma must be nonnegative and I0 positive".into()));
        }
        self.pnp.validate()?;
        self.prior.architecture().validate()?;
        self.training.validate()
    }

    pub fn input_settings(&self) -> ScanSettings {
        let s = self.scans.input;
        ScanSettings {
            n_views: s.n_views,
            scan_kind: s.scan_kind,
            sigma: self.noise.sigma,
            beam_hardening: s.beam_hardening,
        }
    }

    pub fn reference_settings(&self) -> ScanSettings {
        let s = self.scans.reference;
        ScanSettings {
            n_views: s.n_views,
            scan_kind: s.scan_kind,
            sigma: 0.0,
            beam_hardening: s.beam_hardening,
        }
    }
}
