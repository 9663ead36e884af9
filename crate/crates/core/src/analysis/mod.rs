//! Image metrics, region statistics, thresholding and defect scoring.

mod defects;
mod metrics;
mod otsu;

use serde::{Deserialize, Serialize};

pub use defects::{
    body_mask, connected_components, detect_and_score, equivalent_diameter, extract_defects,
    recall_precision, BinStats, DESK_BIN_EDGES_MM, Component, ComponentSummary, DefectReport, REPORT_SCHEMA_VERSION,
};
pub use metrics::{
    cnr, cnr_from, line_profile, mean_std, nrmse, profile_csv, snr, snr_from, ssim, ssim_joint,
    ssim_slice, ssim_with_range, RegionSpec, SsimParams, Window,
};
pub use otsu::{histogram, otsu_bin, otsu_threshold, otsu_threshold_values};

use crate::error::Result;
use crate::projector::Volume;

/// Flat metrics report written by the `eval` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub nrmse: f64,
    pub ssim: f64,
    /// `None` when no regions were given.
    pub snr_db: Option<f64>,
    pub cnr: Option<f64>,
    pub profile_slice: usize,
    pub profile_row: usize,
}

pub fn evaluate(x: &Volume, reference: &Volume, region: Option<&RegionSpec>) -> Result<(MetricsReport, Vec<f64>)> {
    let [_, ny, nz] = x.dims;
    let (z, row) = ((nz - 1) / 2, (ny - 1) / 2);
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        nrmse: nrmse(x, reference)?,
        ssim: ssim(x, reference, &SsimParams::default())?,
        snr_db: region.map(|r| snr(x, r)).transpose()?,
        cnr: region.map(|r| cnr(x, r)).transpose()?,
        profile_slice: z,
        profile_row: row,
    };
    Ok((report, line_profile(x, z, row)?))
}
