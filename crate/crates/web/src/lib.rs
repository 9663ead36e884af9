//! WebAssembly bindings for the browser demo in `www/`.

use ctrecon::analysis::nrmse;
use ctrecon::fdk::{fdk_reconstruct, parker_weights, FilterSpec, FilterWindow};
use ctrecon::geometry::{ConeBeamGeometry, ScanKind};
use ctrecon::simulator::{build_phantom, simulate_scan, PhantomSpec, Spectrum};
use wasm_bindgen::prelude::*;

fn js(e: ctrecon::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(getter_with_clone)]
pub struct Reconstruction {
    pub width: u32,
    pub height: u32,
    /// Central axial slice of the FDK volume, row-major.
    pub slice: Vec<f64>,
    /// The same slice of the phantom.
    pub truth: Vec<f64>,
    pub nrmse: f64,
}

/// Simulates a scan of the desk part and returns its central FDK slice.
#[wasm_bindgen]
pub fn reconstruct_slice(
    n_views: u32,
    short_scan: bool,
    beam_hardening: bool,
    sigma: f64,
    seed: u32,
    hann: bool,
) -> Result<Reconstruction, JsError> {
    let kind = if short_scan { ScanKind::ShortScan } else { ScanKind::FullScan };
    let geom = ConeBeamGeometry::desk(kind, n_views as usize).map_err(js)?;
    let (phantom, _) = build_phantom(&PhantomSpec::desk_part(seed as u64), geom.vol_dims, geom.voxel_size_mm).map_err(js)?;
    let spectrum = if beam_hardening { Spectrum::polychromatic() } else { Spectrum::monochromatic() };
    let y = simulate_scan(&phantom, &geom, &spectrum, sigma, 1e4, seed as u64).map_err(js)?;
    let window = if hann { FilterWindow::Hann } else { FilterWindow::RamLak };
    let x = fdk_reconstruct(&y, &geom, &FilterSpec::for_cols(geom.det_cols, window)).map_err(js)?;
    let z = geom.vol_dims[2] / 2;
    Ok(Reconstruction {
        width: geom.vol_dims[0] as u32,
        height: geom.vol_dims[1] as u32,
        slice: x.slice(z).to_vec(),
        truth: phantom.slice(z).to_vec(),
        nrmse: nrmse(&x, &phantom).map_err(js)?,
    })
}

#[wasm_bindgen(getter_with_clone)]
pub struct ParkerMap {
    pub views: u32,
    pub cols: u32,
    pub weights: Vec<f64>,
    pub angles_deg: Vec<f64>,
}

/// Parker weights of a desk short scan, one row per view.
#[wasm_bindgen]
pub fn parker_map(n_views: u32) -> Result<ParkerMap, JsError> {
    let geom = ConeBeamGeometry::desk(ScanKind::ShortScan, n_views as usize).map_err(js)?;
    Ok(ParkerMap {
        views: n_views,
        cols: geom.det_cols as u32,
        weights: parker_weights(&geom).map_err(js)?,
        angles_deg: geom.angles_deg.clone(),
    })
}

/// Measured line integral `-ln T(p)` of the polychromatic spectrum at `n`
/// path integrals spaced evenly on `[0, max_path]`. The monochromatic
/// measurement is `p` itself.
#[wasm_bindgen]
pub fn hardening_curve(max_path: f64, n: u32) -> Vec<f64> {
    let s = Spectrum::polychromatic();
    let n = n.max(2) as usize;
    (0..n)
        .map(|i| -s.transmission(max_path * i as f64 / (n - 1) as f64).ln())
        .collect()
}
