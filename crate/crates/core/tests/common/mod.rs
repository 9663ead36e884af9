#![allow(dead_code)]

use ctrecon::analysis::nrmse;
use ctrecon::fdk::{fdk_reconstruct, FilterSpec, FilterWindow};
use ctrecon::geometry::{ConeBeamGeometry, ScanKind};
use ctrecon::projector::{Operator, ProjectionSet, Volume};
use ctrecon::simulator::{build_phantom, simulate_scan, PhantomSpec, Pore, RandomPores, Solid, Spectrum, TruthPore};
use nalgebra::DMatrix;
use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub const SPHERE_MU: f64 = 0.02;

pub fn sphere_spec(radius_mm: f64) -> PhantomSpec {
    PhantomSpec {
        body: vec![Solid::Sphere {
            center_mm: [0.0; 3],
            radius_mm,
            mu: SPHERE_MU,
        }],
        ..Default::default()
    }
}

pub fn cylinder_spec() -> PhantomSpec {
    PhantomSpec {
        body: vec![Solid::Cylinder {
            center_mm: [0.0, 0.0],
            radius_mm: 11.0,
            z_min_mm: -11.0,
            z_max_mm: 11.0,
            mu: 0.08,
        }],
        ..Default::default()
    }
}

/// Noiseless FDK of a phantom on the desk grid.
pub fn desk_fdk(spec: &PhantomSpec, kind: ScanKind, n_views: usize, spectrum: &Spectrum) -> (Volume, Volume) {
    let geom = ConeBeamGeometry::desk(kind, n_views).unwrap();
    let (phantom, _) = build_phantom(spec, geom.vol_dims, geom.voxel_size_mm).unwrap();
    let y = simulate_scan(&phantom, &geom, spectrum, 0.0, 1e4, 0).unwrap();
    let x = fdk_reconstruct(&y, &geom, &FilterSpec::for_cols(geom.det_cols, FilterWindow::RamLak)).unwrap();
    (phantom, x)
}

pub fn central_slice_nrmse(x: &Volume, phantom: &Volume) -> f64 {
    let z = x.dims[2] / 2;
    nrmse(&x.slab(z, z), &phantom.slab(z, z)).unwrap()
}

/// Mean over the central slice inside `frac` of the radius.
pub fn core_mean(x: &Volume, radius_mm: f64, frac: f64) -> f64 {
    let [nx, ny, nz] = x.dims;
    let z = nz / 2;
    let c = |i: usize, n: usize| (i as f64 - (n as f64 - 1.0) / 2.0) * x.voxel_size_mm;
    let (mut s, mut n) = (0.0, 0);
    for y in 0..ny {
        for xi in 0..nx {
            if c(xi, nx).hypot(c(y, ny)) <= frac * radius_mm {
                s += x.get(xi, y, z);
                n += 1;
            }
        }
    }
    s / n as f64
}

/// Centre over edge mean along the central row of the central slice of the
/// desk cylinder (radius 11 mm).
pub fn cupping_ratio(x: &Volume) -> f64 {
    let [nx, ny, nz] = x.dims;
    let row = &x.slice(nz / 2)[(ny / 2) * nx..(ny / 2 + 1) * nx];
    let r = |i: usize| ((i as f64 - (nx as f64 - 1.0) / 2.0) * x.voxel_size_mm).abs() / 11.0;
    let mean = |f: &dyn Fn(f64) -> bool| {
        let v: Vec<f64> = (0..nx).filter(|&i| f(r(i))).map(|i| row[i]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    mean(&|t| t < 0.15) / mean(&|t| (0.75..=0.9).contains(&t))
}

/// Explicit matrix of an operator, one column per voxel.
pub fn dense_matrix(op: &Operator, dims: [usize; 3], voxel_size_mm: f64) -> DMatrix<f64> {
    let n: usize = dims.iter().product();
    let mut e = Volume::zeros(dims, voxel_size_mm);
    let m = op.forward(&e).unwrap().data.len();
    let mut a = DMatrix::zeros(m, n);
    for j in 0..n {
        e.data.fill(0.0);
        e.data[j] = 1.0;
        let col = op.forward(&e).unwrap().data;
        for i in 0..m {
            a[(i, j)] = col[i];
        }
    }
    a
}

/// 12-voxel grid seen by 20 detector samples: a 3x2x2 volume, a 5x2 detector
/// and two views roughly a quarter turn apart.
pub fn tiny_dense_geometry() -> ConeBeamGeometry {
    ConeBeamGeometry::new(50.0, 100.0, 2, 5, 0.6, [3, 2, 2], 0.25, ScanKind::ShortScan, 2).unwrap()
}

/// 1 mm grid with a solid block; pores are given in voxel coordinates.
pub fn block_scene(pores: &[([f64; 3], f64)]) -> (Volume, Vec<TruthPore>) {
    let dims = [32, 32, 32];
    let to_mm = |v: f64| v - 15.5;
    let spec = PhantomSpec {
        body: vec![Solid::Box {
            min_mm: [-12.0; 3],
            max_mm: [12.0; 3],
            mu: 1.0,
        }],
        pores: pores
            .iter()
            .map(|&(c, d)| Pore {
                center_mm: [to_mm(c[0]), to_mm(c[1]), to_mm(c[2])],
                diameter_mm: d,
            })
            .collect(),
        ..Default::default()
    };
    build_phantom(&spec, dims, 1.0).unwrap()
}

/// Sets a cube of voxels to zero, making a spurious sub-threshold blob.
pub fn carve_cube(vol: &mut Volume, lo: [usize; 3], side: usize) {
    for z in lo[2]..lo[2] + side {
        for y in lo[1]..lo[1] + side {
            for x in lo[0]..lo[0] + side {
                let i = vol.index(x, y, z);
                vol.data[i] = 0.0;
            }
        }
    }
}

/// Puts material back into the voxels of a pore, so detection misses it.
pub fn fill_pore(vol: &mut Volume, pore: &TruthPore) {
    for i in pore.voxels(vol.dims, vol.voxel_size_mm) {
        vol.data[i] = 1.0;
    }
}

pub struct Scene {
    pub name: &'static str,
    pub vol: Volume,
    pub truth: Vec<TruthPore>,
    pub edges: Vec<f64>,
    /// Expected overall recall and precision.
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    /// Expected per-bin recall and precision.
    pub bins: Vec<(Option<f64>, Option<f64>)>,
}

/// Hand-built scenes with zero to three pores and zero or one spurious blob.
/// The counts were worked out by hand from the construction.
pub fn detection_scenes() -> Vec<Scene> {
    let one_bin = vec![0.0, 20.0];
    let p1 = ([10.0, 10.0, 10.0], 5.0);
    let p2 = ([21.0, 10.0, 16.0], 6.0);
    let p3 = ([12.0, 21.0, 20.0], 7.0);
    let mut out = Vec::new();

    let (vol, truth) = block_scene(&[]);
    out.push(Scene {
        name: "empty block",
        vol,
        truth,
        edges: one_bin.clone(),
        recall: None,
        precision: None,
        bins: vec![(None, None)],
    });

    let (mut vol, truth) = block_scene(&[]);
    carve_cube(&mut vol, [20, 20, 8], 2);
    out.push(Scene {
        name: "spurious only",
        vol,
        truth,
        edges: one_bin.clone(),
        recall: None,
        precision: Some(0.0),
        bins: vec![(None, Some(0.0))],
    });

    let (vol, truth) = block_scene(&[p1]);
    out.push(Scene {
        name: "one pore",
        vol,
        truth,
        edges: one_bin.clone(),
        recall: Some(1.0),
        precision: Some(1.0),
        bins: vec![(Some(1.0), Some(1.0))],
    });

    let (mut vol, truth) = block_scene(&[p1, p2]);
    carve_cube(&mut vol, [20, 22, 24], 2);
    out.push(Scene {
        name: "two pores and a blob",
        vol,
        truth,
        edges: one_bin.clone(),
        recall: Some(1.0),
        precision: Some(2.0 / 3.0),
        bins: vec![(Some(1.0), Some(2.0 / 3.0))],
    });

    let (mut vol, truth) = block_scene(&[p1, p2, p3]);
    fill_pore(&mut vol, &truth[2]);
    carve_cube(&mut vol, [20, 22, 6], 2);
    out.push(Scene {
        name: "three pores, one missed, one blob",
        vol,
        truth,
        edges: one_bin.clone(),
        recall: Some(2.0 / 3.0),
        precision: Some(2.0 / 3.0),
        bins: vec![(Some(2.0 / 3.0), Some(2.0 / 3.0))],
    });

    // bins [0,3) [3,5.5) [5.5,10): the blob (equivalent diameter about 2.5)
    // lands alone in the first bin, the 5-voxel pore in the second and the
    // two larger pores in the third, of which one is missed
    let (mut vol, truth) = block_scene(&[p1, p2, p3]);
    fill_pore(&mut vol, &truth[1]);
    carve_cube(&mut vol, [20, 22, 6], 2);
    out.push(Scene {
        name: "three pores binned",
        vol,
        truth,
        edges: vec![0.0, 3.0, 5.5, 10.0],
        recall: Some(2.0 / 3.0),
        precision: Some(2.0 / 3.0),
        bins: vec![(None, Some(0.0)), (Some(1.0), Some(1.0)), (Some(0.5), Some(1.0))],
    });
    out
}

pub const BIN: &str = env!("CARGO_BIN_EXE_ctrecon");

pub fn run<S: AsRef<std::ffi::OsStr>>(dir: &Path, args: &[S]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

pub fn ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(dir: &Path, args: &[S]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub const SMALL_CONFIG: &str = r#"{
  "geometry": {"det_rows": 48, "det_cols": 48, "pixel_pitch_mm": 2.0, "vol_dims": [32, 32, 32], "voxel_size_mm": 1.0},
  "scans": {"input": {"n_views": 24, "scan_kind": "ShortScan", "beam_hardening": true},
            "reference": {"n_views": 90, "scan_kind": "FullScan", "beam_hardening": false}},
  "phantom": {"body": [{"kind": "cylinder", "center_mm": [0, 0], "radius_mm": 11, "z_min_mm": -11, "z_max_mm": 11, "mu": 0.08}],
              "random_pores": {"count": 10, "diameter_min_mm": 2.0, "diameter_max_mm": 4.0}, "rng_seed": 3},
  "noise": {"seed": 7},
  "training": {"epochs": 3, "patch": [16, 16], "stride": [2, 16, 16]},
  "prior": {"half_width": HW},
  "pnp": {"K": 2, "cg_steps": 3}
}"#;

pub fn small_config(dir: &Path, half_width: usize) {
    fs::write(dir.join("cfg.json"), SMALL_CONFIG.replace("HW", &half_width.to_string())).unwrap();
}

/// simulate, FDK of both scans, training and PnP in `dir`.
pub fn reconstruct(dir: &Path, threads: Option<&str>) {
    let t: Vec<String> = threads.map_or(vec![], |n| vec!["--threads".into(), n.into()]);
    let with = |args: &[&str]| -> Vec<String> { t.iter().cloned().chain(args.iter().map(|a| a.to_string())).collect() };
    ok(dir, &with(&["simulate", "--config", "cfg.json", "--out-dir", "sim"]));
    ok(dir, &with(&["fdk", "--proj", "sim/input.json", "--out", "input_fdk.json"]));
    ok(dir, &with(&["fdk", "--proj", "sim/reference.json", "--out", "reference_fdk.json"]));
    fs::write(dir.join("pairs.txt"), "input_fdk.json reference_fdk.json\n").unwrap();
    ok(dir, &with(&["train-prior", "--pairs", "pairs.txt", "--config", "cfg.json", "--out", "prior.ckpt", "--log", "train.csv"]));
    ok(
        dir,
        &with(&["pnp", "--proj", "sim/input.json", "--prior", "prior.ckpt", "--out", "pnp.json", "--trace", "trace.json", "--config", "cfg.json"]),
    );
}

pub fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("run_manifest.json")).unwrap()).unwrap()
}

pub fn strip_timing(mut trace: Value) -> Value {
    trace["fdk_wall_time_s"] = Value::from(0.0);
    for it in trace["iterations"].as_array_mut().unwrap() {
        it["wall_time_s"] = Value::from(0.0);
    }
    trace
}


/// 12-view short scan of a small porous cylinder with noise and beam
/// hardening on a 32^3 grid.
pub fn small_scan() -> (ProjectionSet, ConeBeamGeometry) {
    let geom = ConeBeamGeometry::new(200.0, 400.0, 48, 48, 1.0, [32, 32, 32], 0.5, ScanKind::ShortScan, 12).unwrap();
    let spec = PhantomSpec {
        body: vec![Solid::Cylinder {
            center_mm: [0.0, 0.0],
            radius_mm: 5.5,
            z_min_mm: -5.5,
            z_max_mm: 5.5,
            mu: 0.08,
        }],
        random_pores: Some(RandomPores {
            count: 4,
            diameter_min_mm: 1.0,
            diameter_max_mm: 2.0,
        }),
        rng_seed: 1,
        ..Default::default()
    };
    let (phantom, _) = build_phantom(&spec, geom.vol_dims, geom.voxel_size_mm).unwrap();
    let y = simulate_scan(&phantom, &geom, &Spectrum::polychromatic(), 1.0, 1e4, 4).unwrap();
    (y, geom)
}
