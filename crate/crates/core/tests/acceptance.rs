//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use ctrecon::analysis::{detect_and_score, nrmse, otsu_bin};
use ctrecon::fdk::{fdk_reconstruct, FilterSpec, FilterWindow};
use ctrecon::geometry::{ConeBeamGeometry, ScanKind};
use ctrecon::pnp::{cg_solve, default_beta_grid, pnp_reconstruct, PnPConfig};
use ctrecon::prior::{
    denoise_volume, net_backward, net_forward, net_forward_cached, train_prior, Architecture, Dataset,
    PriorParams, Tensor, TrainConfig,
};
use ctrecon::projector::{back_project, forward_project, restrict_center, Operator, ProjectionSet, Volume};
use ctrecon::simulator::{add_noise, simulate_pair, PhantomSpec, PhotonCounts, ScanSettings, Spectrum};
use nalgebra::DVector;
use num::{BigInt, BigRational};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_volume(dims: [usize; 3], vs: f64, rng: &mut ChaCha8Rng) -> Volume {
    let n = dims.iter().product();
    Volume::from_data(dims, vs, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn adjoint() -> Outcome {
    let t0 = Instant::now();
    let g = ConeBeamGeometry::new(200.0, 400.0, 24, 24, 1.0, [32, 32, 32], 0.25, ScanKind::FullScan, 8).unwrap();
    let r = restrict_center(&g, 4).unwrap();
    let op_c = Operator::center(&g, r);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_c) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = random_volume(g.vol_dims, g.voxel_size_mm, &mut rng);
        let mut y = ProjectionSet::for_geometry(&g);
        y.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let ax = forward_project(&x, &g).unwrap();
        let aty = back_project(&y, &g).unwrap();
        let e = (dot(&ax.data, &y.data) - dot(&x.data, &aty.data)).abs()
            / (dot(&ax.data, &ax.data).sqrt() * dot(&y.data, &y.data).sqrt());
        worst = worst.max(e);

        let xs = x.slab(r.slab_lo, r.slab_hi);
        let yc = y.rows(r.row_lo, r.row_hi);
        let ax = op_c.forward(&xs).unwrap();
        let aty = op_c.adjoint(&yc).unwrap();
        let e = (dot(&ax.data, &yc.data) - dot(&xs.data, &aty.data)).abs()
            / (dot(&ax.data, &ax.data).sqrt() * dot(&yc.data, &yc.data).sqrt());
        worst_c = worst_c.max(e);
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-5 && worst_c < 1e-5 && secs < 60.0,
        format!("max rel err full {worst:.2e}, centre {worst_c:.2e} (< 1e-5); {secs:.1} s"),
    )
}

fn fdk_sphere() -> Outcome {
    let t0 = Instant::now();
    let spec = sphere_spec(10.0);
    let (phantom, full) = desk_fdk(&spec, ScanKind::FullScan, 360, &Spectrum::monochromatic());
    let (_, short) = desk_fdk(&spec, ScanKind::ShortScan, 360, &Spectrum::monochromatic());
    let e_full = central_slice_nrmse(&full, &phantom);
    let e_short = central_slice_nrmse(&short, &phantom);
    let core = core_mean(&full, 10.0, 0.8);
    let dev = (core / SPHERE_MU - 1.0).abs();
    let secs = t0.elapsed().as_secs_f64();
    check(
        e_full < 0.10 && dev < 0.05 && e_short <= 1.5 * e_full && secs < 120.0,
        format!(
            "full NRMSE {e_full:.4} (< 0.10), core mean {core:.5} off by {:.2}% (< 5%), short NRMSE {e_short:.4} (<= {:.4}); {secs:.1} s",
            100.0 * dev,
            1.5 * e_full
        ),
    )
}

fn noise_model() -> Outcome {
    let t0 = Instant::now();
    let n = 100_000;
    let w = PhotonCounts {
        counts: ProjectionSet {
            n_views: 1,
            det_rows: 1,
            det_cols: n,
            angles_deg: vec![0.0],
            data: vec![1e4; n],
        },
        i0: 1e4,
    };
    let mut parts = Vec::new();
    let mut pass = true;
    for (sigma, seed) in [(0.5, 1), (1.0, 2)] {
        let v = add_noise(&w, sigma, seed).unwrap().counts.data;
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let want = 1e4 * sigma * sigma;
        let rel = (var / want - 1.0).abs();
        pass &= rel < 0.02;
        parts.push(format!("sigma {sigma}: var {var:.1} vs {want} ({:.2}%)", 100.0 * rel));
    }
    let same = add_noise(&w, 0.0, 3).unwrap() == w;
    let secs = t0.elapsed().as_secs_f64();
    check(
        pass && same && secs < 10.0,
        format!("{}; sigma 0 identity {same}; {secs:.1} s", parts.join(", ")),
    )
}

fn beam_hardening() -> Outcome {
    let t0 = Instant::now();
    let spec = cylinder_spec();
    let (_, poly) = desk_fdk(&spec, ScanKind::FullScan, 360, &Spectrum::polychromatic());
    let (_, mono) = desk_fdk(&spec, ScanKind::FullScan, 360, &Spectrum::monochromatic());
    let (rp, rm) = (cupping_ratio(&poly), cupping_ratio(&mono));
    let secs = t0.elapsed().as_secs_f64();
    check(
        rp < 0.97 && rm >= 0.99 && secs < 120.0,
        format!("centre/edge polychromatic {rp:.4} (< 0.97), monochromatic {rm:.4} (>= 0.99); {secs:.1} s"),
    )
}

fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let arch = Architecture::new(1, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = PriorParams::init(arch, 5);
    let x = random_tensor(5, 8, 8, &mut rng);
    let u = random_tensor(1, 8, 8, &mut rng);
    let (_, cache) = net_forward_cached(&p, &x).unwrap();
    let mut g = vec![0.0; p.values.len()];
    net_backward(&p, &cache, &u, &mut g).unwrap();
    let f = |q: &PriorParams| dot(&net_forward(q, &x).unwrap().data, &u.data);
    let step = 1e-5;
    let mut q = p.clone();
    let fd: Vec<f64> = (0..g.len())
        .map(|i| {
            let v = q.values[i];
            q.values[i] = v + step;
            let fp = f(&q);
            q.values[i] = v - step;
            let fm = f(&q);
            q.values[i] = v;
            (fp - fm) / (2.0 * step)
        })
        .collect();
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for s in arch.layers() {
        for (lo, hi) in [(s.w_off, s.b_off), (s.b_off, s.b_off + s.cout)] {
            let diff = (lo..hi).map(|i| (g[i] - fd[i]).powi(2)).sum::<f64>().sqrt();
            let scale = (lo..hi).map(|i| fd[i].powi(2)).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(diff / scale);
            tensors += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 60.0,
        format!("{tensors} tensors, worst relative error {worst:.2e} (< 1e-4); {secs:.1} s"),
    )
}

fn prior_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vol = random_volume([64, 64, 12], 0.5, &mut rng);
    let mut identity = true;
    for h in [0, 2] {
        let z = PriorParams::zeros(Architecture::new(2, 8, h));
        identity &= denoise_volume(&z, &vol, h).unwrap() == vol;
    }
    let p = PriorParams::init(Architecture::new(2, 8, 0), 9);
    let ours = denoise_volume(&p, &vol, 0).unwrap();
    let mut exact = true;
    for z in 0..12 {
        let s = vol.slice(z);
        let r = net_forward(&p, &Tensor::from_data(1, 64, 64, s.to_vec()).unwrap()).unwrap();
        let reference: Vec<f64> = s.iter().zip(&r.data).map(|(a, b)| a - b).collect();
        exact &= ours.slice(z) == &reference[..];
    }
    check(
        identity && exact,
        format!("zero net identity {identity}; half-width 0 equals single-slice path bit for bit {exact}"),
    )
}

fn cg_oracle() -> Outcome {
    let geom = tiny_dense_geometry();
    let op = Operator::full(&geom);
    let a = dense_matrix(&op, geom.vol_dims, geom.voxel_size_mm);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for beta in [1.0, 0.125, 2f64.powi(-13)] {
        let z = random_volume(geom.vol_dims, geom.voxel_size_mm, &mut rng);
        let x0 = random_volume(geom.vol_dims, geom.voxel_size_mm, &mut rng);
        let mut y = op.forward(&random_volume(geom.vol_dims, geom.voxel_size_mm, &mut rng)).unwrap();
        y.data.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        let m = a.transpose() * &a + nalgebra::DMatrix::identity(12, 12) * beta;
        let b = a.transpose() * DVector::from_column_slice(&y.data) + DVector::from_column_slice(&z.data) * beta;
        let exact = m.cholesky().unwrap().solve(&b);
        let (x, rep) = cg_solve(&op, beta, &z, &y, &x0, 12).unwrap();
        worst = worst.max(x.data.iter().zip(exact.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
        monotone &= rep.objectives.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs());
    }
    // objective along every solve of a small reconstruction
    let (y, g) = small_scan();
    let prior = PriorParams::init(Architecture::new(2, 4, 2), 1);
    let (_, trace) =
        pnp_reconstruct(&y, &g, &prior, &PnPConfig::default(), &FilterSpec::for_cols(g.det_cols, FilterWindow::RamLak))
            .unwrap();
    for it in &trace.iterations {
        monotone &= it.cg.objectives.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs());
    }
    check(
        worst < 1e-8 && monotone,
        format!("20x12 instance max |x_cg - x_direct| {worst:.2e} (< 1e-8); objective non-increasing {monotone}"),
    )
}

fn hyperparameters() -> Outcome {
    let cfg = PnPConfig::default();
    let grid: Vec<f64> = (0..15).map(|i| 2f64.powi(1 - i)).collect();
    let defaults = cfg.k == 3 && cfg.cg_steps == 10 && cfg.beta_grid == grid && default_beta_grid(15) == grid;
    let (y, g) = small_scan();
    let prior = PriorParams::init(Architecture::new(2, 4, 2), 2);
    let (_, t) = pnp_reconstruct(&y, &g, &prior, &cfg, &FilterSpec::for_cols(g.det_cols, FilterWindow::RamLak)).unwrap();
    check(
        defaults && t.denoiser_calls == 3 && t.selections == 3,
        format!(
            "K {} cg_steps {} grid {} values from {} to {:e}; trace: {} denoiser calls, {} selections, {} CG steps",
            cfg.k,
            cfg.cg_steps,
            cfg.beta_grid.len(),
            cfg.beta_grid[0],
            cfg.beta_grid[14],
            t.denoiser_calls,
            t.selections,
            t.cg_steps_total
        ),
    )
}

fn exhaustive_otsu(hist: &[u64]) -> Option<usize> {
    let n: u64 = hist.iter().sum();
    let mut best: Option<(usize, BigRational)> = None;
    for t in 1..hist.len() {
        let n0: u64 = hist[..t].iter().sum();
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let mean = |r: std::ops::Range<usize>, c: u64| {
            BigRational::new(BigInt::from(r.map(|i| i as u64 * hist[i]).sum::<u64>()), BigInt::from(c))
        };
        let d = mean(0..t, n0) - mean(t..hist.len(), n1);
        let v = BigRational::new(BigInt::from(n0), BigInt::from(n))
            * BigRational::new(BigInt::from(n1), BigInt::from(n))
            * d.clone()
            * d;
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((t, v));
        }
    }
    best.map(|(t, _)| t)
}

fn otsu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let sparse = trial % 2 == 1;
        let h: Vec<u64> = (0..256)
            .map(|_| if sparse && rng.random_bool(0.8) { 0 } else { rng.random_range(0..5000) })
            .collect();
        if otsu_bin(&h).ok() != exhaustive_otsu(&h) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} of 1000 histograms differ from exhaustive search"))
}

fn detection() -> Outcome {
    let scenes = detection_scenes();
    let mut bad = Vec::new();
    for s in &scenes {
        let (_, rep) = detect_and_score(&s.vol, &s.truth, &s.edges).unwrap();
        let bins: Vec<_> = rep.bins.iter().map(|b| (b.recall, b.precision)).collect();
        if rep.recall != s.recall || rep.precision != s.precision || bins != s.bins {
            bad.push(s.name);
        }
    }
    let (_, empty) = detect_and_score(&scenes[0].vol, &scenes[0].truth, &scenes[0].edges).unwrap();
    let sentinel = empty.csv().contains("undefined,undefined");
    check(
        bad.is_empty() && sentinel,
        format!("{} scenes, mismatched {:?}; undefined sentinel in CSV {sentinel}", scenes.len(), bad),
    )
}

struct TrendRow {
    fdk: f64,
    pnp: [f64; 2],
    recall: [f64; 2],
}

fn trend_triple(phantom_seed: u64, noise_seed: u64, train_seed: u64) -> TrendRow {
    let base = ConeBeamGeometry::desk(ScanKind::FullScan, 360).unwrap();
    let fs = FilterSpec::for_cols(base.det_cols, FilterWindow::RamLak);
    let sim = |p: u64, n: u64| {
        simulate_pair(
            &PhantomSpec::desk_part(p),
            &base,
            &ScanSettings::desk_input(),
            &ScanSettings::desk_reference(),
            &Spectrum::polychromatic(),
            1e4,
            n,
        )
        .unwrap()
    };
    let train = sim(phantom_seed, noise_seed);
    let held = sim(phantom_seed + 1, noise_seed + 2);
    let input = fdk_reconstruct(&train.input.projections, &train.input.geom, &fs).unwrap();
    let target = fdk_reconstruct(&train.reference.projections, &train.reference.geom, &fs).unwrap();
    let x_fdk = fdk_reconstruct(&held.input.projections, &held.input.geom, &fs).unwrap();
    let mut row = TrendRow {
        fdk: nrmse(&x_fdk, &held.phantom).unwrap(),
        pnp: [0.0; 2],
        recall: [0.0; 2],
    };
    let edges = [0.0, 1.0, 1.25, 1.5, 2.01];
    for (k, h) in [0usize, 2].into_iter().enumerate() {
        let cfg = TrainConfig {
            seed: train_seed,
            ..Default::default()
        };
        let ds = Dataset::from_pairs(&[(&input, &target)], h, &cfg).unwrap();
        let prior = train_prior(&ds, Architecture::new(2, 8, h), &cfg).unwrap().params;
        let (x, _) = pnp_reconstruct(&held.input.projections, &held.input.geom, &prior, &PnPConfig::default(), &fs).unwrap();
        row.pnp[k] = nrmse(&x, &held.phantom).unwrap();
        row.recall[k] = detect_and_score(&x, &held.truth, &edges).unwrap().1.recall.unwrap();
    }
    row
}

fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let (mut all_a, mut n_b) = (true, 0);
    let mut parts = Vec::new();
    for (p, n, t) in [(11, 21, 31), (12, 22, 32), (13, 23, 33)] {
        let r = trend_triple(p, n, t);
        let a = r.pnp[0] < r.fdk && r.pnp[1] < r.fdk;
        let b = r.recall[1] >= r.recall[0];
        all_a &= a;
        n_b += b as usize;
        let line = format!(
            "seeds ({p},{n},{t}): NRMSE FDK {:.4}, 2D PnP {:.4}, 2.5D PnP {:.4}; recall 2D {:.4}, 2.5D {:.4}",
            r.fdk, r.pnp[0], r.pnp[1], r.recall[0], r.recall[1]
        );
        println!("    {line}");
        parts.push(line);
    }
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    check(
        all_a && n_b >= 2,
        format!("(a) all triples {all_a}; (b) {n_b} of 3 triples (>= 2); {mins:.1} min"),
    )
}

fn reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        small_config(d, 2);
        reconstruct(d, Some("1"));
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for sub in ["sim", "."] {
        let (da, db) = (a.path().join(sub), b.path().join(sub));
        let (ma, mb) = (manifest(&da), manifest(&db));
        for (name, run) in ma["runs"].as_object().unwrap() {
            for art in run["artifacts"].as_array().unwrap() {
                let f = art["path"].as_str().unwrap();
                let same = if f.ends_with("trace.json") {
                    let read = |d: &Path| strip_timing(serde_json::from_slice::<Value>(&fs::read(d.join(f)).unwrap()).unwrap());
                    read(&da) == read(&db)
                } else {
                    art["sha256"] == mb["runs"][name]["artifacts"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .find(|x| x["path"] == art["path"])
                        .map_or(Value::Null, |x| x["sha256"].clone())
                        && fs::read(da.join(f)).unwrap() == fs::read(db.join(f)).unwrap()
                };
                compared += 1;
                if !same {
                    differing.push(f.to_string());
                }
            }
        }
    }
    check(
        differing.is_empty() && compared >= 10,
        format!("{compared} artifacts from two single-thread runs, differing {differing:?} (trace timing fields excluded)"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("adjoint consistency", adjoint),
        ("FDK correctness", fdk_sphere),
        ("noise model", noise_model),
        ("beam hardening", beam_hardening),
        ("prior gradient check", gradient_check),
        ("prior identity and 2D/2.5D degeneracy", prior_degeneracy),
        ("CG oracle", cg_oracle),
        ("hyperparameter fidelity", hyperparameters),
        ("Otsu oracle", otsu),
        ("detection oracle", detection),
        ("end-to-end trend", end_to_end),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match out {
            Ok(d) => println!("criterion {:>2} PASS {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} of 12 criteria pass", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
