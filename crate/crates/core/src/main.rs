use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ctrecon::analysis::{detect_and_score, evaluate, profile_csv, RegionSpec, DESK_BIN_EDGES_MM};
use ctrecon::config::RunConfig;
use ctrecon::fdk::{fdk_reconstruct, FilterSpec, FilterWindow};
use ctrecon::io::{
    payload_path, read_file, read_json, read_projections, read_volume, sha256_file, write_atomic, write_json,
    write_pgm16, write_projections, write_volume, Dtype,
};
use ctrecon::pnp::pnp_reconstruct;
use ctrecon::prior::{read_checkpoint, train_prior, write_checkpoint, Checkpoint, Dataset};
use ctrecon::projector::Volume;
use ctrecon::simulator::{simulate_pair, TruthPore};
use ctrecon::{Error, Result};

const MANIFEST_NAME: &str = "run_manifest.json";
const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "ctrecon", version, about = "Cone-beam CT simulation, reconstruction and evaluation")]
struct Cli {
    /// Worker threads; 1 gives bit-exact reruns.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Window {
    Ramlak,
    Hann,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the input and reference scans of a phantom.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Filtered backprojection.
    Fdk {
        #[arg(long)]
        proj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        window: Option<Window>,
    },
    /// Plug-and-play reconstruction with a trained prior.
    Pnp {
        #[arg(long)]
        proj: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the slice-stack prior on aligned volume pairs.
    TrainPrior {
        /// Text file with one `input target` pair of volume headers per line.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Image metrics against a reference volume.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// JSON region spec for SNR and CNR.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Line profile CSV; defaults next to the report.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Otsu segmentation and diameter-binned recall and precision.
    Detect {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Bin table CSV; defaults next to the report.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Comma-separated diameter bin edges in mm.
        #[arg(long, value_delimiter = ',')]
        bins: Option<Vec<f64>>,
    },
    /// One axial slice as a 16-bit graymap.
    SliceDump {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        z: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRecord {
    tool_version: String,
    args: Vec<String>,
    threads: Option<usize>,
    config: Option<RunConfig>,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<FileDigest>,
    artifacts: Vec<FileDigest>,
}

/// One record per subcommand, so a pipeline sharing a directory keeps the
/// latest run of each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    runs: BTreeMap<String, RunRecord>,
}

struct Run {
    name: &'static str,
    config: Option<RunConfig>,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn new(name: &'static str) -> Self {
        Run {
            name,
            config: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn input_volume(&mut self, p: &Path) {
        self.input(p);
        self.input(&payload_path(p));
    }

    fn artifact(&mut self, p: &Path) {
        self.artifacts.push(p.to_path_buf());
    }

    fn artifact_with_payload(&mut self, p: &Path) {
        self.artifact(p);
        self.artifact(&payload_path(p));
    }

    fn write_manifest(self, threads: Option<usize>) -> Result<()> {
        let dir = self
            .artifacts
            .first()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let digest = |p: &PathBuf, rel: bool| -> Result<FileDigest> {
            let shown = match (rel, p.strip_prefix(&dir)) {
                (true, Ok(r)) => r,
                _ => p.as_path(),
            };
            Ok(FileDigest {
                path: shown.to_string_lossy().into_owned(),
                sha256: sha256_file(p)?,
            })
        };
        let record = RunRecord {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            args: std::env::args().skip(1).collect(),
            threads,
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs.iter().map(|p| digest(p, false)).collect::<Result<_>>()?,
            artifacts: self.artifacts.iter().map(|p| digest(p, true)).collect::<Result<_>>()?,
        };
        let path = dir.join(MANIFEST_NAME);
        let mut manifest = if path.exists() {
            read_json::<Manifest>(&path).unwrap_or(Manifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                runs: BTreeMap::new(),
            })
        } else {
            Manifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                runs: BTreeMap::new(),
            }
        };
        manifest.runs.insert(self.name.into(), record);
        write_json(&path, &manifest)
    }
}

fn load_config(path: Option<&Path>, run: &mut Run) -> Result<RunConfig> {
    match path {
        Some(p) => {
            run.input(p);
            RunConfig::load(p)
        }
        None => Ok(RunConfig::default()),
    }
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn simulate(config: Option<&Path>, out_dir: &Path) -> Result<Run> {
    let mut run = Run::new("simulate");
    let cfg = load_config(config, &mut run)?;
    fs::create_dir_all(out_dir)?;
    let s_in = cfg.input_settings();
    let base = cfg.geometry.build(s_in.scan_kind, s_in.n_views)?;
    let pair = simulate_pair(
        &cfg.phantom,
        &base,
        &s_in,
        &cfg.reference_settings(),
        &cfg.spectrum,
        cfg.noise.i0,
        cfg.noise.seed,
    )?;
    let input = out_dir.join("input.json");
    let reference = out_dir.join("reference.json");
    let phantom = out_dir.join("phantom.json");
    let truth = out_dir.join("truth.json");
    write_projections(&input, &pair.input.projections, &pair.input.geom, Dtype::F64le)?;
    write_projections(&reference, &pair.reference.projections, &pair.reference.geom, Dtype::F64le)?;
    write_volume(&phantom, &pair.phantom, Dtype::F64le)?;
    write_json(&truth, &pair.truth)?;
    for p in [&input, &reference, &phantom] {
        run.artifact_with_payload(p);
    }
    run.artifact(&truth);
    run.seeds.insert("noise".into(), cfg.noise.seed);
    run.seeds.insert("phantom".into(), cfg.phantom.rng_seed);
    run.config = Some(cfg);
    Ok(run)
}

fn fdk(proj: &Path, out: &Path, window: Option<Window>) -> Result<Run> {
    let mut run = Run::new("fdk");
    run.input_volume(proj);
    let (y, geom, _) = read_projections(proj)?;
    let window = match window {
        Some(Window::Hann) => FilterWindow::Hann,
        _ => FilterWindow::RamLak,
    };
    let x = fdk_reconstruct(&y, &geom, &FilterSpec::for_cols(geom.det_cols, window))?;
    write_volume(out, &x, Dtype::F64le)?;
    run.artifact_with_payload(out);
    Ok(run)
}

fn pnp(proj: &Path, prior: &Path, out: &Path, trace: &Path, config: Option<&Path>) -> Result<Run> {
    let mut run = Run::new("pnp");
    let cfg = load_config(config, &mut run)?;
    run.input_volume(proj);
    run.input(prior);
    let (y, geom, _) = read_projections(proj)?;
    let ckpt = read_checkpoint(prior)?;
    let (x, tr) = pnp_reconstruct(&y, &geom, &ckpt.params, &cfg.pnp, &cfg.fdk.filter(geom.det_cols))?;
    write_volume(out, &x, Dtype::F64le)?;
    write_json(trace, &tr)?;
    run.artifact_with_payload(out);
    run.artifact(trace);
    run.config = Some(cfg);
    Ok(run)
}

/// Reads `input target` header pairs; relative paths are taken from the list
/// file's directory.
fn read_pairs(list: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let base = list.parent().unwrap_or(Path::new("."));
    let text = String::from_utf8(read_file(list)?)
        .map_err(|_| Error::Format(format!("{} is not UTF-8 text", list.display())))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::Format(format!(
                "{}:{}: expected `input target`, got {} fields",
                list.display(),
                i + 1,
                parts.len()
            )));
        }
        pairs.push((base.join(parts[0]), base.join(parts[1])));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} lists no training pairs", list.display())));
    }
    Ok(pairs)
}

fn train(pairs: &Path, config: Option<&Path>, out: &Path, log: &Path) -> Result<Run> {
    let mut run = Run::new("train-prior");
    let cfg = load_config(config, &mut run)?;
    run.input(pairs);
    let mut vols: Vec<(Volume, Volume)> = Vec::new();
    for (a, b) in read_pairs(pairs)? {
        run.input_volume(&a);
        run.input_volume(&b);
        vols.push((read_volume(&a)?.0, read_volume(&b)?.0));
    }
    let refs: Vec<(&Volume, &Volume)> = vols.iter().map(|(a, b)| (a, b)).collect();
    let arch = cfg.prior.architecture();
    let ds = Dataset::from_pairs(&refs, arch.half_width, &cfg.training)?;
    let res = train_prior(&ds, arch, &cfg.training)?;
    write_checkpoint(out, &Checkpoint::new(res.params.clone(), cfg.training.seed, res.best_epoch))?;
    write_atomic(log, res.log_csv().as_bytes())?;
    run.artifact(out);
    run.artifact(log);
    run.seeds.insert("training".into(), cfg.training.seed);
    run.config = Some(cfg);
    Ok(run)
}

fn eval(recon: &Path, reference: &Path, report: &Path, regions: Option<&Path>, profile: Option<&Path>) -> Result<Run> {
    let mut run = Run::new("eval");
    run.input_volume(recon);
    run.input_volume(reference);
    let (x, _) = read_volume(recon)?;
    let (r, _) = read_volume(reference)?;
    let region: Option<RegionSpec> = match regions {
        Some(p) => {
            run.input(p);
            Some(read_json(p)?)
        }
        None => None,
    };
    let (rep, prof) = evaluate(&x, &r, region.as_ref())?;
    let profile = profile.map_or_else(|| report.with_extension("profile.csv"), Path::to_path_buf);
    write_json(report, &rep)?;
    write_atomic(&profile, profile_csv(&prof).as_bytes())?;
    run.artifact(report);
    run.artifact(&profile);
    Ok(run)
}

fn detect(recon: &Path, truth: &Path, report: &Path, csv: Option<&Path>, bins: Option<&[f64]>) -> Result<Run> {
    let mut run = Run::new("detect");
    run.input_volume(recon);
    run.input(truth);
    let (x, _) = read_volume(recon)?;
    let gt: Vec<TruthPore> = read_json(truth)?;
    let (_, rep) = detect_and_score(&x, &gt, bins.unwrap_or(&DESK_BIN_EDGES_MM))?;
    let csv = csv.map_or_else(|| report.with_extension("csv"), Path::to_path_buf);
    write_json(report, &rep)?;
    write_atomic(&csv, rep.csv().as_bytes())?;
    run.artifact(report);
    run.artifact(&csv);
    Ok(run)
}

#[derive(Serialize)]
struct SliceSidecar {
    z: usize,
    width: usize,
    height: usize,
    window_min: f64,
    window_max: f64,
}

fn slice_dump(vol: &Path, z: usize, out: &Path) -> Result<Run> {
    let mut run = Run::new("slice-dump");
    run.input_volume(vol);
    let (v, _) = read_volume(vol)?;
    let (lo, hi) = write_pgm16(out, &v, z)?;
    let side = sidecar(out, ".json");
    write_json(
        &side,
        &SliceSidecar {
            z,
            width: v.dims[0],
            height: v.dims[1],
            window_min: lo,
            window_max: hi,
        },
    )?;
    run.artifact(out);
    run.artifact(&side);
    Ok(run)
}

fn dispatch(cmd: &Command) -> Result<Run> {
    match cmd {
        Command::Simulate { config, out_dir } => simulate(config.as_deref(), out_dir),
        Command::Fdk { proj, out, window } => fdk(proj, out, *window),
        Command::Pnp {
            proj,
            prior,
            out,
            trace,
            config,
        } => pnp(proj, prior, out, trace, config.as_deref()),
        Command::TrainPrior { pairs, config, out, log } => train(pairs, config.as_deref(), out, log),
        Command::Eval {
            recon,
            reference,
            report,
            regions,
            profile,
        } => eval(recon, reference, report, regions.as_deref(), profile.as_deref()),
        Command::Detect {
            recon,
            truth,
            report,
            csv,
            bins,
        } => detect(recon, truth, report, csv.as_deref(), bins.as_deref()),
        Command::SliceDump { vol, z, out } => slice_dump(vol, *z, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match dispatch(&cli.command).and_then(|run| run.write_manifest(cli.threads)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
