mod manifest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use active_testing::bench::{bench_compare, BenchScene};
use active_testing::engine::{Engine, SearchConfig};
use active_testing::features::{detect_edges, soft_families, IntegralSet};
use active_testing::image::GrayImage;
use active_testing::lattice::Lattice;
use active_testing::models::ModelFile;
use active_testing::oracle::GroundTruthOracle;
use active_testing::rng;
use active_testing::scene::{synth_scene, SceneSetSpec, Target};
use active_testing::training::{train_model_file, TrainingScene};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use manifest::{sha256_file, RunManifest};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] active_testing::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use active_testing::Error as E;
        match self {
            CliError::Usage(_) | CliError::Input { .. } => 2,
            CliError::Core(E::InvalidArgument(_) | E::Mismatch(_) | E::Format(_) | E::Json(_))
            | CliError::Core(E::TrainingCoverage { .. } | E::ModelCoverage { .. }) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "active-testing", version, about = "Active Testing pose search over synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON search configuration; missing fields take their defaults.
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,
    /// Master seed of the command.
    #[arg(long, value_name = "N", global = true)]
    seed: Option<u64>,
    /// Reuse the configuration and seed recorded by an earlier run.
    #[arg(long, value_name = "PATH", global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render scenes from a scene-set spec into PGM images and a truth file.
    Synth {
        #[arg(long, value_name = "PATH")]
        spec: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the response densities and their distance table.
    Train {
        #[arg(long, value_name = "DIR")]
        scenes: PathBuf,
        /// Defaults to `truth.json` inside the scene directory.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
        /// Model file to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Search one image, answering perfect tests from its ground truth.
    Search {
        image: PathBuf,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Defaults to `truth.json` next to the image.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
        /// Report every target instead of the first one.
        #[arg(long)]
        multi: bool,
        /// Write one line per step to this file.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Also write the result and a manifest into this directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare active testing with the sliding-window baseline.
    Bench {
        #[arg(long, value_name = "DIR")]
        scenes: PathBuf,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
        /// Directory for `bench.csv`, `summary.json` and `manifest.json`;
        /// without it the CSV goes to stdout.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Record wall-clock times (makes the CSV non-reproducible).
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// Truth file written by `synth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthFile {
    scenes: Vec<TruthEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthEntry {
    id: String,
    image: String,
    width: u32,
    height: u32,
    targets: Vec<Target>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Input { path: path.to_owned(), source })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|source| CliError::Input { path: path.to_owned(), source })?;
    GrayImage::decode_pgm(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Configuration and seed after applying `--manifest`, `--config` and
/// `--seed`, in that order.
fn resolve(common: &Common, default_seed: u64) -> Result<(SearchConfig, u64, Option<RunManifest>)> {
    let prior = common.manifest.as_deref().map(read_json::<RunManifest>).transpose()?;
    let mut config = prior.as_ref().and_then(|m| m.config.clone()).unwrap_or_default();
    if let Some(path) = &common.config {
        config = read_json(path)?;
    }
    config.validate()?;
    let seed = common.seed.or(prior.as_ref().map(|m| m.seed)).unwrap_or(default_seed);
    Ok((config, seed, prior))
}

fn check_model_hash(prior: &Option<RunManifest>, hash: &str) -> Result<()> {
    match prior.as_ref().and_then(|m| m.model_sha256.as_deref()) {
        Some(want) if want != hash => Err(CliError::Usage(format!("model file hash {hash} differs from the manifest's {want}"))),
        _ => Ok(()),
    }
}

fn load_scenes(dir: &Path, truth: Option<&Path>) -> Result<Vec<(TruthEntry, GrayImage)>> {
    let truth_path = truth.map(Path::to_owned).unwrap_or_else(|| dir.join("truth.json"));
    let truth: TruthFile = read_json(&truth_path)?;
    truth
        .scenes
        .into_iter()
        .map(|e| {
            let img = read_image(&dir.join(&e.image))?;
            if (img.width(), img.height()) != (e.width, e.height) {
                return Err(CliError::Usage(format!("{} is {}x{}, truth says {}x{}", e.image, img.width(), img.height(), e.width, e.height)));
            }
            Ok((e, img))
        })
        .collect()
}

fn uniform_size(scenes: &[(TruthEntry, GrayImage)]) -> Result<(u32, u32)> {
    let Some((first, _)) = scenes.first() else {
        return Err(CliError::Usage("no scenes listed in the truth file".into()));
    };
    let dims = (first.width, first.height);
    if let Some((e, _)) = scenes.iter().find(|(e, _)| (e.width, e.height) != dims) {
        return Err(CliError::Usage(format!("scene {} is {}x{}, expected {}x{}", e.id, e.width, e.height, dims.0, dims.1)));
    }
    Ok(dims)
}

fn cmd_synth(spec_path: &Path, out: &Path, common: &Common) -> Result<()> {
    let (_, seed, _) = resolve(common, 0)?;
    let mut spec: SceneSetSpec = read_json(spec_path)?;
    if common.seed.is_some() || common.manifest.is_some() {
        for (n, batch) in spec.random.iter_mut().enumerate() {
            batch.seed = rng::derive_seed(seed, &[n as u64, batch.seed]);
        }
    }
    let specs = spec.expand()?;
    let rendered = specs.iter().map(synth_scene).collect::<std::result::Result<Vec<_>, _>>()?;
    fs::create_dir_all(out)?;
    let mut scenes = Vec::with_capacity(rendered.len());
    for (n, (img, truth)) in rendered.into_iter().enumerate() {
        let id = format!("scene_{n:03}");
        let image = format!("{id}.pgm");
        fs::write(out.join(&image), img.encode_pgm())?;
        scenes.push(TruthEntry { id, image, width: truth.width, height: truth.height, targets: truth.targets });
    }
    write_json(&out.join("truth.json"), &TruthFile { scenes })?;
    write_json(&out.join("manifest.json"), &RunManifest::new("synth", seed, None, None))?;
    Ok(())
}

fn cmd_train(dir: &Path, truth: Option<&Path>, out: &Path, samples: usize, common: &Common) -> Result<()> {
    let (config, seed, _) = resolve(common, 0)?;
    let scenes = load_scenes(dir, truth)?;
    let (w, h) = uniform_size(&scenes)?;
    let lattice = Lattice::new(w, h)?;
    let intervals = config.intervals_for(w, h);
    let training: Vec<TrainingScene> = scenes
        .iter()
        .map(|(e, img)| TrainingScene { integrals: detect_edges(img, config.edge_threshold), targets: e.targets.clone() })
        .collect();
    let file = train_model_file(&training, &lattice, &soft_families(), &intervals, samples, seed, config.mc_samples, config.mc_seed)?;
    file.write(out)?;
    let manifest = RunManifest::new("train", seed, Some(config), Some(sha256_file(out)?));
    write_json(&sidecar(out), &manifest)?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_owned();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn load_model(path: &Path) -> Result<(ModelFile, String)> {
    let text = read_text(path)?;
    let file = ModelFile::from_json(&text)?;
    Ok((file, manifest::sha256_hex(text.as_bytes())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    image: &Path,
    model: &Path,
    truth: Option<&Path>,
    multi: bool,
    trace: Option<&Path>,
    out: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let (config, seed, prior) = resolve(common, 0)?;
    let (file, hash) = load_model(model)?;
    check_model_hash(&prior, &hash)?;
    let img = read_image(image)?;
    let name = image.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let truth_path = truth.map(Path::to_owned).unwrap_or_else(|| image.with_file_name("truth.json"));
    let truth: TruthFile = read_json(&truth_path)?;
    let entry = truth
        .scenes
        .iter()
        .find(|e| e.image == name)
        .ok_or_else(|| CliError::Usage(format!("{} has no entry for {name}", truth_path.display())))?;
    let lattice = Lattice::new(img.width(), img.height())?;
    let engine = Engine::new(config.clone(), lattice, &file.models, &file.table)?;
    let integrals: IntegralSet = detect_edges(&img, config.edge_threshold);
    let mut oracle = GroundTruthOracle::new(entry.targets.clone(), engine.intervals().clone());
    let (json, steps) = if multi {
        let res = engine.run_multi(&integrals, &mut oracle)?;
        (serde_json::to_value(&res)?, res.trace)
    } else {
        let res = engine.run_single(&integrals, &mut oracle)?;
        (serde_json::to_value(&res)?, res.trace)
    };
    if let Some(path) = trace {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &steps {
            writeln!(f, "{r}")?;
        }
        f.flush()?;
    }
    let text = serde_json::to_string_pretty(&json)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("result.json"), format!("{text}\n"))?;
        write_json(&dir.join("manifest.json"), &RunManifest::new("search", seed, Some(config), Some(hash)))?;
    }
    Ok(())
}

fn cmd_bench(dir: &Path, model: &Path, truth: Option<&Path>, out: Option<&Path>, timing: bool, common: &Common) -> Result<()> {
    let (config, seed, prior) = resolve(common, 0)?;
    let (file, hash) = load_model(model)?;
    check_model_hash(&prior, &hash)?;
    let scenes = load_scenes(dir, truth)?;
    let (w, h) = match scenes.first() {
        Some(_) => uniform_size(&scenes)?,
        None => {
            let side = 1u32 << (file.models.depth() - 1).min(31);
            (side, side)
        }
    };
    let engine = Engine::new(config.clone(), Lattice::new(w, h)?, &file.models, &file.table)?;
    let bench: Vec<BenchScene> = scenes
        .into_iter()
        .map(|(e, img)| BenchScene { id: e.id, integrals: detect_edges(&img, config.edge_threshold), targets: e.targets })
        .collect();
    let report = bench_compare(&bench, &engine, seed, timing)?;
    let csv = report.to_csv();
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("bench.csv"), &csv)?;
            write_json(&dir.join("summary.json"), &report.summary)?;
            write_json(&dir.join("manifest.json"), &RunManifest::new("bench", seed, Some(config), Some(hash)))?;
        }
        None => print!("{csv}"),
    }
    eprintln!("{}", serde_json::to_string(&report.summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { spec, out, common } => cmd_synth(spec, out, common),
        Command::Train { scenes, truth, out, samples, common } => cmd_train(scenes, truth.as_deref(), out, *samples, common),
        Command::Search { image, model, truth, multi, trace, out, common } => {
            cmd_search(image, model, truth.as_deref(), *multi, trace.as_deref(), out.as_deref(), common)
        }
        Command::Bench { scenes, model, truth, out, timing, common } => cmd_bench(scenes, model, truth.as_deref(), out.as_deref(), *timing, common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
