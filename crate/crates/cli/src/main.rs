//! Command-line front end: precompute, match, train, eval, selftest.
//!
//! Exit codes: 0 success, 1 user error, 2 numerical failure.

mod selftest;

use clap::{Args, Parser, Subcommand};
use deepshells::cache::ShapeCache;
use deepshells::config::Config;
use deepshells::eval::{conformal_distortion, geodesic_error, load_map, DistortionCurve, ErrorCurve};
use deepshells::filters::{init_filterbank, read_checkpoint, FilterBank};
use deepshells::grad::train;
use deepshells::mesh::{load_mesh, MeshFormat, TriMesh};
use deepshells::shells::{match_pair, read_correspondence, write_correspondence, write_energy_csv, PreparedShape};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const CACHE_ENV: &str = "DEEPSHELLS_CACHE";
const DEFAULT_CACHE_DIR: &str = ".deepshells-cache";

#[derive(Parser, Debug)]
#[command(name = "deepshells", version, about = "Dense correspondence between triangle meshes")]
struct Cli {
    /// JSON configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cache directory; overrides DEEPSHELLS_CACHE.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize meshes and cache their eigenpairs and SHOT descriptors.
    Precompute(PrecomputeArgs),
    /// Match one pair of precomputed meshes.
    Match(MatchArgs),
    /// Train the filter bank on every ordered pair of a mesh directory.
    Train(TrainArgs),
    /// Score correspondences against ground truth.
    Eval(EvalArgs),
    /// Run the built-in property checks.
    Selftest,
}

#[derive(Args, Debug)]
struct PrecomputeArgs {
    /// Mesh files or directories of meshes.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    dst: PathBuf,
    /// Filter checkpoint; a seeded initialization is used when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Correspondence output, one target index per source vertex.
    #[arg(long)]
    out: PathBuf,
    /// Energy trace output (default: next to `--out` with `.energy.csv`).
    #[arg(long)]
    energy: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of precomputed meshes.
    #[arg(long)]
    data: PathBuf,
    /// Receives loss.csv, checkpoints and final.dshl.
    #[arg(long, default_value = "train-out")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Starting checkpoint instead of a seeded initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Source mesh; needed for conformal distortion.
    #[arg(long, requires = "pred")]
    src: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    dst: Option<PathBuf>,
    /// Predicted correspondence file.
    #[arg(long, requires = "dst")]
    pred: Option<PathBuf>,
    /// Ground-truth correspondence file or `identity`.
    #[arg(long, default_value = "identity")]
    gt: String,
    /// CSV lines `src,dst,pred,gt`; relative paths resolve against its directory.
    #[arg(long, conflicts_with_all = ["src", "dst", "pred"])]
    manifest: Option<PathBuf>,
    /// Output directory for the curve and summary CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    User(String),
    Numerical(String),
}

impl From<deepshells::Error> for Failure {
    fn from(e: deepshells::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::User(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::User("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::User(format!("cannot configure thread pool: {e}")))?;
    }
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let cache = ShapeCache::new(
        cli.cache
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR)),
    );
    match cli.command {
        Command::Precompute(args) => precompute(&args, &config, &cache),
        Command::Match(args) => run_match(&args, &config, &cache),
        Command::Train(args) => run_train(&args, &config, &cache),
        Command::Eval(args) => run_eval(&args, &config),
        Command::Selftest => selftest::run(),
    }
}

fn read_mesh(path: &Path) -> CliResult<TriMesh> {
    let loaded = load_mesh(path, None).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(loaded.mesh)
}

/// Mesh files directly inside `dir`, sorted by name.
fn mesh_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::User(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && MeshFormat::from_path(p).is_some())
        .collect();
    files.sort();
    Ok(files)
}

fn expand_paths(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(mesh_files(p)?);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Failure::User("no mesh files found".into()));
    }
    Ok(out)
}

fn precompute(args: &PrecomputeArgs, config: &Config, cache: &ShapeCache) -> CliResult<()> {
    let files = expand_paths(&args.paths)?;
    let pre = config.preprocess();
    let done: Vec<CliResult<(usize, usize, String)>> = files
        .par_iter()
        .map(|path| {
            let mesh = read_mesh(path)?;
            let shape = cache.get_or_prepare(&mesh, &pre)?;
            Ok((mesh.num_vertices(), shape.basis.len(), ShapeCache::key(&mesh, &pre)))
        })
        .collect();
    for (path, res) in files.iter().zip(done) {
        let (n, k, key) = res?;
        println!("{}\t{n} vertices\t{k} eigenpairs\t{key}", path.display());
    }
    Ok(())
}

/// Cached preprocessing of `path`, or an instruction to run `precompute`.
fn cached_shape(path: &Path, config: &Config, cache: &ShapeCache) -> CliResult<PreparedShape> {
    let mesh = read_mesh(path)?;
    cache.load(&mesh, &config.preprocess())?.ok_or_else(|| {
        Failure::User(format!(
            "no cached preprocessing for {} in {}; run `deepshells precompute {}` with the same configuration first",
            path.display(),
            cache.dir().display(),
            path.display()
        ))
    })
}

fn load_bank(weights: Option<&Path>, config: &Config) -> CliResult<FilterBank> {
    match weights {
        Some(path) => read_checkpoint(path).map_err(|e| Failure::User(format!("{}: {e}", path.display()))),
        None => {
            log::warn!("no weights given; using the seeded initialization (seed {})", config.init_seed);
            Ok(init_filterbank(config.init_seed, config.filter_dims())?)
        }
    }
}

fn run_match(args: &MatchArgs, config: &Config, cache: &ShapeCache) -> CliResult<()> {
    let x = cached_shape(&args.src, config, cache)?;
    let y = cached_shape(&args.dst, config, cache)?;
    let bank = load_bank(args.weights.as_deref(), config)?;
    let schedule = config.testing_schedule(x.basis.len().min(y.basis.len()))?;
    let (map, state) = match_pair(&x, &y, &bank, &schedule, &config.shell())?;
    write_correspondence(&map, y.num_vertices(), &args.out)?;
    let energy = args
        .energy
        .clone()
        .unwrap_or_else(|| args.out.with_extension("energy.csv"));
    write_energy_csv(&state, &energy)?;
    println!("wrote {} and {}", args.out.display(), energy.display());
    Ok(())
}

fn run_train(args: &TrainArgs, config: &Config, cache: &ShapeCache) -> CliResult<()> {
    let files = mesh_files(&args.data)?;
    if files.len() < 2 {
        return Err(Failure::User(format!(
            "{} holds {} meshes; training needs at least two",
            args.data.display(),
            files.len()
        )));
    }
    let shapes = files
        .iter()
        .map(|p| cached_shape(p, config, cache))
        .collect::<CliResult<Vec<_>>>()?;
    let bank = load_bank(args.init.as_deref(), config)?;
    let mut trainer = config.trainer(Some(args.out.clone()))?;
    if let Some(epochs) = args.epochs {
        trainer.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        trainer.seed = seed;
    }
    if args.checkpoint_every.is_some() {
        trainer.checkpoint_every = args.checkpoint_every;
    }
    let outcome = train(&shapes, bank, &trainer)?;
    let last = outcome.records.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{} steps, final loss {last:.6}; wrote {}",
        outcome.steps,
        args.out.join("final.dshl").display()
    );
    Ok(())
}

struct EvalPair {
    src: Option<PathBuf>,
    dst: PathBuf,
    pred: PathBuf,
    gt: String,
}

fn read_manifest(path: &Path) -> CliResult<Vec<EvalPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |s: &str| {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "src,dst,pred,gt" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Failure::User(format!(
                "{}:{}: expected 4 fields src,dst,pred,gt",
                path.display(),
                i + 1
            )));
        }
        let gt = if fields[3] == "identity" {
            fields[3].to_string()
        } else {
            resolve(fields[3]).display().to_string()
        };
        pairs.push(EvalPair {
            src: Some(resolve(fields[0])),
            dst: resolve(fields[1]),
            pred: resolve(fields[2]),
            gt,
        });
    }
    if pairs.is_empty() {
        return Err(Failure::User(format!("{} lists no pairs", path.display())));
    }
    Ok(pairs)
}

fn eval_pair(pair: &EvalPair, config: &Config) -> CliResult<(ErrorCurve, Option<DistortionCurve>)> {
    let mesh_y = read_mesh(&pair.dst)?;
    let (pred, ny) = read_correspondence(&pair.pred)?;
    if ny != mesh_y.num_vertices() {
        return Err(Failure::User(format!(
            "{} declares nY={ny} but {} has {} vertices",
            pair.pred.display(),
            pair.dst.display(),
            mesh_y.num_vertices()
        )));
    }
    let gt = load_map(&pair.gt, pred.len())?;
    let errors = geodesic_error(&mesh_y, &pred, &gt, config.error_norm)?;
    let distortion = match &pair.src {
        Some(src) => Some(conformal_distortion(&read_mesh(src)?, &mesh_y, &pred)?),
        None => None,
    };
    Ok((errors, distortion))
}

fn run_eval(args: &EvalArgs, config: &Config) -> CliResult<()> {
    let pairs = match (&args.manifest, &args.pred, &args.dst) {
        (Some(m), _, _) => read_manifest(m)?,
        (None, Some(pred), Some(dst)) => vec![EvalPair {
            src: args.src.clone(),
            dst: dst.clone(),
            pred: pred.clone(),
            gt: args.gt.clone(),
        }],
        _ => return Err(Failure::User("eval needs --manifest or --dst and --pred".into())),
    };
    let results = pairs
        .par_iter()
        .map(|p| eval_pair(p, config))
        .collect::<CliResult<Vec<_>>>()?;

    let mut summary = String::from("pair,src,dst,mean_error,mean_distortion,skipped_triangles\n");
    for (i, (pair, (err, dist))) in pairs.iter().zip(&results).enumerate() {
        let src = pair.src.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let (mean_d, skipped) = dist
            .as_ref()
            .map_or((String::new(), String::new()), |d| (d.mean().to_string(), d.skipped.to_string()));
        writeln!(summary, "{i},{src},{},{},{mean_d},{skipped}", pair.dst.display(), err.mean_error).unwrap();
    }
    let errors: Vec<ErrorCurve> = results.iter().map(|(e, _)| e.clone()).collect();
    let pooled = ErrorCurve::pooled(&errors)?;
    let distortions: Vec<DistortionCurve> = results.iter().filter_map(|(_, d)| d.clone()).collect();
    let pooled_d = (!distortions.is_empty()).then(|| DistortionCurve::pooled(&distortions));
    writeln!(
        summary,
        "all,,,{},{},{}",
        pooled.mean_error,
        pooled_d.as_ref().map_or(String::new(), |d| d.mean().to_string()),
        pooled_d.as_ref().map_or(String::new(), |d| d.skipped.to_string())
    )
    .unwrap();

    let write = |name: &str, text: String| -> CliResult<()> {
        std::fs::create_dir_all(&args.out).map_err(|e| Failure::User(format!("{}: {e}", args.out.display())))?;
        let path = args.out.join(name);
        std::fs::write(&path, text).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
    };
    write("geodesic_error.csv", pooled.to_csv())?;
    if let Some(d) = &pooled_d {
        write("distortion.csv", d.to_csv())?;
    }
    write("summary.csv", summary)?;
    println!(
        "{} pairs, mean geodesic error {:.6}{}",
        pairs.len(),
        pooled.mean_error,
        pooled_d.map_or(String::new(), |d| format!(", mean distortion {:.4}", d.mean()))
    );
    Ok(())
}
