//! `d2f`: one binary, seven subcommands, built for scripting. Every command
//! is deterministic given its flags and seed, writes outputs atomically
//! (temp file plus rename), and emits JSON with a fixed key order.
//!
//! Exit codes: 0 success; 1 usage error; 2 I/O or file-format error;
//! 3 contract violation (shape, config, domain, non-finite); 4 numeric
//! acceptance failure (gradient check above tolerance, training divergence).

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use d2fusion::augment::{augment_pair, AugmentConfig};
use d2fusion::d2ft;
use d2fusion::error::{Error, Result};
use d2fusion::fusion::{
    gradcheck_suite, make_toy_dataset, save_checkpoint, train_toy, FusionConfig, FusionModel,
};
use d2fusion::image::{read_image, write_image};
use d2fusion::metrics::{self, ScoreSet};
use d2fusion::spatial::bidir_forward;
use d2fusion::spectral::{spectral_forward, BasisVariant};
use d2fusion::ssim::{dssim_map, DssimMode, SsimConstants};
use d2fusion::wave::superposition_forward;
use d2fusion::Tensor;

/// Gradient checks above this relative error make `gradcheck` exit 4.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "d2f",
    version,
    about = "Swap augmentation, attention forward passes, gradient audits, \
             toy training, and scoring metrics over simple binary tensor files"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Blend the most dissimilar window of a fake into its source image
    Augment(AugmentArgs),
    /// Write the structural-dissimilarity map of two images
    Dssim(DssimArgs),
    /// Run the three attention blocks over a feature map
    Attend(AttendArgs),
    /// Audit every gradient against central differences
    Gradcheck(GradcheckArgs),
    /// Train the toy classifier on a synthetic corpus
    TrainToy(TrainToyArgs),
    /// Score a CSV of (score, label) rows
    Metrics(MetricsArgs),
    /// Print the shape and summary statistics of a tensor file
    Inspect(InspectArgs),
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AugmentArgs {
    /// Manipulated image (PNG or P6 PPM)
    #[arg(long, required_unless_present = "pairs", conflicts_with = "pairs")]
    fake: Option<PathBuf>,
    /// Pristine counterpart, same extents
    #[arg(long, required_unless_present = "pairs", conflicts_with = "pairs")]
    source: Option<PathBuf>,
    /// Output image path (extension picks the format)
    #[arg(long, required_unless_present = "pairs", conflicts_with = "pairs")]
    out: Option<PathBuf>,
    /// JSONL batch file, one {"fake", "source", "out"} object per line;
    /// pair i uses seed XOR i and the batch fans out across D2F_THREADS
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Seed for the window-scale draw
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Window scale ranges as JSON, e.g. [[40,80],[80,120]]
    #[arg(long)]
    scales: Option<String>,
    /// Mask feather width in pixels
    #[arg(long)]
    feather: Option<usize>,
    /// Dissimilarity flavor: standard | paper-literal
    #[arg(long)]
    dssim_mode: Option<DssimMode>,
}

/// One JSONL line of a batch file.
#[derive(Deserialize)]
struct PairSpec {
    fake: PathBuf,
    source: PathBuf,
    out: PathBuf,
}

/// One line of augmentation output, printed as single-line JSON.
#[derive(Serialize)]
struct ManifestLine {
    fake: PathBuf,
    source: PathBuf,
    out: PathBuf,
    x_t: usize,
    y_t: usize,
    h: usize,
    w: usize,
    seed: u64,
}

fn augment_config(args: &AugmentArgs) -> Result<AugmentConfig> {
    let mut cfg = AugmentConfig::default();
    if let Some(text) = &args.scales {
        cfg.ranges = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("--scales wants JSON like [[40,80]]: {e}")))?;
    }
    if let Some(f) = args.feather {
        cfg.feather = f;
    }
    if let Some(m) = args.dssim_mode {
        cfg.mode = m;
    }
    Ok(cfg)
}

fn augment_one(
    fake: &Path,
    source: &Path,
    out: &Path,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<ManifestLine> {
    let f = read_image(fake)?;
    let s = read_image(source)?;
    let aug = augment_pair(&f, &s, cfg, seed)?;
    write_image(out, &aug.image)?;
    Ok(ManifestLine {
        fake: fake.to_path_buf(),
        source: source.to_path_buf(),
        out: out.to_path_buf(),
        x_t: aug.window.x_t,
        y_t: aug.window.y_t,
        h: aug.window.h,
        w: aug.window.w,
        seed,
    })
}

/// Worker-thread cap: D2F_THREADS if set, else the machine's parallelism.
fn thread_cap(jobs: usize) -> Result<usize> {
    let cap = match std::env::var("D2F_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(format!("D2F_THREADS wants a count >= 1, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map(usize::from).unwrap_or(1),
    };
    Ok(cap.min(jobs).max(1))
}

fn run_augment(args: AugmentArgs) -> Result<i32> {
    let cfg = augment_config(&args)?;
    if let Some(pairs_path) = &args.pairs {
        let text = std::fs::read_to_string(pairs_path)?;
        let pairs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str::<PairSpec>(l)
                    .map_err(|e| Error::format(format!("bad pairs line {l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;

        // Fan out, then report strictly in input order so reruns diff clean.
        let slots: Vec<Mutex<Option<Result<ManifestLine>>>> =
            pairs.iter().map(|_| Mutex::new(None)).collect();
        let threads = thread_cap(pairs.len())?;
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(pair) = pairs.get(i) else { break };
                    let line = augment_one(
                        &pair.fake,
                        &pair.source,
                        &pair.out,
                        &cfg,
                        args.seed ^ i as u64,
                    );
                    *slots[i].lock().expect("augment worker panicked") = Some(line);
                });
            }
        });
        for slot in slots {
            let line = slot.into_inner().expect("augment worker panicked");
            emit(&to_json(&line.expect("every pair visited")?)?)?;
        }
    } else {
        // Presence enforced by the parser; unwrap is unreachable.
        let (fake, source, out) =
            (args.fake.unwrap(), args.source.unwrap(), args.out.unwrap());
        let line = augment_one(&fake, &source, &out, &cfg, args.seed)?;
        emit(&to_json(&line)?)?;
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// dssim
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DssimArgs {
    /// First image
    #[arg(long)]
    a: PathBuf,
    /// Second image, same extents
    #[arg(long)]
    b: PathBuf,
    /// Output tensor file for the H x W map
    #[arg(long)]
    out: PathBuf,
    /// Dissimilarity flavor: standard | paper-literal
    #[arg(long, default_value = "standard")]
    mode: DssimMode,
}

fn run_dssim(args: DssimArgs) -> Result<i32> {
    let a = read_image(&args.a)?;
    let b = read_image(&args.b)?;
    let map = dssim_map(&a, &b, &SsimConstants::default(), args.mode)?;
    d2ft::write_tensor(&args.out, &map)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// attend
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AttendArgs {
    /// Input C x H x W feature tensor
    #[arg(long)]
    features: PathBuf,
    /// JSON config file; omitted fields use built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directionally gated output
    #[arg(long)]
    out_bi: PathBuf,
    /// Spectrally gated output
    #[arg(long)]
    out_sp: PathBuf,
    /// Superposed output of the merged branches
    #[arg(long)]
    out_p: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config basis: paper-literal | dct2-standard
    #[arg(long)]
    basis_variant: Option<BasisVariant>,
}

/// Config precedence: flag > config file > built-in default.
fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    basis: Option<BasisVariant>,
) -> Result<FusionConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("config {}: {e}", p.display())))?
        }
        None => FusionConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = basis {
        cfg.basis_variant = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_attend(args: AttendArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref(), args.seed, args.basis_variant)?;
    let x = d2ft::read_tensor(&args.features)?;
    let want = [cfg.channels, cfg.height, cfg.width];
    if x.shape() != want {
        return Err(Error::config(format!(
            "feature map {:?} does not match the configured {want:?}",
            x.shape()
        )));
    }
    let model = FusionModel::seeded(&cfg)?;
    let (x_bi, _) = bidir_forward(&x, &model.bidir)?;
    let (x_sp, _) = spectral_forward(&x, &model.spectral)?;
    let merged = x_bi.add(&x_sp)?;
    let p = superposition_forward(&merged, &model.wave)?;
    d2ft::write_tensor(&args.out_bi, &x_bi)?;
    d2ft::write_tensor(&args.out_sp, &x_sp)?;
    d2ft::write_tensor(&args.out_p, &p)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// JSON config file; omitted fields use built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds the audited weights and inputs
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the config basis: paper-literal | dct2-standard
    #[arg(long)]
    basis_variant: Option<BasisVariant>,
}

fn run_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref(), None, args.basis_variant)?;
    let rows = gradcheck_suite(&cfg, args.seed)?;
    emit(&to_json_pretty(&rows)?)?;
    let worst = rows.iter().map(|r| r.max_relative_error).fold(0.0f64, f64::max);
    if worst >= GRAD_TOLERANCE {
        eprintln!("error: max relative error {worst:e} is at or above {GRAD_TOLERANCE:e}");
        return Ok(4);
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainToyArgs {
    /// JSON config file; omitted fields use built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint and report.json
    #[arg(long)]
    out: PathBuf,
    /// Synthetic corpus size (interleaved half pristine, half patched)
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Square image side in pixels, a multiple of 4
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Seeds the synthetic corpus
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    /// Overrides the config seed (weights and shuffling)
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config epoch count
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config learning rate
    #[arg(long)]
    lr: Option<f32>,
}

fn run_train_toy(args: TrainToyArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_deref(), args.seed, None)?;
    let epochs = args.epochs.unwrap_or(cfg.epochs);
    let lr = args.lr.unwrap_or(cfg.lr);
    let data = make_toy_dataset(args.samples, args.size, args.data_seed)?;
    let (model, report) = train_toy(&cfg, &data, epochs, lr, cfg.seed)?;
    save_checkpoint(&args.out, &model)?;
    let text = to_json_pretty(&report)?;
    d2ft::atomic_write(args.out.join("report.json"), text.as_bytes())?;
    emit(&text)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Args)]
struct MetricsArgs {
    /// CSV file with a `score,label` header
    #[arg(long)]
    scores: PathBuf,
    /// Scores at or above this predict fake
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

fn run_metrics(args: MetricsArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.scores)?;
    let set = ScoreSet::from_csv(&text)?;
    let report = metrics::report(&set, args.threshold)?;
    emit(&to_json_pretty(&report)?)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InspectArgs {
    /// Tensor file to summarize
    #[arg(long)]
    file: PathBuf,
}

#[derive(Serialize)]
struct InspectReport {
    shape: Vec<usize>,
    len: usize,
    min: f64,
    max: f64,
    mean: f64,
    std: f64,
}

fn run_inspect(args: InspectArgs) -> Result<i32> {
    let t = d2ft::read_tensor(&args.file)?;
    emit(&to_json_pretty(&summarize(&t))?)?;
    Ok(0)
}

fn summarize(t: &Tensor) -> InspectReport {
    let n = t.len() as f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    for &v in t.data() {
        let v = f64::from(v);
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    let mean = sum / n;
    let var = t.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    InspectReport {
        shape: t.shape().to_vec(),
        len: t.len(),
        min,
        max,
        mean,
        std: var.sqrt(),
    }
}

// ---------------------------------------------------------------------------
// plumbing
// ---------------------------------------------------------------------------

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::format(format!("serializing output: {e}")))
}

/// Prints one line to stdout. A consumer that stops reading (`head`, a
/// closed pipe) ends the run quietly instead of failing it.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(e) => Err(e.into()),
    }
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("serializing output: {e}")))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) => 2,
        Error::Shape(_) | Error::Config(_) | Error::Domain(_) | Error::NonFinite(_) => 3,
        Error::Diverged { .. } | Error::Tolerance(_) => 4,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Augment(a) => run_augment(a),
        Cmd::Dssim(a) => run_dssim(a),
        Cmd::Attend(a) => run_attend(a),
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::TrainToy(a) => run_train_toy(a),
        Cmd::Metrics(a) => run_metrics(a),
        Cmd::Inspect(a) => run_inspect(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are successes; anything else is usage.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
