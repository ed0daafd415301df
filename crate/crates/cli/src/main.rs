//! `relit` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input, 3 runtime or
//! optimization failure, 4 I/O. Failures print one JSON line to stderr:
//! `{"error":"<kind>","code":<n>,"message":"..."}`.

use std::fs;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use relit_core::dataset::{generate_dataset, load_dataset, DatasetConfig};
use relit_core::fit::{fit_pair, FitConfig};
use relit_core::io::{load_linear_png, load_mask_png, load_normals_png, save_linear_png, save_normals_png, BitDepth};
use relit_core::losses::{Components, LossWeights};
use relit_core::nn::{evaluate_model, load_model, Checkpoint, SupervisionMode, TrainConfig, TrainData, Trainer};
use relit_core::render::{relight, render, shading};
use relit_core::synth::PairMode;
use relit_core::{ColorSpace, Error, ImagePlane, Mask, ShLighting};

/// Lambertian SH intrinsic decomposition and relighting.
///
/// Formats: color images are 8- or 16-bit sRGB PNG (written 16-bit);
/// normal maps are 16-bit PNG storing (n + 1) / 2; masks are 8-bit gray PNG,
/// foreground above 127; lighting JSON is an array of 27 numbers, basis-major
/// and RGB-minor; TrainConfig JSON mirrors the `train` flags.
#[derive(Parser, Debug)]
#[command(name = "relit", version)]
struct Cli {
    /// Caps the worker pool (used by `serve`; other commands run on one thread).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log verbosity: repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    LightOnly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PairsArg {
    All,
    Anchored,
}

impl From<PairsArg> for PairMode {
    fn from(p: PairsArg) -> Self {
        match p {
            PairsArg::All => PairMode::All,
            PairsArg::Anchored => PairMode::Anchored,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic multi-lit dataset with manifest.json.
    GenData {
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimizes albedo, normals and lighting of one image pair directly.
    ///
    /// Writes albedo_{1,2}.png, normals_{1,2}.png, lighting_{1,2}.json,
    /// recon_{1,2}.png, relit_{1,2}.png (member i under the other's light)
    /// and loss_trace.csv.
    FitPair {
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        img2: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        no_relit: bool,
        #[arg(long, default_value_t = 400)]
        iterations: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the network; flags override values from --config.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TrainConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        no_relit: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_pairs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines log; defaults to <out>.log.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: usize,
        /// Continue from the checkpoint at --out.
        #[arg(long)]
        resume: bool,
    },
    /// Runs the network on one image. Writes albedo.png, normals.png,
    /// lighting.json, shading.png and reconstruction.png.
    Decompose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        img: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders albedo and normals under a lighting.
    Relight {
        #[arg(long)]
        albedo: PathBuf,
        #[arg(long)]
        normals: PathBuf,
        #[arg(long)]
        light: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relights the source image with the lighting estimated from the reference.
    TransferLight {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        source_mask: Option<PathBuf>,
        #[arg(long)]
        reference_mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a checkpoint on a dataset; writes a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the CSV table here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        pairs: PairsArg,
    },
    /// Serves the HTTP API and the studio bundle.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

/// Usage problems caught after argument parsing.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", 1),
            Failure::Core(Error::InvalidInput(_)) | Failure::Core(Error::InsufficientData(_)) => ("invalid-input", 2),
            Failure::Core(Error::InvalidState(_)) | Failure::Core(Error::OptimizationFailed { .. }) => ("runtime", 3),
            Failure::Core(Error::Io { .. }) | Failure::Core(Error::Format { .. }) => ("io", 4),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Failure::Core(Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    })
}

fn load_mask_or_full(path: Option<&Path>, img: &ImagePlane) -> CliResult<Mask> {
    Ok(match path {
        Some(p) => {
            let m = load_mask_png(p)?;
            m.check_matches(img, "mask")?;
            m
        }
        None => Mask::full(img.width(), img.height()),
    })
}

fn write_components(dir: &Path, suffix: &str, c: &Components, mask: &Mask) -> CliResult<()> {
    save_linear_png(&dir.join(format!("albedo{suffix}.png")), &c.albedo.masked(mask), BitDepth::Sixteen)?;
    save_normals_png(&dir.join(format!("normals{suffix}.png")), &c.normals)?;
    let light = serde_json::to_string_pretty(&c.light).expect("lighting serializes");
    write_file(&dir.join(format!("lighting{suffix}.json")), light)
}

fn gen_data(scenes: usize, k: usize, size: usize, seed: u64, out: &Path) -> CliResult<()> {
    let cfg = DatasetConfig {
        scenes,
        k,
        size,
        seed,
        ..Default::default()
    };
    let m = generate_dataset(out, &cfg)?;
    log::info!("wrote {} scenes to {}", m.scenes.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit_pair_cmd(img1: &Path, img2: &Path, mask: &Path, no_relit: bool, iterations: usize, lr: f64, out: &Path) -> CliResult<()> {
    let i1 = load_linear_png(img1)?;
    let i2 = load_linear_png(img2)?;
    let mask = load_mask_png(mask)?;
    let w = LossWeights::self_supervised(1.0, if no_relit { 0.0 } else { 1.0 });
    let cfg = FitConfig {
        iterations,
        lr,
        ..Default::default()
    };
    let r = fit_pair(&i1, &i2, &mask, &w, &cfg)?;
    create_dir(out)?;
    let [m1, m2] = &r.estimate.members;
    for (k, (own, other)) in [(m1, m2), (m2, m1)].into_iter().enumerate() {
        let s = format!("_{}", k + 1);
        write_components(out, &s, own, &mask)?;
        let recon = render(&own.albedo, &own.normals, &own.light, &mask)?;
        save_linear_png(&out.join(format!("recon{s}.png")), &recon, BitDepth::Sixteen)?;
        let relit = relight(&own.albedo, &own.normals, &other.light, &mask)?;
        save_linear_png(&out.join(format!("relit{s}.png")), &relit, BitDepth::Sixteen)?;
    }
    let mut csv = String::from("iteration,total,rec,relit\n");
    for (i, l) in r.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{}\n", l.total, l.rec, l.relit));
    }
    write_file(&out.join("loss_trace.csv"), csv)?;
    log::info!("best loss {:.5}", r.best_loss.total);
    Ok(())
}

struct TrainArgs<'a> {
    data: &'a Path,
    config: Option<&'a Path>,
    mode: Option<ModeArg>,
    no_relit: bool,
    steps: Option<usize>,
    seed: Option<u64>,
    batch_pairs: Option<usize>,
    lr: Option<f64>,
    out: &'a Path,
    log: Option<&'a Path>,
    checkpoint_every: usize,
    resume: bool,
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c: TrainConfig = match a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        c.mode = match m {
            ModeArg::Full => SupervisionMode::Full,
            ModeArg::LightOnly => SupervisionMode::LightOnly,
        };
    }
    if a.no_relit {
        c.use_relit = false;
    }
    if let Some(s) = a.steps {
        c.steps = s;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(b) = a.batch_pairs {
        c.batch_pairs = b;
    }
    if let Some(lr) = a.lr {
        c.adam.lr = lr;
    }
    c.validate()?;
    Ok(c)
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let (_, scenes) = load_dataset(a.data)?;
    let mut trainer = if a.resume {
        Trainer::from_checkpoint(&Checkpoint::load(a.out)?)?
    } else {
        Trainer::new(train_config(a)?)?
    };
    let data = TrainData::from_loaded(scenes, trainer.config().pairs)?;
    let log_path = a
        .log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", a.out.display())));
    let file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut w = BufWriter::new(file);
    trainer.run(&data, Some(&mut w), Some(a.out), a.checkpoint_every)?;
    std::io::Write::flush(&mut w).map_err(|e| io_err(&log_path, e))?;
    log::info!("trained to step {}", trainer.step());
    Ok(())
}

fn decompose(ckpt: &Path, img: &Path, mask: Option<&Path>, out: &Path) -> CliResult<()> {
    let model = load_model(ckpt)?;
    let image = load_linear_png(img)?;
    let mask = load_mask_or_full(mask, &image)?;
    let c = model.decompose_single(&image, &mask)?;
    create_dir(out)?;
    write_components(out, "", &c, &mask)?;
    let shade = shading(&c.normals, &c.light, &mask)?.retag(ColorSpace::LinearRgb)?;
    save_linear_png(&out.join("shading.png"), &shade, BitDepth::Sixteen)?;
    let recon = render(&c.albedo, &c.normals, &c.light, &mask)?;
    save_linear_png(&out.join("reconstruction.png"), &recon, BitDepth::Sixteen)?;
    Ok(())
}

fn relight_cmd(albedo: &Path, normals: &Path, light: &Path, mask: Option<&Path>, out: &Path) -> CliResult<()> {
    let a = load_linear_png(albedo)?;
    let n = load_normals_png(normals)?;
    let coeffs: Vec<f64> = read_json(light)?;
    let l = ShLighting::from_flat(&coeffs)?;
    let mask = load_mask_or_full(mask, &a)?;
    let img = relight(&a, &n, &l, &mask)?;
    save_linear_png(out, &img, BitDepth::Sixteen)?;
    Ok(())
}

fn transfer(ckpt: &Path, source: &Path, reference: &Path, smask: Option<&Path>, rmask: Option<&Path>, out: &Path) -> CliResult<()> {
    let model = load_model(ckpt)?;
    let src = load_linear_png(source)?;
    let refimg = load_linear_png(reference)?;
    let sm = load_mask_or_full(smask, &src)?;
    let rm = load_mask_or_full(rmask, &refimg)?;
    let s = model.decompose_single(&src, &sm)?;
    let r = model.decompose_single(&refimg, &rm)?;
    let img = relight(&s.albedo, &s.normals, &r.light, &sm)?;
    save_linear_png(out, &img, BitDepth::Sixteen)?;
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path, csv: Option<&Path>, pairs: PairsArg) -> CliResult<()> {
    let model = load_model(ckpt)?;
    let (_, scenes) = load_dataset(data)?;
    let samples: Vec<_> = scenes.into_iter().map(|s| s.sample).collect();
    let name = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ev = evaluate_model(&model, &samples, pairs.into(), &name)?;
    write_file(out, ev.report.to_json())?;
    if let Some(p) = csv {
        write_file(p, ev.report.to_csv())?;
    }
    Ok(())
}

fn serve(ckpt: &Path, host: &str, port: u16, static_dir: Option<PathBuf>, threads: Option<usize>) -> CliResult<()> {
    let ip = host
        .parse()
        .map_err(|_| Failure::Core(Error::InvalidInput(format!("bad host address {host}"))))?;
    let state = Arc::new(relit_service::AppState::from_checkpoint(ckpt)?);
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n.max(1));
    }
    let rt = rt.enable_all().build().map_err(|e| io_err(Path::new("tokio runtime"), e))?;
    rt.block_on(relit_service::serve(SocketAddr::new(ip, port), state, static_dir))
        .map_err(|e| io_err(Path::new("server"), e))
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == Some(0) {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::GenData {
            scenes,
            k,
            size,
            seed,
            out,
        } => gen_data(scenes, k, size, seed, &out),
        Command::FitPair {
            img1,
            img2,
            mask,
            no_relit,
            iterations,
            lr,
            out,
        } => fit_pair_cmd(&img1, &img2, &mask, no_relit, iterations, lr, &out),
        Command::Train {
            data,
            config,
            mode,
            no_relit,
            steps,
            seed,
            batch_pairs,
            lr,
            out,
            log,
            checkpoint_every,
            resume,
        } => train(&TrainArgs {
            data: &data,
            config: config.as_deref(),
            mode,
            no_relit,
            steps,
            seed,
            batch_pairs,
            lr,
            out: &out,
            log: log.as_deref(),
            checkpoint_every,
            resume,
        }),
        Command::Decompose { ckpt, img, mask, out } => decompose(&ckpt, &img, mask.as_deref(), &out),
        Command::Relight {
            albedo,
            normals,
            light,
            mask,
            out,
        } => relight_cmd(&albedo, &normals, &light, mask.as_deref(), &out),
        Command::TransferLight {
            ckpt,
            source,
            reference,
            source_mask,
            reference_mask,
            out,
        } => transfer(&ckpt, &source, &reference, source_mask.as_deref(), reference_mask.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            out,
            csv,
            pairs,
        } => eval(&ckpt, &data, &out, csv.as_deref(), pairs),
        Command::Serve {
            ckpt,
            port,
            host,
            static_dir,
        } => serve(&ckpt, &host, port, static_dir, cli.threads),
    }
}

fn fail(f: &Failure) -> ExitCode {
    let (kind, code) = f.kind_and_code();
    let line = serde_json::json!({"error": kind, "code": code, "message": f.message()});
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            return fail(&Failure::Usage(first.to_string()));
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
        Err(f) => fail(&f),
    }
}
