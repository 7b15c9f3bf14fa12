//! `atnj`: command-line front end for the attention-injection engine.
//!
//! Exit codes: 0 ok, 1 selftest failure, 2 I/O, 3 malformed image,
//! 4 coarse token out of range, 5 empty dataset, 6 empty or bogus sweep,
//! 64 usage or configuration error, 70 any other runtime failure.

mod config;
mod selftest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atnj_core::encoder::{train_encoder, EncoderConfig, EncoderWeights, TrainConfig};
use atnj_core::formats;
use atnj_core::image::{load_ppm_dir, mask_to_pgm, read_ppm, ReferenceImage};
use atnj_core::pipeline::{sweep_csv, Engine, GenerationRequest, ReferenceInput, SweepAxis};
use atnj_core::scheduler::{NoiseSchedule, ScheduleConfig};
use atnj_core::unet::{ModelConfig, ModelWeights};
use atnj_core::Error;

use config::{ConfigError, RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "atnj", version, about = "Dual-denoiser attention injection at desk scale")]
struct Cli {
    /// `key = value` file applied before command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write freshly initialized denoiser weights.
    InitModel(InitModelArgs),
    /// DDIM-invert a reference image or latent into a trajectory.
    Invert(InvertArgs),
    /// Generate with self- and cross-attention injection.
    Generate(GenerateArgs),
    /// Train the concept encoder on a directory of PPM images.
    TrainEncoder(TrainArgs),
    /// Run generate over a list of values for one knob.
    Sweep(SweepArgs),
    /// Run the invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct InitModelArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Denoiser weights (.mw); without it the model is initialized from --model-seed.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Reference image, binary PPM 32x32.
    #[arg(long, conflicts_with = "latent")]
    image: Option<PathBuf>,
    /// Reference latent (.ten, 4x8x8), used as is.
    #[arg(long)]
    latent: Option<PathBuf>,
    #[arg(long)]
    prompt_ref: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resample the trajectory and report the reconstruction error.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct GenerateOpts {
    #[command(flatten)]
    model: ModelArgs,
    /// Concept encoder weights (.enc).
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    latent: Option<PathBuf>,
    /// Image for the concept encoder when the reference is not an image.
    #[arg(long)]
    concept_image: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    prompt_ref: Option<String>,
    #[arg(long)]
    ws: Option<f32>,
    #[arg(long)]
    wc: Option<f32>,
    #[arg(long)]
    k: Option<usize>,
    /// Index of the coarse concept word in --prompt.
    #[arg(long)]
    coarse_token: Option<usize>,
    /// Index of the coarse concept word in --prompt-ref.
    #[arg(long)]
    coarse_token_ref: Option<usize>,
    /// `all` or `injected-only`.
    #[arg(long)]
    scale_scope: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    no_self_inject: bool,
    #[arg(long)]
    no_cross_inject: bool,
    #[arg(long)]
    no_mask: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    opts: GenerateOpts,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss trace CSV; defaults to the output path with a `.csv` extension.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    opts: GenerateOpts,
    /// `ws`, `wc` or `k`.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated values.
    #[arg(long)]
    values: Option<String>,
    /// Output CSV; defaults to `<outdir>/sweep_<axis>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long)]
    golden_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Selftest,
    Io(String),
    Image(String),
    Token(String),
    EmptyDataset(String),
    Sweep(String),
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Selftest => 1,
            Failure::Io(_) => 2,
            Failure::Image(_) => 3,
            Failure::Token(_) => 4,
            Failure::EmptyDataset(_) => 5,
            Failure::Sweep(_) => 6,
            Failure::Usage(_) => 64,
            Failure::Runtime(_) => 70,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) => Failure::Io(msg),
            Error::Format { kind: "pnm", .. } => Failure::Image(msg),
            Error::Format { .. } => Failure::Io(msg),
            Error::TokenOutOfRange { .. } => Failure::Token(msg),
            Error::EmptyDataset => Failure::EmptyDataset(msg),
            Error::EmptySweep => Failure::Sweep(msg),
            Error::InvalidConfig(_) | Error::TrajectoryMismatch(_) => Failure::Usage(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(..) => Failure::Io(e.to_string()),
            ConfigError::Invalid(_) => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Errors while reading a reference image are reported as malformed input.
fn image_error(e: Error) -> Failure {
    match e {
        Error::Io(_) => Failure::Io(e.to_string()),
        e => Failure::Image(e.to_string()),
    }
}

fn load_image(path: &Path) -> Result<ReferenceImage, Failure> {
    read_ppm(path)
        .and_then(|img| ReferenceImage::from_rgb8(&img))
        .map_err(image_error)
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    formats::save(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

struct Overrides(Vec<(&'static str, String)>);

impl Overrides {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn opt<T: ToString>(&mut self, key: &'static str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
        self
    }

    fn path(&mut self, key: &'static str, v: &Option<PathBuf>) -> &mut Self {
        self.opt(key, &v.as_ref().map(|p| p.display().to_string()))
    }

    fn flag(&mut self, key: &'static str, set: bool, value: &str) -> &mut Self {
        if set {
            self.0.push((key, value.to_string()));
        }
        self
    }

    fn model(&mut self, m: &ModelArgs) -> &mut Self {
        self.path("model", &m.model).opt("model_seed", &m.model_seed)
    }

    fn generate(&mut self, g: &GenerateOpts) -> &mut Self {
        self.model(&g.model)
            .path("encoder", &g.encoder)
            .path("traj", &g.traj)
            .path("image", &g.image)
            .path("latent", &g.latent)
            .path("concept_image", &g.concept_image)
            .opt("prompt", &g.prompt)
            .opt("prompt_ref", &g.prompt_ref)
            .opt("ws", &g.ws)
            .opt("wc", &g.wc)
            .opt("k", &g.k)
            .opt("coarse_token", &g.coarse_token)
            .opt("coarse_token_ref", &g.coarse_token_ref)
            .opt("scale_scope", &g.scale_scope)
            .opt("seed", &g.seed)
            .path("outdir", &g.outdir)
            .opt("jobs", &g.jobs)
            .flag("self_inject", g.no_self_inject, "false")
            .flag("cross_inject", g.no_cross_inject, "false")
            .flag("mask", g.no_mask, "false")
    }
}

const MODEL_KEYS: &[&str] = &["model", "model_seed"];
const GENERATE_KEYS: &[&str] = &[
    "encoder",
    "traj",
    "image",
    "latent",
    "concept_image",
    "prompt",
    "prompt_ref",
    "ws",
    "wc",
    "k",
    "coarse_token",
    "coarse_token_ref",
    "scale_scope",
    "self_inject",
    "cross_inject",
    "mask",
    "seed",
    "outdir",
    "jobs",
];

fn print_config(cfg: &RunConfig, groups: &[&[&str]]) {
    println!("# resolved config");
    for keys in groups {
        print!("{}", cfg.render(keys));
    }
}

fn load_model(cfg: &RunConfig) -> Result<ModelWeights, Failure> {
    match cfg.path("model") {
        Some(p) => Ok(formats::load_model(&p)?),
        None => Ok(ModelWeights::init(ModelConfig::default(), cfg.u64("model_seed")?)?),
    }
}

fn schedule() -> Result<NoiseSchedule, Failure> {
    Ok(NoiseSchedule::new(ScheduleConfig::default())?)
}

fn cmd_init_model(cfg: &RunConfig) -> CmdResult {
    print_config(cfg, &[&["seed", "out"]]);
    let out = cfg.require_path("out")?;
    let w = ModelWeights::init(ModelConfig::default(), cfg.u64("seed")?)?;
    write(&out, &formats::encode_model(&w))?;
    println!("parameters: {}", w.param_count());
    println!("wrote {}", out.display());
    Ok(())
}

fn reference_latent(cfg: &RunConfig) -> Result<atnj_core::Tensor, Failure> {
    match (cfg.path("image"), cfg.path("latent")) {
        (Some(p), None) => Ok(load_image(&p)?.to_latent()),
        (None, Some(p)) => Ok(formats::load_tensor(&p)?),
        _ => Err(Failure::Usage("give exactly one of --image or --latent".into())),
    }
}

fn cmd_invert(cfg: &RunConfig) -> CmdResult {
    print_config(cfg, &[MODEL_KEYS, &["image", "latent", "prompt_ref", "out", "verify"]]);
    let out = cfg.require_path("out")?;
    let x0 = reference_latent(cfg)?;
    let engine = Engine::new(load_model(cfg)?, None, schedule()?);
    let prompt = cfg.words("prompt_ref");
    let traj = engine.invert(&x0, &prompt)?;
    write(&out, &formats::encode_trajectory(&traj))?;
    println!("wrote {} ({} latents)", out.display(), traj.latents.len());
    if cfg.bool("verify")? {
        let rec = engine.reconstruct(&traj, &prompt)?;
        let err = rec.max_abs_diff(&x0)?;
        let verdict = if err <= 1e-3 { "within" } else { "exceeds" };
        println!("verify: reconstruction linf = {err:.6e} ({verdict} 1e-3)");
    }
    Ok(())
}

fn build_request(cfg: &RunConfig) -> Result<GenerationRequest, Failure> {
    let reference = match (cfg.path("traj"), cfg.path("image"), cfg.path("latent")) {
        (Some(p), None, None) => ReferenceInput::Trajectory(formats::load_trajectory(&p)?),
        (None, Some(p), None) => ReferenceInput::Image(load_image(&p)?),
        (None, None, Some(p)) => ReferenceInput::Latent(formats::load_tensor(&p)?),
        _ => {
            return Err(Failure::Usage(
                "give exactly one of --traj, --image or --latent".into(),
            ))
        }
    };
    let concept_image = cfg
        .path("concept_image")
        .map(|p| load_image(&p))
        .transpose()?;
    Ok(GenerationRequest {
        prompt_gen: cfg.words("prompt"),
        prompt_ref: cfg.words("prompt_ref"),
        reference,
        concept_image,
        cfg: cfg.injection()?,
        seed: cfg.u64("seed")?,
        jobs: cfg.usize("jobs")?,
    })
}

fn build_engine(cfg: &RunConfig) -> Result<Engine, Failure> {
    let encoder = cfg
        .path("encoder")
        .map(|p| formats::load_encoder(&p))
        .transpose()?;
    Ok(Engine::new(load_model(cfg)?, encoder, schedule()?))
}

fn cmd_generate(cfg: &RunConfig) -> CmdResult {
    print_config(cfg, &[MODEL_KEYS, GENERATE_KEYS]);
    let req = build_request(cfg)?;
    let engine = build_engine(cfg)?;
    let out = engine.generate(&req)?;
    for d in &out.diagnostics {
        println!(
            "step {:2} t={:3} frozen={} proxy={:.6} |z|={:.4} {:.1?}",
            d.step,
            d.t_index,
            u8::from(d.mask_frozen),
            d.identity_proxy,
            d.latent_norm,
            d.elapsed
        );
    }
    let dir = cfg.require_path("outdir")?;
    fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let (w, h) = (engine.model.config.width, engine.model.config.height);
    write(&dir.join("z0.ten"), &formats::encode_tensor(&out.z0_gen))?;
    write(&dir.join("mask_ref.pgm"), &mask_to_pgm(&out.mask.m_r, w, h)?)?;
    write(&dir.join("mask_gen.pgm"), &mask_to_pgm(&out.mask.m_g, w, h)?)?;
    write(&dir.join("diagnostics.csv"), out.diagnostics_csv().as_bytes())?;
    println!("identity_proxy = {:.9}", out.identity_proxy);
    println!("wrote z0.ten, mask_ref.pgm, mask_gen.pgm, diagnostics.csv to {}", dir.display());
    Ok(())
}

fn cmd_train_encoder(cfg: &RunConfig) -> CmdResult {
    print_config(cfg, &[MODEL_KEYS, &["data_dir", "iters", "seed", "out", "trace"]]);
    let out = cfg.require_path("out")?;
    let trace_path = cfg.path("trace").unwrap_or_else(|| out.with_extension("csv"));
    let data = load_ppm_dir(&cfg.require_path("data_dir")?).map_err(|e| match e {
        Error::Io(_) => Failure::Io(e.to_string()),
        e => Failure::Image(e.to_string()),
    })?;
    let seed = cfg.u64("seed")?;
    let iters = cfg.usize("iters")?;
    let model = load_model(cfg)?;
    let enc = EncoderWeights::init(EncoderConfig::default(), seed)?;
    let train = TrainConfig::default();
    println!("training on {} images for {iters} iterations", data.len());
    let outcome = train_encoder(&data, &enc, &model, &schedule()?, &train, iters, seed, |k, l| {
        if k % 20 == 0 || k + 1 == iters {
            println!("iter {k:4} loss {l:.6}");
        }
    })?;
    write(&out, &formats::encode_encoder(&outcome.weights))?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in outcome.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.12}\n"));
    }
    write(&trace_path, csv.as_bytes())?;
    if let Some((first, last)) = outcome.smoothed(train.smoothing_window) {
        println!(
            "smoothed loss {first:.6} -> {last:.6} (ratio {:.4})",
            last / first
        );
    }
    println!("wrote {} and {}", out.display(), trace_path.display());
    Ok(())
}

fn monotonicity(values: &[f64]) -> &'static str {
    let up = values.windows(2).all(|w| w[1] >= w[0]);
    let down = values.windows(2).all(|w| w[1] <= w[0]);
    match (up, down) {
        (true, true) => "constant",
        (true, false) => "non-decreasing",
        (false, true) => "non-increasing",
        (false, false) => "not monotone",
    }
}

fn cmd_sweep(cfg: &RunConfig) -> CmdResult {
    print_config(cfg, &[MODEL_KEYS, GENERATE_KEYS, &["axis", "values", "out"]]);
    let axis: SweepAxis = cfg
        .raw_value("axis")
        .parse()
        .map_err(|_| Failure::Sweep(format!("unknown sweep axis {:?}", cfg.raw_value("axis"))))?;
    let values = cfg
        .list("values")
        .iter()
        .map(|v| v.parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Sweep(format!("bad sweep value: {e}")))?;
    if values.is_empty() {
        return Err(Failure::Sweep("no sweep values".into()));
    }
    let req = build_request(cfg)?;
    let engine = build_engine(cfg)?;
    let rows = engine.sweep(&req, axis, &values, cfg.usize("jobs")?)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    let proxies: Vec<f64> = rows.iter().map(|r| r.identity_proxy).collect();
    println!("identity_proxy over {axis}: {}", monotonicity(&proxies));
    let out = match cfg.path("out") {
        Some(p) => p,
        None => {
            let dir = cfg.require_path("outdir")?;
            fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
            dir.join(format!("sweep_{axis}.csv"))
        }
    };
    write(&out, csv.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn default_golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/golden")
}

fn cmd_selftest(cfg: &RunConfig) -> CmdResult {
    print_config(cfg, &[&["golden_dir"]]);
    let dir = cfg.path("golden_dir").unwrap_or_else(default_golden_dir);
    println!("golden files: {}", dir.display());
    let checks = selftest::run(&dir);
    let mut failed = 0;
    for c in &checks {
        match &c.outcome {
            Ok(detail) => println!("PASS {:<32} {detail}", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {:<32} {why}", c.name);
            }
        }
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        Err(Failure::Selftest)
    } else {
        Ok(())
    }
}

fn run(cli: Cli) -> CmdResult {
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut o = Overrides::new();
    match &cli.command {
        Command::InitModel(a) => o.opt("seed", &a.seed).path("out", &a.out),
        Command::Invert(a) => o
            .model(&a.model)
            .path("image", &a.image)
            .path("latent", &a.latent)
            .opt("prompt_ref", &a.prompt_ref)
            .path("out", &a.out)
            .flag("verify", a.verify, "true"),
        Command::Generate(a) => o.generate(&a.opts),
        Command::TrainEncoder(a) => o
            .model(&a.model)
            .path("data_dir", &a.data_dir)
            .opt("iters", &a.iters)
            .opt("seed", &a.seed)
            .path("out", &a.out)
            .path("trace", &a.trace),
        Command::Sweep(a) => o
            .generate(&a.opts)
            .opt("axis", &a.axis)
            .opt("values", &a.values)
            .path("out", &a.out),
        Command::Selftest(a) => o.path("golden_dir", &a.golden_dir),
    };
    let cfg = RunConfig::resolve(env_seed, cli.config.as_deref(), o.0)?;
    match cli.command {
        Command::InitModel(_) => cmd_init_model(&cfg),
        Command::Invert(_) => cmd_invert(&cfg),
        Command::Generate(_) => cmd_generate(&cfg),
        Command::TrainEncoder(_) => cmd_train_encoder(&cfg),
        Command::Sweep(_) => cmd_sweep(&cfg),
        Command::Selftest(_) => cmd_selftest(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(64);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Selftest => eprintln!("error: selftest failed"),
                Failure::Io(m)
                | Failure::Image(m)
                | Failure::Token(m)
                | Failure::EmptyDataset(m)
                | Failure::Sweep(m)
                | Failure::Usage(m)
                | Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
