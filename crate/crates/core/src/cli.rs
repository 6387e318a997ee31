//! Command-line front end. Each subcommand validates its inputs before doing
//! any work and maps library errors to exit codes.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::io::{self, frame_name, numbered_files, sketch_name};
use crate::data::{extract_sketch, gen_clip, split_scenes, SyntheticClip};
use crate::edm::NoiseSchedule;
use crate::error::{Error, Result};
use crate::experiment::{overlap_sweep, run_ablation, sweep_csv, training_clips};
use crate::metrics::{score_clip, EvalConfig};
use crate::model::{build, checkpoint, Denoiser};
use crate::sampler::{sample_long, Scheme, WithControl};
use crate::tensor::{ParamStore, Tensor};
use crate::training::{train, Dataset, EncodedClip, TrainOutputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => EXIT_IO,
        Error::NonFinite(_) => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "vidcolor", version, about = "Reference-based lineart video colorization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic clips (frames, sketches, flows, palette) on disk.
    Datagen(DatagenArgs),
    /// Train a denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Colorize a sketch sequence from one reference frame.
    Sample(SampleArgs),
    /// Score generated frames against originals.
    Eval(EvalArgs),
    /// Print the noise-level ladder as CSV.
    Schedule(ScheduleArgs),
    /// Desk-scale ablation, or the overlap timing sweep with `--overlap`.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Optional run configuration whose `[data]` section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub shapes: Option<usize>,
    #[arg(long)]
    pub motion: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log CSV (`step,loss,sigma`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    RefAttn,
    Schemes,
    PrevSample,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of `sketch_%05d.ppm`, one per output frame.
    #[arg(long)]
    pub sketches: PathBuf,
    /// Colored reference frame (PPM).
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    /// Run configuration whose `[sample]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub shift: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sampling steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub flows: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Input sketches; defaults to those stored next to the originals, or
    /// extracted from them.
    #[arg(long)]
    pub sketches: Option<PathBuf>,
    /// Square evaluation resolution; 0 keeps the native size.
    #[arg(long, default_value_t = EvalConfig::default().resolution)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long = "T", default_value_t = NoiseSchedule::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = NoiseSchedule::default().sigma_min)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = NoiseSchedule::default().sigma_max)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = NoiseSchedule::default().rho)]
    pub rho: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Time sampling for these overlaps instead of running the ablation;
    /// without values the configured `eval.sweep_overlaps` are used.
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    pub overlap: Option<Vec<usize>>,
    /// Cache for trained checkpoints and per-clip results.
    #[arg(long, default_value = "ablate-cache")]
    pub cache: PathBuf,
    /// Directory for the report and CSV files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Timing repeats per overlap; the fastest run counts.
    #[arg(long, default_value_t = 2)]
    pub repeats: usize,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Datagen(a) => datagen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a),
        Command::Schedule(a) => {
            let s = NoiseSchedule {
                steps: a.steps,
                sigma_min: a.sigma_min,
                sigma_max: a.sigma_max,
                rho: a.rho,
                ..Default::default()
            };
            let csv = s.to_csv().map_err(as_config)?;
            std::io::stdout()
                .write_all(csv.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
        Command::Ablate(a) => ablate(&a),
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} directory not found")),
        ))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    // A relative data directory is resolved against the config file.
    if let (Some(p), Some(dir)) = (path, cfg.data.dir.as_ref()) {
        if dir.is_relative() {
            let base = p.parent().unwrap_or(Path::new(""));
            cfg.data.dir = Some(base.join(dir));
        }
    }
    Ok(cfg)
}

fn log_line(msg: &str) {
    eprintln!("{msg}");
}

fn datagen(a: &DatagenArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let d = &mut cfg.data;
    d.clips = a.clips.unwrap_or(d.clips);
    d.seed = a.seed.unwrap_or(d.seed);
    d.length = a.length.unwrap_or(d.length);
    d.height = a.height.unwrap_or(d.height);
    d.width = a.width.unwrap_or(d.width);
    d.n_shapes = a.shapes.unwrap_or(d.n_shapes);
    d.motion_scale = a.motion.unwrap_or(d.motion_scale);
    d.clip_spec(0).validate().map_err(as_config)?;
    d.filter.validate().map_err(as_config)?;

    let mut written = 0usize;
    for i in 0..cfg.data.clips {
        let clip = gen_clip(&cfg.data.clip_spec(i))?;
        for range in split_scenes(&clip.frames, &cfg.data.filter)? {
            let part = SyntheticClip {
                frames: clip.frames[range.clone()].to_vec(),
                flows: clip.flows[range.start..range.end - 1].to_vec(),
                sketches: clip.sketches[range.clone()].to_vec(),
                palette: clip.palette.clone(),
                labels: clip.labels[range].to_vec(),
            };
            io::write_clip(&a.out.join(format!("{written:05}")), &part)?;
            written += 1;
        }
    }
    log_line(&format!("wrote {written} clips to {}", a.out.display()));
    Ok(())
}

/// Clip subdirectories of `dir` in name order.
fn clip_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(frame_name(0)).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(Some(&a.config))?;
    let clips = match &cfg.data.dir {
        Some(dir) => {
            require_dir(dir, "data")?;
            let mut clips = Vec::new();
            for d in clip_dirs(dir)? {
                let frames: Vec<Tensor<f32>> = io::read_frames(&d)?;
                let sketches: Vec<Tensor<f32>> = if numbered_files(&d, sketch_name).is_empty() {
                    frames.iter().map(extract_sketch).collect()
                } else {
                    io::read_sketches(&d)?
                };
                clips.push(EncodedClip::from_frames(&frames, &sketches)?);
            }
            clips
        }
        None => training_clips(&cfg)?,
    };
    let dataset = Dataset::new(clips, cfg.model.frames).map_err(as_config)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    init_rng.set_stream(1);
    let params: ParamStore = build(&cfg.model, &mut init_rng)?;
    let outputs = TrainOutputs {
        checkpoint: Some(a.out.clone()),
        loss_log: a.log.clone(),
    };
    let steps = cfg.train.steps;
    train(&cfg.model, params, &dataset, &cfg.train, &outputs, |step, loss| {
        if step % 100 == 0 || step == steps {
            log_line(&format!("step {step}/{steps} loss {loss:.5}"));
        }
    })?;
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut sc = cfg.sample.clone();
    sc.overlap = a.overlap.unwrap_or(sc.overlap);
    sc.shift = a.shift.unwrap_or(sc.shift);
    sc.seed = a.seed.unwrap_or(sc.seed);
    sc.schedule.steps = a.steps.unwrap_or(sc.schedule.steps);
    require_dir(&a.sketches, "sketch")?;

    let (mut model_cfg, params) = checkpoint::load::<f32>(&a.ckpt)?;
    let scheme = match a.ablate {
        None => Scheme::Full,
        Some(Ablation::RefAttn) => {
            model_cfg.reference_attention = false;
            Scheme::Full
        }
        Some(Ablation::Schemes) => Scheme::NoSchemes,
        Some(Ablation::PrevSample) => Scheme::PrevSample,
    };
    let sketches: Vec<Tensor<f32>> = io::read_sketches(&a.sketches)?;
    let reference: Tensor<f32> = io::read_ppm(&a.reference)?;
    let reference_sketch = extract_sketch(&reference);
    let n = model_cfg.frames;
    if scheme == Scheme::Full {
        sc.validate(sketches.len(), n).map_err(as_config)?;
    }
    let net = Denoiser::new(model_cfg, params);
    let den = WithControl {
        net: &net,
        use_controlnet: sc.use_controlnet,
    };
    let video = sample_long(&den, n, &sketches, &reference, &reference_sketch, scheme, &sc, false)?;
    if !video.frames.iter().all(Tensor::all_finite) {
        return Err(Error::NonFinite("sampled frames contain non-finite values".into()));
    }
    io::write_frames(&a.out, &video.frames)?;
    log_line(&format!("wrote {} frames to {}", video.frames.len(), a.out.display()));
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    for (p, what) in [(&a.generated, "generated"), (&a.original, "original"), (&a.flows, "flow")] {
        require_dir(p, what)?;
    }
    let cfg = EvalConfig {
        resolution: a.resolution,
    };
    // Either one clip per directory or one clip per subdirectory.
    let clips: Vec<(String, PathBuf, PathBuf, PathBuf, Option<PathBuf>)> = if a.generated.join(frame_name(0)).is_file() {
        let id = a
            .generated
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "0".into());
        vec![(id, a.generated.clone(), a.original.clone(), a.flows.clone(), a.sketches.clone())]
    } else {
        let dirs = clip_dirs(&a.generated)?;
        if dirs.is_empty() {
            return Err(Error::format(&a.generated, "no frame_00000.ppm and no clip subdirectories"));
        }
        dirs.into_iter()
            .map(|g| {
                let name = g.file_name().expect("listed entry").to_os_string();
                let id = name.to_string_lossy().into_owned();
                (
                    id,
                    g,
                    a.original.join(&name),
                    a.flows.join(&name),
                    a.sketches.as_ref().map(|s| s.join(&name)),
                )
            })
            .collect()
    };
    let mut csv = String::from("clip_id,psnr,ssim,tc,edmd\n");
    for (id, gen_dir, orig_dir, flow_dir, sketch_dir) in clips {
        let generated: Vec<Tensor<f32>> = io::read_frames(&gen_dir)?;
        let original: Vec<Tensor<f32>> = io::read_frames(&orig_dir)?;
        let flows: Vec<Tensor<f32>> = io::read_flows(&flow_dir)?;
        let sketches: Vec<Tensor<f32>> = match sketch_dir {
            Some(d) => io::read_sketches(&d)?,
            None if !numbered_files(&orig_dir, sketch_name).is_empty() => io::read_sketches(&orig_dir)?,
            None => original.iter().map(extract_sketch).collect(),
        };
        if generated.len() != original.len() {
            return Err(Error::InvalidArgument(format!(
                "clip {id}: {} generated frames but {} originals",
                generated.len(),
                original.len()
            )));
        }
        let s = score_clip(&generated, &original, &flows, &sketches, &cfg)?;
        csv.push_str(&format!("{id},{},{},{},{}\n", s.psnr, s.ssim, s.tc.value, s.edmd.value));
    }
    write_file(&a.out, &csv)
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut log = |m: &str| log_line(m);
    if let Some(overlaps) = &a.overlap {
        let overlaps = if overlaps.is_empty() {
            cfg.eval.sweep_overlaps.clone()
        } else {
            overlaps.clone()
        };
        let rows = overlap_sweep(&cfg, &overlaps, a.repeats, &mut log)?;
        let csv = sweep_csv(&rows);
        print!("{csv}");
        if let Some(out) = &a.out {
            write_file(&out.join("overlap_sweep.csv"), &csv)?;
        }
        return Ok(());
    }
    let report = run_ablation(&cfg, &a.cache, &mut log)?;
    let table = report.table();
    print!("{table}");
    if let Some(out) = &a.out {
        write_file(&out.join("ablation.txt"), &table)?;
        write_file(&out.join("ablation.csv"), &report.to_csv())?;
    }
    Ok(())
}
