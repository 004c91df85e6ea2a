use std::path::{Path, PathBuf};
use std::process::ExitCode;

use birdfit::io::{self, ObservationsFile};
use birdfit::preprocess::crop_image;
use birdfit::FitConfig;
use birdfit_cli::config::Config;
use birdfit_cli::grid::{run_grid, write_table, GridSpec};
use birdfit_cli::pipeline::{build_track, evaluate, fit_observations, track_detections, FitFile};
use birdfit_cli::render::{render_overlay, write_silhouettes};
use birdfit_cli::scene::{frame_path, synthesize, write_frames};
use birdfit_cli::{CliError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Temporally consistent 3D bird pose fitting from 2D keypoints and masks.
#[derive(Debug, Parser)]
#[command(name = "birdfit", version)]
struct Cli {
    /// TOML config file; defaults to the file named by BIRDFIT_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Skeleton model JSON; overrides the config.
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-bird scene with ground truth.
    Synth(SynthArgs),
    /// Link detections into tracks by box overlap.
    Track(TrackArgs),
    /// Crop every track into normalized observations.
    Preprocess(PreprocessArgs),
    /// Fit the skeleton to preprocessed observations.
    Fit(Box<FitArgs>),
    /// Score fits against ground-truth keypoints.
    Eval(EvalArgs),
    /// Run an experiment grid and write a sorted results table.
    Grid(GridArgs),
    /// Draw fits over the source frames.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for keypoints.csv, masks.csv and ground_truth.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    birds: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    noise_px: Option<f64>,
    #[arg(long)]
    outlier_prob: Option<f64>,
    /// Also write grayscale frames to OUT/frames.
    #[arg(long)]
    images: bool,
}

#[derive(Debug, Args)]
struct TrackArgs {
    /// Directory holding keypoints.csv and masks.csv.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to DATA/tracks.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    max_misses: Option<usize>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Directory holding keypoints.csv and masks.csv.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to DATA/tracks.csv.
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Output directory for track_ID.json files.
    #[arg(long)]
    out: PathBuf,
    /// Source frames; crops are written next to the observations.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// The configuration defaults.
    Default,
    /// One frame per window.
    SingleFrame,
    /// Velocity and acceleration terms, median filter, shared size.
    Temporal,
}

/// Overrides for every fitting parameter.
#[derive(Debug, Default, Args)]
struct FitFlags {
    /// Replaces the config's fit section before the flags below apply.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    lambda_kpt: Option<f64>,
    #[arg(long)]
    lambda_msk: Option<f64>,
    #[arg(long)]
    lambda_pp: Option<f64>,
    #[arg(long)]
    lambda_vel: Option<f64>,
    #[arg(long)]
    lambda_acc: Option<f64>,
    #[arg(long)]
    beta_g: Option<f64>,
    #[arg(long)]
    beta_p: Option<f64>,
    #[arg(long)]
    gm_sigma: Option<f64>,
    #[arg(long)]
    stage1_lambda_msk: Option<f64>,
    #[arg(long)]
    use_median_filter: Option<bool>,
    #[arg(long)]
    median_window: Option<usize>,
    #[arg(long)]
    common_size: Option<bool>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage2_iters: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_epsilon: Option<f64>,
    #[arg(long)]
    sharpness: Option<f64>,
}

macro_rules! override_fields {
    ($flags:expr, $cfg:expr, $($field:ident),*) => {
        $(if let Some(v) = $flags.$field { $cfg.$field = v; })*
    };
}

impl FitFlags {
    fn apply(&self, base: FitConfig) -> FitConfig {
        let mut cfg = match self.preset {
            None => base,
            Some(Preset::Default) => FitConfig::default(),
            Some(Preset::SingleFrame) => FitConfig::single_frame(),
            Some(Preset::Temporal) => FitConfig::temporal(),
        };
        override_fields!(
            self,
            cfg,
            window_size,
            lambda_kpt,
            lambda_msk,
            lambda_pp,
            lambda_vel,
            lambda_acc,
            beta_g,
            beta_p,
            gm_sigma,
            stage1_lambda_msk,
            use_median_filter,
            median_window,
            common_size,
            stage1_iters,
            stage2_iters,
            learning_rate,
            adam_beta1,
            adam_beta2,
            adam_epsilon,
            sharpness
        );
        cfg
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Observation files, or directories of track_*.json.
    #[arg(long, required = true, num_args = 1..)]
    observations: Vec<PathBuf>,
    /// Output directory for fit_ID.json files.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Fit files, or directories of fit_*.json.
    #[arg(long, required = true, num_args = 1..)]
    fits: Vec<PathBuf>,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Grid spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Observation files, or directories of track_*.json.
    #[arg(long, required = true, num_args = 1..)]
    observations: Vec<PathBuf>,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Results table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Fit files, or directories of fit_*.json.
    #[arg(long, required = true, num_args = 1..)]
    fits: Vec<PathBuf>,
    /// Directory of frame_NNNNNN.png images.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also dump the crop silhouettes as grayscale images.
    #[arg(long)]
    silhouettes: bool,
}

fn existing(p: &Path) -> Result<&Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::NotFound(p.to_path_buf()))
    }
}

/// Files as given; directories expand to their `PREFIX*.json` entries in
/// name order.
fn expand(paths: &[PathBuf], prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if existing(p)?.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.starts_with(prefix) && name.ends_with(".json")
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn read_observations(paths: &[PathBuf]) -> Result<Vec<ObservationsFile>> {
    expand(paths, "track_")?
        .iter()
        .map(|p| {
            let o: ObservationsFile = io::read_json(p)?;
            o.check_version()?;
            Ok(o)
        })
        .collect()
}

fn read_fits(paths: &[PathBuf]) -> Result<Vec<FitFile>> {
    expand(paths, "fit_")?
        .iter()
        .map(|p| {
            let f: FitFile = io::read_json(p)?;
            f.check_version()?;
            Ok(f)
        })
        .collect()
}

fn read_detections(dir: &Path) -> Result<io::Detections> {
    Ok(io::read_detections(io::open(existing(&dir.join("keypoints.csv"))?)?, io::open(existing(&dir.join("masks.csv"))?)?)?)
}

fn synth(cfg: &Config, model_path: Option<&Path>, a: SynthArgs) -> Result<()> {
    let model = cfg.load_model(model_path)?;
    let mut spec = cfg.synth.clone();
    if let Some(v) = a.birds {
        spec.birds = v;
    }
    if let Some(v) = a.frames {
        spec.frames = v;
    }
    if let Some(v) = a.drop_prob {
        spec.drop_prob = v;
    }
    if let Some(v) = a.noise_px {
        spec.motion.noise_px = v;
    }
    if let Some(v) = a.outlier_prob {
        spec.motion.outlier_prob = v;
    }
    let scene = synthesize(&model, &spec, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    io::write_detections(&scene.detections, io::create(&a.out.join("keypoints.csv"))?, io::create(&a.out.join("masks.csv"))?)?;
    io::write_ground_truth(&scene.ground_truth, io::create(&a.out.join("ground_truth.csv"))?)?;
    if a.images {
        write_frames(&scene, &model, &a.out.join("frames"))?;
    }
    let detections: usize = scene.detections.frames.values().map(Vec::len).sum();
    log::info!("wrote {detections} detections of {} birds to {}", spec.birds, a.out.display());
    Ok(())
}

fn track(cfg: &Config, a: TrackArgs) -> Result<()> {
    let mut tc = cfg.tracker;
    if let Some(v) = a.iou_threshold {
        tc.iou_threshold = v;
    }
    if let Some(v) = a.max_misses {
        tc.max_misses = v;
    }
    let detections = read_detections(&a.data)?;
    let tracks = track_detections(&detections, tc)?;
    let out = a.out.unwrap_or_else(|| a.data.join("tracks.csv"));
    io::write_tracks(&tracks, &detections, io::create(&out)?)?;
    log::info!("wrote {} tracks to {}", tracks.len(), out.display());
    Ok(())
}

fn preprocess(cfg: &Config, a: PreprocessArgs) -> Result<()> {
    let detections = read_detections(&a.data)?;
    let tracks = io::read_tracks(io::open(existing(&a.tracks.unwrap_or_else(|| a.data.join("tracks.csv")))?)?)?;
    std::fs::create_dir_all(&a.out)?;
    for (id, rows) in &tracks {
        let (file, crops) = build_track(&detections, rows, &cfg.crop)?;
        io::write_json(&a.out.join(format!("track_{id}.json")), &file)?;
        let Some(frames_dir) = &a.frames else { continue };
        let crop_dir = a.out.join(format!("crops_{id}"));
        std::fs::create_dir_all(&crop_dir)?;
        for (obs, crop) in file.frames.iter().zip(&crops) {
            let Some(crop) = crop else { continue };
            let src = frame_path(frames_dir, obs.frame_index);
            if !src.exists() {
                log::warn!("frame {}: {} not found, no crop written", obs.frame_index, src.display());
                continue;
            }
            let img = image::open(&src)?.to_luma8();
            let size = (img.width() as usize, img.height() as usize);
            let pixels = crop_image(img.as_raw(), size, crop)?;
            let s = cfg.crop.size as u32;
            let out = image::GrayImage::from_raw(s, s, pixels).expect("crop matches size");
            out.save(frame_path(&crop_dir, obs.frame_index))?;
        }
    }
    log::info!("wrote {} tracks to {}", tracks.len(), a.out.display());
    Ok(())
}

fn fit(cfg: &Config, model_path: Option<&Path>, a: FitArgs) -> Result<()> {
    let model = cfg.load_model(model_path)?;
    let config = a.flags.apply(cfg.fit);
    config.validate()?;
    let camera = cfg.crop_camera();
    std::fs::create_dir_all(&a.out)?;
    for obs in read_observations(&a.observations)? {
        let result = fit_observations(&model, &camera, &obs, &config)?;
        io::write_json(&a.out.join(format!("fit_{}.json", obs.track_id)), &result)?;
        log::info!("track {}: {} frames fitted", obs.track_id, result.frames.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let fits = read_fits(&a.fits)?;
    let gt = io::read_ground_truth(io::open(existing(&a.ground_truth)?)?)?;
    let report = evaluate(&fits, &gt)?;
    match a.out {
        Some(p) => io::write_json(&p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn grid(cfg: &Config, model_path: Option<&Path>, a: GridArgs) -> Result<()> {
    let model = cfg.load_model(model_path)?;
    let spec = GridSpec::from_toml(&std::fs::read_to_string(existing(&a.spec)?)?)?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let observations = read_observations(&a.observations)?;
    let gt = io::read_ground_truth(io::open(existing(&a.ground_truth)?)?)?;
    let rows = run_grid(&spec, &model, &cfg.crop_camera(), &observations, &gt, a.jobs)?;
    write_table(&rows, io::create(&a.out)?)?;
    log::info!("{} grid cells written to {}", rows.len(), a.out.display());
    Ok(())
}

fn render(cfg: &Config, model_path: Option<&Path>, a: RenderArgs) -> Result<()> {
    let model = cfg.load_model(model_path)?;
    let fits = read_fits(&a.fits)?;
    let summary = render_overlay(&fits, &model, &a.frames, &a.out)?;
    if a.silhouettes {
        for f in &fits {
            write_silhouettes(f, &model, &a.out)?;
        }
    }
    log::info!("{} overlays written, {} frames skipped", summary.written.len(), summary.skipped.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    let model = cli.model.as_deref();
    match cli.command {
        Command::Synth(a) => synth(&cfg, model, a),
        Command::Track(a) => track(&cfg, a),
        Command::Preprocess(a) => preprocess(&cfg, a),
        Command::Fit(a) => fit(&cfg, model, *a),
        Command::Eval(a) => eval(a),
        Command::Grid(a) => grid(&cfg, model, a),
        Command::Render(a) => render(&cfg, model, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // help and version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).to_json_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
