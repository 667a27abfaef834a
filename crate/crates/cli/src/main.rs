use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use uwsplat::interp::{interpolate_sequence, InterpMode};
use uwsplat::io::{list_interp_frames, load_scene, split_views, write_image, RunConfig};
use uwsplat::losses::LossReport;
use uwsplat::train::{
    checkpoint_name, evaluate, evaluate_to_dir, make_synthetic_scene, write_synthetic, Checkpoint, Trainer,
};
use uwsplat::{render, CameraView, Intrinsics, MediumSample, Pose};

const LOG_FILE: &str = "train_log.csv";
const REPORT_FILE: &str = "report.txt";
const CONFIG_FILE: &str = "config.txt";
const EVAL_DIR: &str = "eval";

#[derive(Parser, Debug)]
#[command(name = "uwsplat", version, about = "Gaussian splatting through water")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize a scene and write checkpoints, a loss log and a report.
    Train(TrainArgs),
    /// Render one view from a checkpoint.
    Render(RenderArgs),
    /// Metrics of a checkpoint on the held-out views of a scene.
    Eval(EvalArgs),
    /// Synthesize midpoint frames between adjacent training views.
    Interp(InterpArgs),
    /// Write a synthetic underwater scene.
    Simulate(SimulateArgs),
    /// Print counts of views, points and interpolated frames.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_ifi: bool,
    #[arg(long)]
    no_afw: bool,
    #[arg(long)]
    no_esl: bool,
    #[arg(long)]
    no_decouple: bool,
    #[arg(long)]
    shallow_mlp: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// View index into `--scene`, or a pose file.
    #[arg(long)]
    camera: String,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write the medium-free colours instead of the degraded render.
    #[arg(long)]
    restored: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Also write metrics.csv and renders here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InterpArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value = "flow")]
    mode: InterpMode,
    /// Defaults to the scene's interp directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    split_modulus: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    gaussians: usize,
    #[arg(long, default_value_t = 12)]
    views: usize,
    #[arg(long, value_parser = parse_rgb, default_value = "0.4,0.15,0.1")]
    beta_d: [f64; 3],
    #[arg(long, value_parser = parse_rgb, default_value = "0.3,0.2,0.15")]
    beta_b: [f64; 3],
    #[arg(long, value_parser = parse_rgb, default_value = "0.1,0.3,0.4")]
    binf: [f64; 3],
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long)]
    scene: PathBuf,
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected r,g,b, got '{s}'"));
    }
    let mut out = [0.0f64; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("'{p}' is not a number"))?;
        if !o.is_finite() {
            return Err(format!("'{p}' is not finite"));
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    let mut last = msg.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            msg += &format!(": {text}");
        }
        last = text;
    }
    msg
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Render(a) => render_view(a),
        Command::Eval(a) => eval(a),
        Command::Interp(a) => interp(a),
        Command::Simulate(a) => simulate(a),
        Command::Info(a) => scene_info(a),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.scene {
        cfg.scene = Some(s);
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    let t = &mut cfg.train;
    if let Some(n) = a.iterations {
        t.iterations = n;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    t.ifi &= !a.no_ifi;
    t.afw &= !a.no_afw;
    t.esl &= !a.no_esl;
    t.decouple &= !a.no_decouple;
    t.shallow_mlp |= a.shallow_mlp;
    t.validate()?;

    let scene_dir = cfg.scene.clone().ok_or_else(|| anyhow!("no scene given (--scene or 'scene =' in the config)"))?;
    let out = cfg.out.clone().ok_or_else(|| anyhow!("no output directory given (--out or 'out =' in the config)"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;

    let scene = load_scene(&scene_dir)?;
    let mut trainer = Trainer::from_scene(&scene, cfg.train.clone())?;
    let every = trainer.config.checkpoint_interval;
    let total = trainer.config.iterations;
    let mut log = String::from(LossReport::CSV_HEADER);
    log.push('\n');
    while trainer.iteration < total {
        let it = trainer.iteration;
        let report = trainer.train_step()?;
        log += &report.csv_row(it);
        log.push('\n');
        if (it + 1) % 500 == 0 {
            info!("iteration {} loss {:.5} ({} Gaussians)", it + 1, report.total, trainer.cloud.len());
        }
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < total {
            trainer.checkpoint().save(&out.join(checkpoint_name(trainer.iteration as u64)))?;
        }
    }
    fs::write(out.join(LOG_FILE), log)?;
    let ckpt = out.join(checkpoint_name(trainer.iteration as u64));
    trainer.checkpoint().save(&ckpt)?;

    let metrics = evaluate_to_dir(&trainer.cloud, &trainer.medium, &trainer.test_views, &out.join(EVAL_DIR))?;
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "none".into());
    let c = &trainer.config;
    let report = format!(
        "iterations = {}\nifi = {}\nafw = {}\nesl = {}\ndecouple = {}\nshallow_mlp = {}\n\
         interpolated_frames = {}\npoints_initial = {}\npoints_enriched = {}\ngaussians = {}\n\
         final_loss = {:.9e}\ntest_views = {}\ntest_psnr = {}\ntest_ssim = {}\nconfig_hash = {}\n",
        trainer.iteration,
        on_off(c.ifi),
        on_off(c.afw),
        on_off(c.esl),
        on_off(c.decouple),
        on_off(c.shallow_mlp),
        trainer.interpolated_count(),
        trainer.points_initial,
        trainer.points_enriched,
        trainer.cloud.len(),
        trainer.training_loss()?,
        trainer.test_views.len(),
        fmt_opt(metrics.mean_psnr()),
        fmt_opt(metrics.mean_ssim()),
        c.hash_hex(),
    );
    fs::write(out.join(REPORT_FILE), &report)?;
    print!("{report}");
    Ok(())
}

/// Pose file: `width height fx fy cx cy` then the world-to-camera
/// `qw qx qy qz tx ty tz`, whitespace separated, `#` comments.
fn read_pose_file(path: &Path) -> Result<CameraView> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let nums = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().with_context(|| format!("{}: bad number '{t}'", path.display())))
        .collect::<Result<Vec<f64>>>()?;
    if nums.len() != 13 {
        bail!("{}: expected 13 numbers, found {}", path.display(), nums.len());
    }
    let size = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            bail!("{}: image size {v} is not a positive integer", path.display())
        }
    };
    let intr = Intrinsics {
        width: size(nums[0])?,
        height: size(nums[1])?,
        fx: nums[2],
        fy: nums[3],
        cx: nums[4],
        cy: nums[5],
    };
    let q = nalgebra::Quaternion::new(nums[6], nums[7], nums[8], nums[9]);
    if q.norm() < 1e-12 {
        bail!("{}: zero quaternion", path.display());
    }
    let r: Matrix3<f64> = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    let pose = Pose {
        rotation: r,
        translation: Vector3::new(nums[10], nums[11], nums[12]),
    };
    Ok(CameraView::blank("pose", intr, pose))
}

fn render_view(a: RenderArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let view = match a.camera.parse::<usize>() {
        Ok(i) => {
            let dir = a.scene.as_ref().ok_or_else(|| anyhow!("--camera {i} needs --scene"))?;
            let scene = load_scene(dir)?;
            let n = scene.views.len();
            scene.views.into_iter().nth(i).ok_or_else(|| anyhow!("camera index {i} out of range ({n} views)"))?
        }
        Err(_) => read_pose_file(Path::new(&a.camera))?,
    };
    let out = render(&ckpt.cloud, &ckpt.medium, &view)?;
    let img = if a.restored { out.restored } else { out.colour };
    write_image(&a.out, &img)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let scene = load_scene(&a.scene)?;
    let (_, test) = split_views(&scene.views, ckpt.config.split_modulus);
    let report = match &a.out {
        Some(dir) => evaluate_to_dir(&ckpt.cloud, &ckpt.medium, &test, dir)?,
        None => evaluate(&ckpt.cloud, &ckpt.medium, &test)?,
    };
    print!("{}", report.to_csv());
    Ok(())
}

fn interp(a: InterpArgs) -> Result<()> {
    if a.split_modulus < 2 {
        bail!("--split-modulus must be at least 2");
    }
    let scene = load_scene(&a.scene)?;
    let (train, _) = split_views(&scene.views, a.split_modulus);
    let frames = interpolate_sequence(&train, a.mode, Some(&scene.interp_dir()))?;
    let dir = a.out.unwrap_or_else(|| scene.interp_dir());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for f in &frames {
        f.write_png(&dir)?;
    }
    println!("{} {} frames written to {}", frames.len(), a.mode, dir.display());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let medium = MediumSample {
        beta_d: a.beta_d,
        beta_b: a.beta_b,
        b_inf: a.binf,
    };
    let scene = make_synthetic_scene(a.seed, a.gaussians, a.views, &medium)?;
    write_synthetic(&a.out, &scene)?;
    println!("{} views, {} points written to {}", scene.views.len(), scene.points.len(), a.out.display());
    Ok(())
}

fn scene_info(a: InfoArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let interp = list_interp_frames(&a.scene)?;
    println!("views = {}", scene.views.len());
    println!("points = {}", scene.points.len());
    println!("interpolated_frames = {}", interp.len());
    Ok(())
}
