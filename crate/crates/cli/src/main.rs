use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gsavatar_core::avatar::{
    build_avatar_traced, load_avatar, parse_drive_stream, save_avatar, write_drive_stream, Avatar, DriveParams,
    DriveRecord,
};
use gsavatar_core::config::AvatarConfig;
use gsavatar_core::geometry::Camera;
use gsavatar_core::image::{synthetic_portrait, Image};
use gsavatar_core::model::{load_model, make_synthetic_model, save_model, ParametricHeadModel, PoseParams};
use gsavatar_core::neural::{mix_seed, rng};
use gsavatar_core::render::{project_gaussians, rasterize, rasterize_reference, refine, RenderTarget};
use gsavatar_core::verify::{random_drive, run_checks, VerifyOptions};

/// Frames per level in `bench` unless overridden.
const BENCH_FRAMES: usize = 100;

/// Reference throughput on an RTX 4090, levels 2, 1, 0. Printed, never compared.
const REFERENCE_FPS: [(usize, f64); 3] = [(2, 126.44), (1, 148.04), (0, 152.57)];

#[derive(Parser, Debug)]
#[command(
    name = "gsavatar",
    version,
    about = "Single-image Gaussian head avatars with levels of detail"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Worker threads (0 = all cores). OMG_THREADS takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file; missing keys use the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an avatar snapshot from one portrait.
    Build {
        #[command(flatten)]
        common: Common,
        /// Parametric model manifest; a synthetic model is generated when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Background-removed portrait (binary PPM); synthetic when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        snapshot: PathBuf,
        /// Build report path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-level depth buffers and visibility masks.
        #[arg(long)]
        dump_visibility: Option<PathBuf>,
        /// Depth tolerance of the visibility test.
        #[arg(long)]
        visibility_eps: Option<f64>,
    },
    /// Render frames from a snapshot, one per drive record.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        /// Newline-delimited JSON drive records; a neutral frame when absent.
        #[arg(long)]
        drive: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        lod: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Use the brute-force rasterizer.
        #[arg(long)]
        reference_raster: bool,
        /// Also write every rendered feature channel as raw f32.
        #[arg(long)]
        raw_features: bool,
    },
    /// Time reenactment plus splatting at every level.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        /// Drive records cycled over the timed frames; neutral when absent.
        #[arg(long)]
        drive: Option<PathBuf>,
        #[arg(long, default_value_t = BENCH_FRAMES)]
        frames: usize,
        /// Include the image-space refiner in the timed frame.
        #[arg(long)]
        refine: bool,
        /// Report path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the self-check suite; exit 1 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Overrides the visibility tolerance used by the oracle check.
        #[arg(long)]
        visibility_eps: Option<f64>,
        /// Random scenes in the renderer equivalence check.
        #[arg(long, default_value_t = 10)]
        render_scenes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic model, portrait, drive stream and configuration.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Random drive records after the neutral one.
        #[arg(long, default_value_t = 4)]
        frames: usize,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Verification(Value),
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(report)) => {
            eprintln!("verification failed");
            log::debug!("{report}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Build { common, .. }
        | Command::Render { common, .. }
        | Command::Bench { common, .. }
        | Command::Verify { common, .. }
        | Command::Synth { common, .. } => common,
    }
}

fn thread_count(flag: usize) -> anyhow::Result<usize> {
    match std::env::var("OMG_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("OMG_THREADS={v:?} is not a thread count")),
        Err(_) => Ok(flag),
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    let c = common(&cmd).clone();
    let threads = thread_count(c.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("thread pool")?;
    let mut config = match &c.config {
        Some(p) => AvatarConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => AvatarConfig::desk(),
    };
    if let Some(s) = c.seed {
        config.seed = s;
    }
    match cmd {
        Command::Build {
            model,
            image,
            snapshot,
            out,
            dump_visibility,
            visibility_eps,
            ..
        } => {
            if visibility_eps.is_some() {
                config.visibility_epsilon = visibility_eps;
            }
            config.validate().context("config")?;
            let report = cmd_build(
                &config,
                model.as_deref(),
                image.as_deref(),
                &snapshot,
                dump_visibility.as_deref(),
            )?;
            emit(&report, out.as_deref())?;
        }
        Command::Render {
            snapshot,
            drive,
            lod,
            out,
            reference_raster,
            raw_features,
            ..
        } => {
            let report = cmd_render(&snapshot, drive.as_deref(), lod, &out, reference_raster, raw_features)?;
            emit(&report, None)?;
        }
        Command::Bench {
            snapshot,
            drive,
            frames,
            refine,
            out,
            ..
        } => {
            let report = cmd_bench(&snapshot, drive.as_deref(), frames, refine, threads)?;
            print_bench_table(&report);
            emit(&report, out.as_deref())?;
        }
        Command::Verify {
            visibility_eps,
            render_scenes,
            out,
            ..
        } => {
            let report = run_checks(&VerifyOptions {
                seed: config.seed,
                visibility_epsilon: visibility_eps,
                render_scenes,
            });
            let value = serde_json::to_value(&report).context("report")?;
            emit(&value, out.as_deref())?;
            for check in &report.checks {
                eprintln!(
                    "{:<28} {} ({:.0} ms)",
                    check.name,
                    if check.passed { "PASS" } else { "FAIL" },
                    check.millis
                );
            }
            if !report.passed {
                return Err(Failure::Verification(value));
            }
        }
        Command::Synth { out, frames, .. } => {
            let report = cmd_synth(&config, &out, frames)?;
            emit(&report, None)?;
        }
    }
    Ok(())
}

fn write_json(value: &Value, path: &Path) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Prints to stdout; a closed pipe is not an error.
fn print_stdout(text: &str) -> anyhow::Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(value: &Value, path: Option<&Path>) -> anyhow::Result<()> {
    print_stdout(&serde_json::to_string_pretty(value)?)?;
    if let Some(p) = path {
        write_json(value, p)?;
    }
    Ok(())
}

fn model_for(config: &AvatarConfig, path: Option<&Path>) -> anyhow::Result<ParametricHeadModel> {
    match path {
        Some(p) => load_model(p).with_context(|| format!("model {}", p.display())),
        None => Ok(make_synthetic_model(&config.model)?),
    }
}

fn cmd_build(
    config: &AvatarConfig,
    model_path: Option<&Path>,
    image_path: Option<&Path>,
    snapshot: &Path,
    dump: Option<&Path>,
) -> anyhow::Result<Value> {
    let start = Instant::now();
    let model = model_for(config, model_path)?;
    let image = match image_path {
        Some(p) => Image::read_ppm(p).with_context(|| format!("image {}", p.display()))?,
        None => synthetic_portrait(config.image_size.0, config.image_size.1, config.seed),
    };
    let camera = Camera::facing_origin(image.width, image.height, config.camera_distance);
    let params = PoseParams::neutral(&model);
    let (avatar, trace) = build_avatar_traced(&image, &model, &camera, &params, config)?;
    let build_ms = start.elapsed().as_secs_f64() * 1e3;
    save_avatar(&avatar, snapshot).with_context(|| format!("snapshot {}", snapshot.display()))?;
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (k, (d, m)) in trace.depth.iter().zip(&trace.masks).enumerate() {
            d.dump(&dir.join(format!("depth_lod{k}.f32")))?;
            m.dump(&dir.join(format!("mask_lod{k}.u8")))?;
        }
    }
    let mut stages = serde_json::Map::new();
    for (name, ms) in &trace.timings_ms {
        let slot = stages.entry(name.to_string()).or_insert(json!(0.0));
        *slot = json!(slot.as_f64().unwrap_or(0.0) + ms);
    }
    Ok(json!({
        "snapshot": snapshot.display().to_string(),
        "seed": config.seed,
        "image_size": [image.width, image.height],
        "levels": avatar.report.levels,
        "shoulder_points": avatar.report.shoulder_points,
        "plane_depth": avatar.report.plane_depth,
        "point_counts": avatar.point_counts(),
        "stage_ms": stages,
        "build_ms": build_ms,
    }))
}

fn drives_for(avatar: &Avatar, path: Option<&Path>) -> anyhow::Result<Vec<(u64, DriveParams)>> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("drive stream {}", p.display()))?;
            Ok(parse_drive_stream(&text, &avatar.model)?)
        }
        None => Ok(vec![(0, DriveParams::from_params(&avatar.identity))]),
    }
}

fn load(snapshot: &Path) -> anyhow::Result<Avatar> {
    load_avatar(snapshot).with_context(|| format!("snapshot {}", snapshot.display()))
}

fn check_lod(avatar: &Avatar, lod: usize) -> anyhow::Result<()> {
    if lod > avatar.max_level() {
        bail!("--lod {lod} is out of range 0..={}", avatar.max_level());
    }
    Ok(())
}

fn splat(avatar: &Avatar, drive: &DriveParams, lod: usize, reference: bool) -> anyhow::Result<RenderTarget> {
    let set = avatar.reenact(drive, lod)?;
    let camera = avatar.camera_for(drive);
    let splats = project_gaussians(&set, &camera);
    let raster = if reference { rasterize_reference } else { rasterize };
    Ok(raster(&splats, camera.width, camera.height, set.feature_dim(), 0.0)?)
}

fn cmd_render(
    snapshot: &Path,
    drive: Option<&Path>,
    lod: usize,
    out: &Path,
    reference: bool,
    raw: bool,
) -> anyhow::Result<Value> {
    let avatar = load(snapshot)?;
    check_lod(&avatar, lod)?;
    let drives = drives_for(&avatar, drive)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut frames = Vec::with_capacity(drives.len());
    for (frame, d) in &drives {
        let target = splat(&avatar, d, lod, reference)?;
        let image = refine(&target, &avatar.networks.refiner)?;
        let path = out.join(format!("frame_{frame:05}.ppm"));
        image
            .write_ppm(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        if raw {
            target.image().write_raw(&out.join(format!("frame_{frame:05}.f32")))?;
        }
        frames.push(json!({
            "frame": frame,
            "path": path.display().to_string(),
            "alpha_max": target.alpha_max(),
        }));
    }
    Ok(json!({ "lod": lod, "reference_raster": reference, "frames": frames }))
}

fn cmd_bench(
    snapshot: &Path,
    drive: Option<&Path>,
    frames: usize,
    with_refiner: bool,
    threads: usize,
) -> anyhow::Result<Value> {
    let avatar = load(snapshot)?;
    // Drive parsing stays outside the timed loop.
    let drives = drives_for(&avatar, drive)?;
    let frames = frames.max(1);
    let counts = avatar.point_counts();
    let mut levels = Vec::new();
    for lod in 0..=avatar.max_level() {
        let (_, warm) = &drives[0];
        splat(&avatar, warm, lod, false)?;
        let start = Instant::now();
        for i in 0..frames {
            let (_, d) = &drives[i % drives.len()];
            let target = splat(&avatar, d, lod, false)?;
            if with_refiner {
                refine(&target, &avatar.networks.refiner)?;
            }
        }
        let mean_ms = start.elapsed().as_secs_f64() * 1e3 / frames as f64;
        levels.push(json!({
            "lod": lod,
            "points": counts[lod],
            "mean_ms": mean_ms,
            "fps": 1e3 / mean_ms,
        }));
    }
    let reference: Vec<Value> = REFERENCE_FPS
        .iter()
        .map(|&(lod, fps)| json!({ "lod": lod, "fps": fps }))
        .collect();
    Ok(json!({
        "frames": frames,
        "threads": if threads == 0 { rayon::current_num_threads() } else { threads },
        "refiner": with_refiner,
        "image_size": [avatar.camera.width, avatar.camera.height],
        "levels": levels,
        "reference": { "device": "RTX 4090", "levels": reference },
    }))
}

fn print_bench_table(report: &Value) {
    eprintln!("{:>4} {:>10} {:>12} {:>10}", "lod", "points", "ms/frame", "fps");
    for l in report["levels"].as_array().into_iter().flatten() {
        eprintln!(
            "{:>4} {:>10} {:>12.3} {:>10.2}",
            l["lod"].as_u64().unwrap_or(0),
            l["points"].as_u64().unwrap_or(0),
            l["mean_ms"].as_f64().unwrap_or(f64::NAN),
            l["fps"].as_f64().unwrap_or(f64::NAN)
        );
    }
    let reference: Vec<String> = report["reference"]["levels"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|l| format!("lod {} = {}", l["lod"], l["fps"]))
        .collect();
    eprintln!("reference fps (RTX 4090, not compared): {}", reference.join(", "));
}

fn cmd_synth(config: &AvatarConfig, out: &Path, frames: usize) -> anyhow::Result<Value> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let model = make_synthetic_model(&config.model)?;
    let model_path = out.join("model.json");
    save_model(&model, &model_path)?;
    let (w, h) = config.image_size;
    let image_path = out.join("portrait.ppm");
    synthetic_portrait(w, h, config.seed).write_ppm(&image_path)?;
    let mut r = rng(mix_seed(config.seed, 0x5d));
    let mut records = vec![DriveRecord::from_drive(0, &DriveParams::neutral(&model))];
    for f in 1..=frames as u64 {
        let d = random_drive(&mut r, model.joint_count(), model.expr_dim());
        records.push(DriveRecord::from_drive(f, &d));
    }
    let drive_path = out.join("drive.jsonl");
    std::fs::write(&drive_path, write_drive_stream(&records)?)?;
    let config_path = out.join("config.json");
    std::fs::write(&config_path, config.to_json()?)?;
    Ok(json!({
        "model": model_path.display().to_string(),
        "image": image_path.display().to_string(),
        "drive": drive_path.display().to_string(),
        "config": config_path.display().to_string(),
    }))
}
