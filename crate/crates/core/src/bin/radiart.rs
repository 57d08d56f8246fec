use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use radiart::config::{Providers, Purpose, RunConfig};
use radiart::field::{init_params_with_density_bias, load_checkpoint, save_checkpoint, FieldArch, FieldParams, Role};
use radiart::geometry::{
    load_dataset, orbit_camera, orbit_cameras, synthetic_dataset, write_dataset, Camera, Intrinsics,
    MultiViewDataset, SyntheticScene,
};
use radiart::image_io::{write_pfm, write_png};
use radiart::meshing::{bake_density_grid, export_obj, marching_cubes, Aabb, DEFAULT_ISO};
use radiart::renderer::{render_view, MlpField, RenderConfig, SamplingStrategy};
use radiart::trainer::{evaluate_psnr, stylize, train_reconstruction};
use radiart::{Error, Result};

#[derive(Parser)]
#[command(name = "radiart", version, about = "Text-guided radiance field stylization")]
struct Cli {
    /// Fixed seeds, zeroed clocks; same as RADIART_DETERMINISTIC=1.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a radiance field to a posed image set.
    Reconstruct(RunArgs),
    /// Restyle a reconstructed field toward the configured text prompt.
    Stylize {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint written by `reconstruct`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render one view of a checkpoint to PNG and PFM.
    Render(RenderArgs),
    /// Extract a density iso-surface as an OBJ mesh.
    Mesh(MeshArgs),
    /// Write a synthetic sphere dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override one setting, e.g. `--set stage1.lr=0.001`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output path without extension; `.png` and `.pfm` are appended.
    #[arg(long)]
    out: PathBuf,
    /// Render the camera of this dataset frame.
    #[arg(long, requires = "dataset", allow_negative_numbers = true)]
    pose: Option<i64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Orbit camera azimuth in radians, used without `--pose`.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    azimuth: f64,
    #[arg(long, default_value_t = 0.35, allow_negative_numbers = true)]
    elevation: f64,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Image side in pixels for orbit cameras.
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Half-width of the cube centered at the origin.
    #[arg(long, default_value_t = 1.5)]
    bbox: f64,
    #[arg(long, default_value_t = 128)]
    res: usize,
    #[arg(long, default_value_t = DEFAULT_ISO)]
    iso: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 0.35, allow_negative_numbers = true)]
    elevation: f64,
}

const ORBIT_NEAR: f64 = 2.6;
const ORBIT_FAR: f64 = 5.4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("radiart: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Reconstruct(args) => reconstruct(&args, cli.deterministic),
        Command::Stylize { run, checkpoint } => stylize_cmd(&run, &checkpoint, cli.deterministic),
        Command::Render(args) => render_cmd(&args),
        Command::Mesh(args) => mesh_cmd(&args),
        Command::Synth(args) => synth_cmd(&args),
    }
}

fn load_config(args: &RunArgs, purpose: Purpose) -> Result<RunConfig> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    cfg.validate(purpose)?;
    Ok(cfg)
}

fn dataset_path(cfg: &RunConfig) -> &Path {
    cfg.dataset.path.as_deref().expect("validated config has a dataset path")
}

/// Splits frames into (train, held-out) by index.
fn split(ds: MultiViewDataset, holdout: &[usize]) -> Result<(MultiViewDataset, Option<MultiViewDataset>)> {
    if let Some(i) = holdout.iter().find(|&&i| i >= ds.frames.len()) {
        return Err(Error::Validation(format!(
            "holdout index {i} out of range for {} frames",
            ds.frames.len()
        )));
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, f) in ds.frames.iter().enumerate() {
        if holdout.contains(&i) {
            held.push(f.clone());
        } else {
            train.push(f.clone());
        }
    }
    if train.is_empty() {
        return Err(Error::Validation("every frame is held out".into()));
    }
    let with = |frames| MultiViewDataset { frames, ..ds.clone() };
    let held = (!held.is_empty()).then(|| with(held));
    Ok((with(train), held))
}

fn prepare_output(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

fn image_config(render: &RenderConfig, near: f64, far: f64) -> RenderConfig {
    RenderConfig {
        strategy: SamplingStrategy::Uniform,
        near,
        far,
        ..*render
    }
}

fn reconstruct(args: &RunArgs, flag: bool) -> Result<()> {
    let cfg = load_config(args, Purpose::Reconstruct)?;
    let deterministic = cfg.deterministic(flag);
    let ds = load_dataset(dataset_path(&cfg))?;
    let (train, held) = split(ds, &cfg.dataset.holdout)?;
    let out = prepare_output(&cfg)?;
    log::info!(
        "reconstructing from {} frames ({} held out)",
        train.frames.len(),
        held.as_ref().map_or(0, |h| h.frames.len())
    );
    let init = init_params_with_density_bias(&cfg.arch, cfg.seeds.init, cfg.stage1.init_density_bias);
    let (params, report) = train_reconstruction(
        &train,
        held.as_ref(),
        &cfg.arch,
        &cfg.render,
        &cfg.stage1,
        init,
        cfg.seeds.stage1,
        deterministic,
    )?;
    save_checkpoint(&out.join("field_rec.json"), &cfg.arch, &params)?;
    report.write_json_lines(&out.join("report_stage1.jsonl"))?;
    let eval_set = held.as_ref().unwrap_or(&train);
    let render = image_config(&cfg.render, eval_set.near, eval_set.far);
    let field = MlpField {
        params: &params,
        arch: &cfg.arch,
    };
    for (i, f) in eval_set.frames.iter().enumerate() {
        write_png(&out.join(format!("heldout_{i}.png")), &render_view(&field, &f.camera, &render)?)?;
    }
    if let Some(h) = &held {
        log::info!("held-out PSNR {:.2} dB", evaluate_psnr(&params, &cfg.arch, h, &render)?);
    }
    Ok(())
}

fn load_role(path: &Path, want: Role) -> Result<(FieldArch, FieldParams)> {
    let (arch, params) = load_checkpoint(path)?;
    if params.role != want {
        return Err(Error::Validation(format!(
            "{} is tagged {:?}, expected {:?}",
            path.display(),
            params.role,
            want
        )));
    }
    Ok((arch, params))
}

/// Three spread-out frames used for before/after comparisons.
fn comparison_poses(n: usize) -> Vec<usize> {
    let mut poses: Vec<usize> = (0..3).map(|i| i * n / 3).collect();
    poses.dedup();
    poses
}

fn stylize_cmd(args: &RunArgs, checkpoint: &Path, flag: bool) -> Result<()> {
    let cfg = load_config(args, Purpose::Stylize)?;
    let deterministic = cfg.deterministic(flag);
    let (arch, f_rec) = load_role(checkpoint, Role::Reconstructed)?;
    if arch != cfg.arch {
        log::warn!("using the checkpoint's architecture instead of the configured one");
    }
    let task = cfg.task.to_task()?;
    let ds = load_dataset(dataset_path(&cfg))?;
    let providers = Providers::connect(&cfg.provider)?;
    let out = prepare_output(&cfg)?;
    let render = RenderConfig {
        near: ds.near,
        far: ds.far,
        ..cfg.render
    };
    let cameras = ds.cameras();
    let (f_sty, report) = stylize(
        &f_rec,
        &arch,
        &cameras,
        &render,
        &task,
        providers.provider(),
        providers.extractor(),
        &cfg.stage2,
        cfg.seeds.stage2,
        deterministic,
    )?;
    save_checkpoint(&out.join("field_sty.json"), &arch, &f_sty)?;
    report.write_json_lines(&out.join("report_stage2.jsonl"))?;
    let image = image_config(&render, ds.near, ds.far);
    for i in comparison_poses(cameras.len()) {
        for (tag, params) in [("before", &f_rec), ("after", &f_sty)] {
            let field = MlpField { params, arch: &arch };
            write_png(&out.join(format!("{tag}_{i}.png")), &render_view(&field, &cameras[i], &image)?)?;
        }
    }
    if let (Some(first), Some(last)) = (report.epoch_cos_target.first(), report.epoch_cos_target.last()) {
        log::info!("cosine to target: {first:.4} -> {last:.4}");
    }
    Ok(())
}

fn orbit_intrinsics(res: usize) -> Intrinsics {
    let f = res as f64 * 1.1;
    Intrinsics {
        fx: f,
        fy: f,
        cx: res as f64 / 2.0,
        cy: res as f64 / 2.0,
        width: res,
        height: res,
    }
}

fn render_cmd(args: &RenderArgs) -> Result<()> {
    let (arch, params) = load_checkpoint(&args.checkpoint)?;
    let (camera, near, far): (Camera, f64, f64) = match (args.pose, &args.dataset) {
        (Some(pose), Some(dir)) => {
            let ds = load_dataset(dir)?;
            let idx = usize::try_from(pose)
                .ok()
                .filter(|&i| i < ds.frames.len())
                .ok_or_else(|| {
                    Error::Validation(format!("pose {pose} out of range for {} frames", ds.frames.len()))
                })?;
            (ds.frames[idx].camera, ds.near, ds.far)
        }
        _ => {
            if args.res == 0 {
                return Err(Error::Validation("--res must be positive".into()));
            }
            let cam = orbit_camera(args.azimuth, args.elevation, args.radius, orbit_intrinsics(args.res))?;
            (cam, ORBIT_NEAR, ORBIT_FAR)
        }
    };
    let render = RenderConfig {
        samples: args.samples,
        strategy: SamplingStrategy::Uniform,
        near: args.near.unwrap_or(near),
        far: args.far.unwrap_or(far),
        ..RenderConfig::default()
    };
    render.validate()?;
    let image = render_view(&MlpField { params: &params, arch: &arch }, &camera, &render)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_png(&args.out.with_extension("png"), &image)?;
    write_pfm(&args.out.with_extension("pfm"), &image)?;
    Ok(())
}

fn mesh_cmd(args: &MeshArgs) -> Result<()> {
    let (arch, params) = load_checkpoint(&args.checkpoint)?;
    let grid = bake_density_grid(&params, &arch, Aabb::cube(args.bbox), [args.res; 3])?;
    let mesh = marching_cubes(&grid, args.iso)?;
    if mesh.triangles.is_empty() {
        log::warn!("no surface at iso level {}; writing an empty mesh", args.iso);
    }
    export_obj(&mesh, &args.out)?;
    log::info!(
        "{} vertices, {} triangles",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    if args.res == 0 {
        return Err(Error::Validation("--res must be positive".into()));
    }
    let cams = orbit_cameras(args.views, 4.0, args.elevation, args.res, args.res, args.res as f64 * 1.1)?;
    let ds = synthetic_dataset(&SyntheticScene::default_sphere(), &cams, ORBIT_NEAR, ORBIT_FAR, 0.002)?;
    write_dataset(&args.out, &ds)?;
    Ok(())
}
