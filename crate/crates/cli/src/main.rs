//! `pionix`: simulate, render, train, evaluate and export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use pionix::container::{self, ContainerManifest, Dtype};
use pionix::fluidsim::{run_collision_with_stats, Movie4D, SimParams};
use pionix::metrics::{evaluate_movie, voxelize_psi, FrameFilter, Provenance};
use pionix::neuralfield::{Checkpoint, FieldModel, ModelSampler};
use pionix::pinn::{pde_residual, sample_collocation, CollocationStrategy, PdeContext};
use pionix::trainer::train;
use pionix::xray::{render_projection, Dataset, DetectorSpec};
use pionix::{DomainSpec, Error, MaterialPair, ReferenceScales, RunConfig, ScalarField3, Seeds};

const THREADS_VAR: &str = "PIONIX_THREADS";

#[derive(Parser)]
#[command(name = "pionix", version, about = "4D droplet reconstruction from sparse X-ray projections")]
struct Cli {
    /// Print a machine-readable summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a droplet collision, or derive a sparser movie from one.
    Simulate(SimulateArgs),
    /// Render projections of a movie at fixed views.
    Render(RenderArgs),
    /// Train a field model on a projection dataset.
    Train(TrainArgs),
    /// Score a checkpoint against a ground-truth movie.
    Evaluate(EvaluateArgs),
    /// Voxelize a checkpoint and render its projections.
    Export(ExportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration (JSON); the built-in baseline when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Existing movie to subsample instead of simulating.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Keep at most this many frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Store fields as 32-bit floats.
    #[arg(long)]
    f32: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    movie: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// View angles in degrees; the configured views when omitted.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    angles: Option<Vec<f64>>,
    /// Keep every n-th frame.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Base seed replacing every configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score only frames that were not in the training data.
    #[arg(long)]
    unseen_only: bool,
    /// Also report the PDE residual on random collocation points.
    #[arg(long)]
    pde_diagnostics: bool,
    #[arg(long, default_value_t = 1024)]
    collocation: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cells per axis; the training grid when omitted.
    #[arg(long)]
    grid: Option<usize>,
    /// Times in seconds; the training frame times when omitted.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    /// Render angles in degrees; the training views when omitted.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    angles: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Simulate(_) => "simulate",
        Command::Render(_) => "render",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Export(_) => "export",
    };
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Render(a) => render(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Export(a) => export(a),
    });
    match result {
        Ok(outputs) => {
            if cli.json {
                let s = json!({"command": name, "status": "ok", "exit_code": 0, "outputs": outputs});
                println!("{s}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, key) = match e.downcast_ref::<Error>() {
                Some(Error::Config { key, .. }) => (2u8, Some(key.clone())),
                _ => (3, None),
            };
            if cli.json {
                let s = json!({
                    "command": name,
                    "status": "error",
                    "exit_code": code,
                    "error": {"message": format!("{e:#}"), "key": key},
                });
                println!("{s}");
            }
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => {
            return Err(Error::Config {
                key: THREADS_VAR.into(),
                message: format!("expected a positive integer, got {v:?}"),
            }
            .into())
        }
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn arg_error(key: &str, message: impl Into<String>) -> anyhow::Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
    .into()
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::baseline()),
    }
}

fn simulate(a: &SimulateArgs) -> anyhow::Result<Value> {
    if a.stride == 0 {
        return Err(arg_error("--stride", "must be positive"));
    }
    if a.frames == Some(0) {
        return Err(arg_error("--frames", "must be positive"));
    }
    let dtype = if a.f32 { Dtype::F32Le } else { Dtype::F64Le };
    let mut extra = json!({});
    let mut movie = match &a.from {
        Some(src) => Movie4D::load(src).with_context(|| format!("loading {}", src.display()))?,
        None => {
            let cfg = load_config(a.config.as_deref())?;
            let params = SimParams::from_config(&cfg)?;
            let (movie, stats) = run_collision_with_stats(&params, &cfg.domain)?;
            let max_div = stats.iter().map(|s| s.max_divergence).fold(0.0, f64::max);
            let volume = |f: &pionix::FlowState| f.psi.data().iter().map(|p| 0.5 * (1.0 + p)).sum::<f64>();
            let v0 = volume(&movie.frames[0]);
            let v1 = volume(movie.frames.last().unwrap());
            extra = json!({
                "steps": stats.len(),
                "max_divergence": max_div,
                "volume_drift": (v1 - v0).abs() / v0,
            });
            movie
        }
    };
    movie = movie.subsample(a.stride)?;
    if let Some(n) = a.frames {
        movie = movie.truncate(n)?;
    }
    movie.save(&a.out, dtype)?;
    let times = movie.times();
    let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
    let mut out = json!({
        "out": a.out,
        "frames": movie.len(),
        "frame_indices": movie.frame_indices,
        "frame_dt_s": dt,
        "dims": movie.spec.grid_shape,
    });
    out.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    Ok(out)
}

fn render(a: &RenderArgs) -> anyhow::Result<Value> {
    if a.stride == 0 {
        return Err(arg_error("--stride", "must be positive"));
    }
    let cfg = load_config(a.config.as_deref())?;
    let angles = a.angles.clone().unwrap_or_else(|| cfg.view_angles.clone());
    if angles.is_empty() || angles.iter().any(|x| !x.is_finite()) {
        return Err(arg_error("--angles", "expected finite angles in degrees"));
    }
    let movie = Movie4D::load(&a.movie).with_context(|| format!("loading {}", a.movie.display()))?;
    let movie = movie.subsample(a.stride)?;
    let ds = Dataset::from_movie(&movie, &cfg.materials, &angles, &cfg.detector)?;
    ds.save(&a.out)?;
    Ok(json!({
        "out": a.out,
        "views": ds.view_count(),
        "frames": ds.frame_count(),
        "angles_deg": angles,
        "frame_indices": ds.manifest.frame_indices,
        "photon_energy_ev": ds.detector().photon_energy,
        "pixel_pitch_m": ds.detector().pixel_pitch,
    }))
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<Value> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = Seeds::from_base(s);
    }
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let outcome = train(&cfg, &ds, &a.out, a.resume.as_deref())?;
    let mut v = serde_json::to_value(&outcome.summary)?;
    v["out"] = json!(a.out);
    Ok(v)
}

/// Run metadata a training checkpoint carries.
struct CheckpointMeta {
    domain: DomainSpec,
    scales: ReferenceScales,
    materials: MaterialPair,
    epsilon: f64,
    fd_step: f64,
    detector: DetectorSpec,
    frame_indices: Vec<usize>,
    frame_times: Vec<f64>,
    angles: Vec<f64>,
}

fn read_meta(c: &Checkpoint, path: &Path) -> anyhow::Result<CheckpointMeta> {
    let m = &c.header.meta;
    let field = |k: &str| -> anyhow::Result<Value> {
        match m.get(k) {
            Some(v) if !v.is_null() => Ok(v.clone()),
            _ => bail!("{} lacks `{k}`; only training checkpoints carry run metadata", path.display()),
        }
    };
    Ok(CheckpointMeta {
        domain: serde_json::from_value(field("domain")?)?,
        scales: serde_json::from_value(field("scales")?)?,
        materials: serde_json::from_value(field("materials")?)?,
        epsilon: serde_json::from_value(field("epsilon")?)?,
        fd_step: serde_json::from_value(field("fd_step")?)?,
        detector: serde_json::from_value(field("detector")?)?,
        frame_indices: serde_json::from_value(field("train_frame_indices")?)?,
        frame_times: serde_json::from_value(field("train_frame_times")?)?,
        angles: serde_json::from_value(field("angles_deg")?)?,
    })
}

fn load_model(path: &Path) -> anyhow::Result<(FieldModel, CheckpointMeta)> {
    let c = Checkpoint::load(path)?;
    let model = FieldModel::from_checkpoint(&c)?;
    let meta = read_meta(&c, path)?;
    Ok((model, meta))
}

fn evaluate(a: &EvaluateArgs) -> anyhow::Result<Value> {
    let (model, meta) = load_model(&a.ckpt)?;
    let truth = Movie4D::load(&a.truth).with_context(|| format!("loading {}", a.truth.display()))?;
    let (d, s) = (&meta.domain, &*truth.spec);
    if d.extent != s.extent || d.time_span != s.time_span {
        bail!("ground truth domain differs from the checkpoint's training domain");
    }
    let filter = if a.unseen_only {
        let unseen: Vec<usize> = truth
            .frame_indices
            .iter()
            .copied()
            .filter(|i| !meta.frame_indices.contains(i))
            .collect();
        FrameFilter::Only(unseen)
    } else {
        FrameFilter::All
    };
    let prov = Provenance {
        dataset: Some(a.truth.display().to_string()),
        checkpoint: Some(a.ckpt.display().to_string()),
    };
    let report = evaluate_movie(&model, &truth, &filter, Some(&meta.frame_indices), prov)?;
    report.save(&a.out)?;
    let mut out = json!({
        "out": a.out,
        "frames": report.frames.len(),
        "mse_mean": report.mse.mean,
        "mse_std": report.mse.std,
        "dssim_mean": report.dssim.mean,
        "resolution_mean": report.resolution.mean,
        "mse_4d": report.mse_4d,
        "dssim_4d": report.dssim_4d,
        "mse_seen": nullable(report.mean_mse_where(true)),
        "mse_unseen": nullable(report.mean_mse_where(false)),
    });
    if a.pde_diagnostics {
        if a.collocation == 0 {
            return Err(arg_error("--collocation", "must be positive"));
        }
        let ctx = PdeContext::new(&meta.domain, &meta.materials, &meta.scales, meta.epsilon, meta.fd_step);
        let batch = sample_collocation(a.collocation, a.seed, CollocationStrategy::Uniform, None)?;
        let r = pde_residual(&model, &batch, &ctx)?;
        let diag = json!({
            "points": a.collocation,
            "seed": a.seed,
            "loss": r.loss,
            "momentum_loss": r.momentum_loss,
            "divergence_loss": r.divergence_loss,
        });
        container::write_json(&a.out.join("pde_diagnostics.json"), &diag)?;
        out["pde"] = diag;
    }
    Ok(out)
}

fn nullable(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn export(a: &ExportArgs) -> anyhow::Result<Value> {
    let (model, meta) = load_model(&a.ckpt)?;
    let mut spec = meta.domain.clone();
    if let Some(n) = a.grid {
        if n < 2 {
            return Err(arg_error("--grid", "need at least 2 cells per axis"));
        }
        spec.grid_shape = [n; 3];
    }
    let times = a.times.clone().unwrap_or_else(|| meta.frame_times.clone());
    let [t0, t1] = spec.time_span;
    if times.is_empty() {
        return Err(arg_error("--times", "no times requested"));
    }
    if let Some(t) = times.iter().find(|t| !(**t >= t0 && **t <= t1)) {
        return Err(arg_error("--times", format!("{t} s lies outside the trained span [{t0}, {t1}] s")));
    }
    let angles = a.angles.clone().unwrap_or_else(|| meta.angles.clone());
    if angles.iter().any(|x| !x.is_finite()) {
        return Err(arg_error("--angles", "expected finite angles in degrees"));
    }
    let volumes = times
        .iter()
        .map(|&t| voxelize_psi(&model, &spec, t))
        .collect::<pionix::Result<Vec<ScalarField3>>>()?;
    let vol_dir = a.out.join("volume");
    let manifest = ContainerManifest {
        format: container::FORMAT_TAG.into(),
        dims: spec.grid_shape,
        extents: spec.extent,
        time_span: spec.time_span,
        domain_frame_count: spec.frame_count,
        dtype: Dtype::F32Le,
        fields: vec!["psi".into()],
        frame_times: times.clone(),
        frame_indices: (0..times.len()).collect(),
    };
    let frames: Vec<Vec<&ScalarField3>> = volumes.iter().map(|v| vec![v]).collect();
    container::write_container(&vol_dir, &manifest, &frames)?;

    let proj_dir = a.out.join("projections");
    std::fs::create_dir_all(&proj_dir).with_context(|| proj_dir.display().to_string())?;
    let sampler = ModelSampler::new(&model, &meta.domain);
    let mut renders = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        for (v, &angle) in angles.iter().enumerate() {
            let img = render_projection(&sampler, angle, t, &meta.detector)?;
            let name = format!("render_{v}_{k:04}.bin");
            container::write_raw(&proj_dir.join(&name), &img.transmission, Dtype::F32Le)?;
            renders.push(json!({"file": name, "angle_deg": angle, "t": t}));
        }
    }
    let index = json!({
        "width": meta.detector.width,
        "height": meta.detector.height,
        "dtype": Dtype::F32Le,
        "renders": renders,
    });
    container::write_json(&proj_dir.join("renders.json"), &index)?;
    Ok(json!({
        "out": a.out,
        "dims": spec.grid_shape,
        "times": times,
        "angles_deg": angles,
        "volumes": volumes.len(),
        "renders": times.len() * angles.len(),
    }))
}
