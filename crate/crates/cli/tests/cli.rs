use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use pionix::neuralfield::Architecture;
use pionix::xray::DetectorSpec;
use pionix::{DomainSpec, RunConfig};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pionix"));
    c.env_remove("PIONIX_THREADS");
    c
}

fn schema() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/summary.schema.json");
        let s: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        jsonschema::validator_for(&s).unwrap()
    })
}

/// Runs with `--json`, checks the summary against the schema and returns it.
fn run(args: &[&str]) -> (Output, Value) {
    let out = bin().arg("--json").args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let v: Value = serde_json::from_str(stdout.trim()).unwrap_or_else(|e| {
        panic!("no JSON summary ({e}); stdout {stdout:?}, stderr {}", String::from_utf8_lossy(&out.stderr))
    });
    let errors: Vec<String> = schema().iter_errors(&v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "summary violates the schema: {errors:?}\n{v}");
    (out, v)
}

fn ok(args: &[&str]) -> Value {
    let (out, v) = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    v["outputs"].clone()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Published frame timing on a coarse grid, so simulation stays quick.
fn small_config() -> RunConfig {
    let mut cfg = RunConfig::baseline();
    cfg.domain = DomainSpec {
        grid_shape: [16; 3],
        ..cfg.domain
    };
    cfg.detector = DetectorSpec {
        samples_per_ray: 48,
        ..DetectorSpec::default()
    };
    let t = &mut cfg.training;
    t.model = Architecture {
        width: 8,
        blocks: 1,
        fourier_x: 2,
        fourier_t: 1,
    };
    t.epochs = 50;
    t.rays_per_step = 32;
    t.collocation_points = 8;
    t.patches_per_step = 1;
    t.patch_size = 8;
    t.samples_per_ray = 32;
    t.critic_channels = vec![4];
    t.checkpoint_every = 20;
    t.learning_rate = 1e-3;
    cfg
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    movie: PathBuf,
    sparse: PathBuf,
    dataset: PathBuf,
    run: PathBuf,
    train_seconds: f64,
}

impl Fixture {
    fn ckpt(&self) -> PathBuf {
        self.run.join("ckpt_000050.bin")
    }
}

/// Simulate, derive, render and train once for all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.json");
        std::fs::write(&config, small_config().to_json_pretty()).unwrap();
        let movie = root.join("movie");
        ok(&["simulate", "--config", s(&config), "--out", s(&movie)]);
        let sparse = root.join("sparse");
        ok(&["simulate", "--from", s(&movie), "--stride", "5", "--frames", "15", "--out", s(&sparse)]);
        let dataset = root.join("dataset");
        ok(&["render", "--config", s(&config), "--movie", s(&sparse), "--out", s(&dataset)]);
        let run = root.join("run");
        let t0 = Instant::now();
        ok(&["train", "--config", s(&config), "--dataset", s(&dataset), "--out", s(&run)]);
        Fixture {
            train_seconds: t0.elapsed().as_secs_f64(),
            _dir: dir,
            root,
            config,
            movie,
            sparse,
            dataset,
            run,
        }
    })
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_records_the_published_frame_timing() {
    let f = fixture();
    let m = manifest(&f.movie);
    let times = m["frame_times"].as_array().unwrap();
    assert_eq!(times.len(), 75);
    let dt = times[1].as_f64().unwrap() - times[0].as_f64().unwrap();
    assert!((dt - 0.075e-6).abs() < 1e-15, "{dt}");
}

#[test]
fn simulate_derives_a_strided_movie() {
    let f = fixture();
    let m = manifest(&f.sparse);
    let idx: Vec<u64> = m["frame_indices"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(idx, (0..15).map(|i| 5 * i).collect::<Vec<u64>>());
}

#[test]
fn invalid_config_exits_2_naming_the_key() {
    let f = fixture();
    let mut raw: Value = serde_json::from_str(&std::fs::read_to_string(&f.config).unwrap()).unwrap();
    raw["materials"]["Re"] = Value::from(-1.0);
    let bad = f.root.join("bad.json");
    std::fs::write(&bad, raw.to_string()).unwrap();
    let (out, v) = run(&["simulate", "--config", s(&bad), "--out", s(&f.root.join("never"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(v["error"]["key"], "materials.Re");
    assert!(String::from_utf8_lossy(&out.stderr).contains("materials.Re"));
    assert!(!f.root.join("never").exists());
}

#[test]
fn runtime_failures_exit_3() {
    let f = fixture();
    let (out, v) = run(&["render", "--movie", s(&f.root.join("missing")), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(v["status"], "error");
}

#[test]
fn thread_cap_must_be_a_positive_integer() {
    let f = fixture();
    let out = bin()
        .env("PIONIX_THREADS", "zero")
        .args(["render", "--movie", s(&f.sparse), "--out", s(&f.root.join("t"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .env("PIONIX_THREADS", "1")
        .args(["render", "--config", s(&f.config), "--movie", s(&f.sparse), "--out", s(&f.root.join("t1"))])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(f.root.join("t1/proj_1_0007.bin")).unwrap(),
        std::fs::read(f.dataset.join("proj_1_0007.bin")).unwrap()
    );
}

#[test]
fn render_writes_one_image_per_view_and_frame() {
    let f = fixture();
    let names: Vec<String> = std::fs::read_dir(&f.dataset)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for v in 0..2 {
        assert_eq!(names.iter().filter(|n| n.starts_with(&format!("proj_{v}_"))).count(), 15);
    }
    let m = manifest(&f.dataset);
    assert_eq!(m["angles_deg"], serde_json::json!([0.0, 23.8]));
    assert_eq!(m["detector"]["photon_energy"].as_f64(), Some(10_000.0));
    assert_eq!(m["detector"]["pixel_pitch"].as_f64(), Some(4e-6));
}

#[test]
fn render_with_one_angle_gives_a_single_view() {
    let f = fixture();
    let out = f.root.join("single");
    let v = ok(&["render", "--config", s(&f.config), "--movie", s(&f.sparse), "--out", s(&out), "--angles", "0"]);
    assert_eq!(v["views"], 1);
    assert!(!out.join("proj_1_0000.bin").exists());
}

#[test]
fn render_is_idempotent() {
    let f = fixture();
    let out = f.root.join("again");
    ok(&["render", "--config", s(&f.config), "--movie", s(&f.sparse), "--out", s(&out)]);
    for name in ["manifest.json", "proj_0_0000.bin", "proj_1_0014.bin"] {
        assert_eq!(std::fs::read(out.join(name)).unwrap(), std::fs::read(f.dataset.join(name)).unwrap());
    }
}

#[test]
fn smoke_training_finishes_quickly_and_logs_every_epoch() {
    let f = fixture();
    assert!(f.train_seconds < 300.0, "{}", f.train_seconds);
    let log = std::fs::read_to_string(f.run.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 50);
    assert!(f.run.join("ckpt_000020.bin").exists());
    assert!(f.ckpt().exists());
}

fn log_without_times(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn resume_continues_the_same_run() {
    let f = fixture();
    let out = f.root.join("resumed");
    std::fs::create_dir_all(&out).unwrap();
    let from = out.join("start.bin");
    std::fs::copy(f.run.join("ckpt_000020.bin"), &from).unwrap();
    let full: Vec<Value> = log_without_times(&f.run);
    let head: String = std::fs::read_to_string(f.run.join("train.jsonl"))
        .unwrap()
        .lines()
        .take(20)
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(out.join("train.jsonl"), head).unwrap();
    let v = ok(&["train", "--config", s(&f.config), "--dataset", s(&f.dataset), "--out", s(&out), "--resume", s(&from)]);
    assert_eq!(v["epochs"], 50);
    assert_eq!(log_without_times(&out), full);
    assert_eq!(std::fs::read(out.join("ckpt_000050.bin")).unwrap(), std::fs::read(f.ckpt()).unwrap());
}

#[test]
fn seed_flag_overrides_the_config() {
    let f = fixture();
    let a = f.root.join("seed_a");
    let b = f.root.join("seed_b");
    let args = |o: &Path| {
        vec![
            "train".to_string(),
            "--config".into(),
            s(&f.config).into(),
            "--dataset".into(),
            s(&f.dataset).into(),
            "--out".into(),
            s(o).into(),
            "--epochs".into(),
            "3".into(),
        ]
    };
    let mut with_seed = args(&a);
    with_seed.extend(["--seed".into(), "99".into()]);
    ok(&with_seed.iter().map(String::as_str).collect::<Vec<_>>());
    ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_ne!(
        std::fs::read(a.join("ckpt_000003.bin")).unwrap(),
        std::fs::read(b.join("ckpt_000003.bin")).unwrap()
    );
}

#[test]
fn evaluate_scores_all_or_only_unseen_frames() {
    let f = fixture();
    let all = f.root.join("eval_all");
    let v = ok(&["evaluate", "--ckpt", s(&f.ckpt()), "--truth", s(&f.movie), "--out", s(&all), "--pde-diagnostics", "--collocation", "64"]);
    assert_eq!(v["frames"], 75);
    assert!(v["mse_seen"].is_number() && v["mse_unseen"].is_number());
    assert!(v["pde"]["loss"].as_f64().unwrap().is_finite());
    assert!(all.join("report.json").exists() && all.join("pde_diagnostics.json").exists());
    let csv = std::fs::read_to_string(all.join("per_frame.csv")).unwrap();
    assert_eq!(csv.lines().count(), 76);

    let unseen = f.root.join("eval_unseen");
    let v = ok(&["evaluate", "--ckpt", s(&f.ckpt()), "--truth", s(&f.movie), "--out", s(&unseen), "--unseen-only"]);
    assert_eq!(v["frames"], 60);
    assert!(v["mse_seen"].is_null());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(unseen.join("report.json")).unwrap()).unwrap();
    for fr in report["frames"].as_array().unwrap() {
        assert_ne!(fr["frame"].as_u64().unwrap() % 5, 0);
    }
}

#[test]
fn export_at_seen_and_unseen_times() {
    let f = fixture();
    let m = manifest(&f.dataset);
    let t_seen = m["frame_times"][3].as_f64().unwrap();
    let t_between = 0.5 * (t_seen + m["frame_times"][4].as_f64().unwrap());
    let out = f.root.join("export");
    let times = format!("{t_seen:e},{t_between:e}");
    let v = ok(&["export", "--ckpt", s(&f.ckpt()), "--out", s(&out), "--times", &times, "--grid", "8"]);
    assert_eq!(v["volumes"], 2);
    assert_eq!(v["renders"], 4);
    let vm = manifest(&out.join("volume"));
    assert_eq!(vm["dims"], serde_json::json!([8, 8, 8]));
    let bytes = std::fs::read(out.join("volume/psi_0001.bin")).unwrap();
    assert_eq!(bytes.len(), 8 * 8 * 8 * 4);
    assert!(out.join("projections/render_1_0001.bin").exists());

    let (o, v) = run(&["export", "--ckpt", s(&f.ckpt()), "--out", s(&f.root.join("late")), "--times", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(v["error"]["key"], "--times");
}
