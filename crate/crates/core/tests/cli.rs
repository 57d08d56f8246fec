use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn radiart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radiart"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("RADIART_DETERMINISTIC")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let out = radiart(&["synth", "--out", s(&ws.dataset()), "--views", "4", "--res", "12"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn dataset(&self) -> PathBuf {
        self.path("data")
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn config(&self) -> PathBuf {
        let cfg = serde_json::json!({
            "dataset": {"path": self.dataset(), "holdout": [3]},
            "arch": {"pe_levels_pos": 2, "pe_levels_dir": 1, "hidden_width": 16, "depth": 2},
            "render": {"samples": 12},
            "stage1": {"epochs": 1, "lr": 0.005, "rays_per_batch": 64, "max_steps": 4},
            "stage2": {"epochs": 1, "max_steps": 2, "tile": 8},
            "task": {"target": "a zombie", "patch_fraction": 0.4, "patches_per_view": 2, "negatives_per_step": 4},
            "output_dir": self.out(),
        });
        let path = self.path("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }

    fn reconstruct(&self) -> PathBuf {
        let out = radiart(&["--deterministic", "reconstruct", "--config", s(&self.config())]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        self.out().join("field_rec.json")
    }
}

#[test]
fn reconstruct_writes_checkpoint_report_and_renders() {
    let ws = Workspace::new();
    let ck = ws.reconstruct();
    assert!(ck.is_file());
    let report = std::fs::read_to_string(ws.out().join("report_stage1.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 4);
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["wall_seconds"], 0.0);
    }
    assert!(ws.out().join("heldout_0.png").is_file());
}

#[test]
fn reconstruct_without_dataset_is_a_validation_error() {
    let ws = Workspace::new();
    let out = radiart(&["reconstruct", "--config", s(&ws.config()), "--set", "dataset.path=/nonexistent/radiart"]);
    assert_eq!(code(&out), 2);
    let out = radiart(&["reconstruct", "--config", s(&ws.path("missing.json"))]);
    assert_eq!(code(&out), 2);
    let out = radiart(&["reconstruct", "--config", s(&ws.config()), "--set", "render.samples=1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn reconstruct_with_runaway_learning_rate_diverges() {
    let ws = Workspace::new();
    let out = radiart(&["reconstruct", "--config", s(&ws.config()), "--set", "stage1.lr=1e300"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stylize_round_trip_and_tag_check() {
    let ws = Workspace::new();
    let ck = ws.reconstruct();
    let cfg = ws.config();
    let out = radiart(&["--deterministic", "stylize", "--config", s(&cfg), "--checkpoint", s(&ck)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sty = ws.out().join("field_sty.json");
    assert!(sty.is_file());
    let report = std::fs::read_to_string(ws.out().join("report_stage2.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 2);
    for i in [0, 1, 2] {
        assert!(ws.out().join(format!("before_{i}.png")).is_file());
        assert!(ws.out().join(format!("after_{i}.png")).is_file());
    }

    let out = radiart(&["stylize", "--config", s(&cfg), "--checkpoint", s(&sty)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn stylize_with_unreachable_bridge_exits_4() {
    let ws = Workspace::new();
    let ck = ws.reconstruct();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let out = radiart(&[
        "stylize",
        "--config",
        s(&ws.config()),
        "--checkpoint",
        s(&ck),
        "--set",
        &format!("provider.name=bridge:tcp:127.0.0.1:{port}"),
        "--set",
        "provider.timeout_secs=2",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn render_is_deterministic_and_checks_pose() {
    let ws = Workspace::new();
    let ck = ws.reconstruct();
    let data = ws.dataset();
    let render = |name: &str| {
        radiart(&[
            "render",
            "--checkpoint",
            s(&ck),
            "--dataset",
            s(&data),
            "--pose",
            "1",
            "--out",
            s(&ws.path(name)),
        ])
    };
    assert_eq!(code(&render("a")), 0);
    assert_eq!(code(&render("b")), 0);
    let a = std::fs::read(ws.path("a.pfm")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b.pfm")).unwrap());
    assert!(ws.path("a.png").is_file());

    let bad = radiart(&["render", "--checkpoint", s(&ck), "--dataset", s(&data), "--pose", "-1", "--out", s(&ws.path("c"))]);
    assert_eq!(code(&bad), 2);
    let bad = radiart(&["render", "--checkpoint", s(&ck), "--dataset", s(&data), "--pose", "4", "--out", s(&ws.path("c"))]);
    assert_eq!(code(&bad), 2);

    let orbit = radiart(&["render", "--checkpoint", s(&ck), "--res", "8", "--samples", "8", "--out", s(&ws.path("o"))]);
    assert_eq!(code(&orbit), 0);
}

#[test]
fn mesh_exit_codes() {
    let ws = Workspace::new();
    let ck = ws.reconstruct();
    let mesh = |res: &str, iso: &str, out: &Path| {
        radiart(&["mesh", "--checkpoint", s(&ck), "--res", res, "--iso", iso, "--out", s(out)])
    };
    assert_eq!(code(&mesh("1", "0.7", &ws.path("m.obj"))), 2);
    let out = mesh("8", "1e9", &ws.path("empty.obj"));
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no surface"));
    let text = std::fs::read_to_string(ws.path("empty.obj")).unwrap();
    assert!(!text.lines().any(|l| l.starts_with("v ") || l.starts_with("f ")));
    assert_eq!(code(&mesh("8", "0.7", &ws.path("no/such/dir/m.obj"))), 5);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let ws = Workspace::new();
    let out = radiart(&["mesh", "--checkpoint", s(&ws.path("nope.json")), "--out", s(&ws.path("m.obj"))]);
    assert_eq!(code(&out), 5);
}
