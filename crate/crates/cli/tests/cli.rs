use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use splat_interior::cutplane::{CutMode, CutPlane};
use splat_interior::imaging::{ColorImage, ScalarImage};
use splat_interior::provider::{
    ExternalProvider, ReferenceProvider, ReferenceRequest, RequestKind,
};
use splat_interior::splat::Vec3;

const BIN: &str = env!("CARGO_BIN_EXE_splat-interior");
const ECHO: &str = env!("CARGO_BIN_EXE_echo-sidecar");

fn cli(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("SPLAT_INTERIOR_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr is empty");
    serde_json::from_str::<Value>(last).unwrap()["error"].clone()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    sphere: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let sphere = root.join("sphere.ply");
    ok(&[
        "make-fixture",
        "-o",
        s(&sphere),
        "--count",
        "3000",
        "--tangential-scale",
        "0.06",
        "--normal-scale",
        "0.03",
    ]);
    Fixture {
        _dir: dir,
        root,
        sphere,
    }
}

fn write_config(f: &Fixture, name: &str, output: &str, provider: &str) -> PathBuf {
    let text = format!(
        r#"
input_ply = "{}"
output = "{}"
provider = "{provider}"

[seeds]
fill = 1
train = 2
eval = 3

[fill]
grid_resolution = 16
particles_per_voxel = 2

[schedule]
radial = 2
horizontal = 2

[render]
width = 32
height = 32

[train]
iterations_max = 3
surface_pool_size = 4
surface_views_per_iter = 2
checkpoint_interval = 2

[smooth]
grid_resolution = 8
neighbor_fallback = true

[eval]
consistency_views = 4
surface_views = 2
"#,
        s(&f.sphere),
        s(&f.root.join(output)),
    );
    let path = f.root.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn slice_needs_no_provider() {
    let f = fixture();
    let png = f.root.join("cut.png");
    let depth = f.root.join("cut-depth.png");
    let out = ok(&[
        "slice",
        "-i",
        s(&f.sphere),
        "-o",
        s(&png),
        "--plane",
        "0.2,0.4,1,-0.1",
        "--mode",
        "half",
        "--width",
        "48",
        "--height",
        "40",
        "--depth",
        s(&depth),
    ]);
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert!(summary["foreground_pixels"].as_u64().unwrap() > 0);
    let img = ColorImage::load_png(&png).unwrap();
    assert_eq!((img.width, img.height), (48, 40));
    assert!(depth.exists());
}

#[test]
fn bad_plane_and_missing_input_are_json_errors() {
    let f = fixture();
    let png = f.root.join("x.png");
    let e = error_of(&cli(&[
        "slice",
        "-i",
        s(&f.sphere),
        "-o",
        s(&png),
        "--plane",
        "0,0,0,1",
    ]));
    assert_eq!(e["kind"], "plane");
    let e = error_of(&cli(&[
        "slice",
        "-i",
        s(&f.sphere),
        "-o",
        s(&png),
        "--plane",
        "1,2",
    ]));
    assert_eq!(e["kind"], "config");
    let e = error_of(&cli(&[
        "slice",
        "-i",
        "/nonexistent.ply",
        "-o",
        s(&png),
        "--plane",
        "0,0,1,0",
    ]));
    assert_eq!(e["kind"], "model");
    assert!(!png.exists());
}

#[test]
fn stages_need_a_config_with_seeds() {
    let f = fixture();
    let e = error_of(&cli(&["fill", "-i", s(&f.sphere), "-o", "/tmp/never.ply"]));
    assert_eq!(e["kind"], "config");
    let cfg = write_config(&f, "c.toml", "out", "procedural:watermelon");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("train = 2\n", "");
    std::fs::write(&cfg, text).unwrap();
    let e = error_of(&cli(&["--config", s(&cfg), "fill"]));
    assert_eq!(e["kind"], "config");
}

#[test]
fn second_fill_appends_nothing() {
    let f = fixture();
    let cfg = write_config(&f, "c.toml", "out", "procedural:watermelon");
    let once = f.root.join("once.ply");
    let twice = f.root.join("twice.ply");
    let a: Value = serde_json::from_str(&ok(&[
        "-c",
        s(&cfg),
        "fill",
        "-i",
        s(&f.sphere),
        "-o",
        s(&once),
    ]))
    .unwrap();
    assert!(a["appended"].as_u64().unwrap() > 0);
    let b: Value = serde_json::from_str(&ok(&[
        "-c",
        s(&cfg),
        "fill",
        "-i",
        s(&once),
        "-o",
        s(&twice),
    ]))
    .unwrap();
    assert_eq!(b["appended"], 0);
    assert!(
        std::fs::read(&once).unwrap() == std::fs::read(&twice).unwrap(),
        "refill changed the model"
    );
}

#[test]
fn pipeline_equals_the_stages_in_sequence() {
    let f = fixture();
    let whole = write_config(&f, "whole.toml", "whole", "procedural:watermelon");
    let staged = write_config(&f, "staged.toml", "staged", "procedural:watermelon");
    ok(&["-c", s(&whole), "pipeline"]);
    ok(&["-c", s(&staged), "fill"]);
    ok(&["-c", s(&staged), "train"]);
    ok(&["-c", s(&staged), "smooth"]);
    ok(&[
        "-c",
        s(&staged),
        "eval",
        "--reference",
        s(&f.root.join("staged/filled.ply")),
    ]);
    for name in [
        "filled.ply",
        "trained.ply",
        "final.ply",
        "filled.meta.json",
        "final.meta.json",
    ] {
        let a = std::fs::read(f.root.join("whole").join(name)).unwrap();
        let b = std::fs::read(f.root.join("staged").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    let ea: Value =
        serde_json::from_slice(&std::fs::read(f.root.join("whole/eval.json")).unwrap()).unwrap();
    let mut eb: Value =
        serde_json::from_slice(&std::fs::read(f.root.join("staged/eval.json")).unwrap()).unwrap();
    let mut ea = ea;
    for e in [&mut ea, &mut eb] {
        e["consistency"]["runtime_ms"] = Value::Null;
    }
    assert_eq!(ea, eb);
    assert!(f.root.join("whole/eval_baseline.json").exists());
    assert!(f
        .root
        .join("whole/checkpoints/checkpoint-0002.ply")
        .exists());
    let log = std::fs::read_to_string(f.root.join("whole/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn flags_override_the_config() {
    let f = fixture();
    let cfg = write_config(&f, "c.toml", "out", "procedural:watermelon");
    ok(&["-c", s(&cfg), "fill"]);
    let out: Value = serde_json::from_str(&ok(&[
        "-c",
        s(&cfg),
        "train",
        "--iterations",
        "1",
        "--provider",
        "procedural:orange",
    ]))
    .unwrap();
    assert_eq!(out["iterations"], 1);
    let e = error_of(&cli(&["-c", s(&cfg), "train", "--provider", "nonsense"]));
    assert_eq!(e["kind"], "provider");
}

#[test]
fn external_echo_provider_trains() {
    let f = fixture();
    let cfg = write_config(&f, "c.toml", "out", &format!("external:{ECHO} --dry-run"));
    ok(&["-c", s(&cfg), "fill"]);
    let out: Value = serde_json::from_str(&ok(&["-c", s(&cfg), "train"])).unwrap();
    // echoed references equal the renders, so the initial four already converge
    assert_eq!(out["provider_calls"], 4);
}

#[test]
fn sidecar_failure_keeps_a_partial_model() {
    let f = fixture();
    let cfg = write_config(
        &f,
        "c.toml",
        "out",
        &format!("external:{ECHO} --fail-after 2"),
    );
    ok(&["-c", s(&cfg), "fill"]);
    let e = error_of(&cli(&["-c", s(&cfg), "train"]));
    assert_eq!(e["kind"], "provider");
    let partial = PathBuf::from(e["checkpoint"].as_str().unwrap());
    assert_eq!(partial, f.root.join("out/checkpoints/partial.ply"));
    assert!(partial.exists());
}

#[test]
fn unlaunchable_sidecar_is_a_provider_error() {
    let f = fixture();
    let cfg = write_config(&f, "c.toml", "out", "external:/no/such/sidecar");
    ok(&["-c", s(&cfg), "fill"]);
    let e = error_of(&cli(&["-c", s(&cfg), "train"]));
    assert_eq!(e["kind"], "provider");
}

fn request(kind: RequestKind, id: &str) -> ReferenceRequest {
    let rgb = ColorImage::from_fn(20, 12, |x, y| {
        Vec3::new(x as f64 / 19.0, y as f64 / 11.0, 0.25)
    });
    let plane = CutPlane::new(Vec3::z(), 0.0, 0.01, CutMode::Slab, "horizontal").unwrap();
    ReferenceRequest {
        kind,
        view_id: id.into(),
        depth: ScalarImage::new(20, 12),
        depth_scale: 10.0,
        prompt_tag: plane.prompt_tag.clone(),
        steps: 4,
        context: None,
        rgb,
    }
}

#[test]
fn echo_sidecar_round_trips() {
    let mut p = ExternalProvider::spawn(&format!("{ECHO} --dry-run")).unwrap();
    for id in ["a", "b"] {
        for kind in [RequestKind::InitReference, RequestKind::RefineReference] {
            let req = request(kind, id);
            let img = p.provide(&req).unwrap();
            assert_eq!(img, req.rgb.quantized());
        }
    }
    assert!(p.describe().starts_with("external:"));
}

#[test]
fn sidecar_rejects_unknown_fields() {
    use std::io::{BufRead, BufReader, Write};
    let mut child = Command::new(ECHO)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    writeln!(
        stdin,
        r#"{{"type":"init_reference","view_id":"v","rgb":"","depth":"","prompt_tag":"t","steps":1,"extra":1}}"#
    )
    .unwrap();
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["type"], "error");
    drop(stdin);
    assert!(child.wait().unwrap().success());
}
