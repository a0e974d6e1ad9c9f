//! End-to-end tests driving the compiled binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn echofield() -> Command {
    Command::new(env!("CARGO_BIN_EXE_echofield"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().expect("spawn echofield");
    assert!(
        output.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output()
        .expect("spawn echofield")
        .status
        .code()
        .expect("exit code")
}

/// Every file under `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).expect("prefix");
                out.insert(
                    rel.to_string_lossy().into_owned(),
                    fs::read(&path).expect("read"),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Two short training sweeps at opposing tilts plus one perpendicular
/// test sweep over a water block with a single scattering layer.
const MINI_SCENE: &str = r#"{
  "phantom": {
    "name": "mini",
    "extent_mm": [12.0, 16.0, 8.0],
    "voxel_mm": 2.0,
    "background": "water",
    "layers": [
      { "tissue": "soft", "from_mm": 4.0, "to_mm": 12.0 }
    ],
    "inclusions": [],
    "tissues": [
      { "name": "water", "attenuation": 0.0005, "reflectance": 0.05,
        "scatter_density": 0.02, "scatter_amplitude": 0.05 },
      { "name": "soft", "attenuation": 0.012, "reflectance": 0.2,
        "scatter_density": 0.5, "scatter_amplitude": 0.5 }
    ]
  },
  "frame": {
    "scanlines": 16, "depth_samples": 24,
    "lateral_spacing_mm": 0.7, "axial_spacing_mm": 0.6
  },
  "sweeps": [
    { "name": "train-a", "role": "train",
      "trajectory": { "frames": 3, "start_mm": [6.0, 0.0, 3.0],
                      "step_mm": [0.0, 0.0, 1.0], "tilt_deg": 8.0 } },
    { "name": "train-b", "role": "train",
      "trajectory": { "frames": 3, "start_mm": [6.0, 0.0, 3.0],
                      "step_mm": [0.0, 0.0, 1.0], "tilt_deg": -8.0 } },
    { "name": "test-mid", "role": "test",
      "trajectory": { "frames": 2, "start_mm": [6.0, 0.0, 3.5],
                      "step_mm": [0.0, 0.0, 1.0], "tilt_deg": 0.0 } }
  ]
}"#;

fn write_mini_scene(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("scene.json");
    fs::write(&path, MINI_SCENE).expect("write scene");
    path
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let output = echofield().output().expect("spawn echofield");
    assert_eq!(output.status.code(), Some(1));
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(text.contains("Usage"), "no usage text:\n{text}");
}

#[test]
fn simulate_twice_is_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    let scene = write_mini_scene(dir.path());
    for out in ["a", "b"] {
        run_ok(echofield().args([
            "simulate",
            "--out",
            dir.path().join(out).to_str().unwrap(),
            "--scene-file",
            scene.to_str().unwrap(),
            "--seed",
            "11",
        ]));
    }
    let a = tree(&dir.path().join("a"));
    let b = tree(&dir.path().join("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().expect("tempdir");
    let scene = write_mini_scene(dir.path());
    let data = dir.path().join("ds");
    run_ok(echofield().args([
        "simulate",
        "--out",
        data.to_str().unwrap(),
        "--scene-file",
        scene.to_str().unwrap(),
        "--mode",
        "expected",
    ]));
    assert!(data.join("manifest.json").is_file());
    let first = fs::read(data.join("sweeps/train-a/frames/frame_0000.pgm")).unwrap();
    assert!(first.starts_with(b"P5"));

    let config = dir.path().join("train.cfg");
    fs::write(
        &config,
        "# small fit\niterations = 4\nwidth = 8\nhidden_layers = 2\n\
         skip_layer = 0\nfrequencies = 2\nmode = expected\n",
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let output = run_ok(echofield().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--iterations",
        "5",
    ]));
    let stderr = String::from_utf8_lossy(&output.stderr);
    // The flag beats the file, the file beats the default.
    assert!(stderr.contains("iterations = 5"), "stderr:\n{stderr}");
    assert!(stderr.contains("width = 8"), "stderr:\n{stderr}");
    assert!(stderr.contains("mode = expected"), "stderr:\n{stderr}");
    assert!(ckpt.is_file());

    let view = dir.path().join("view.pgm");
    run_ok(echofield().args([
        "render",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--sweep",
        "test-mid",
        "--frame",
        "1",
        "--out",
        view.to_str().unwrap(),
    ]));
    assert!(fs::read(&view).unwrap().starts_with(b"P5"));

    let scores = dir.path().join("scores.tsv");
    let output = run_ok(echofield().args([
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        scores.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("mean ssim"), "stdout:\n{stdout}");
    let tsv = fs::read_to_string(&scores).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "frame\tssim");
    assert_eq!(lines.len(), 3, "two test frames expected:\n{tsv}");

    let maps = dir.path().join("maps");
    run_ok(echofield().args([
        "decompose",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--sweep",
        "test-mid",
        "--frame",
        "0",
        "--out-dir",
        maps.to_str().unwrap(),
    ]));
    for name in [
        "attenuation",
        "reflectance",
        "border_prob",
        "scatter_density",
        "scatter_amplitude",
    ] {
        assert!(maps.join(format!("{name}.pgm")).is_file(), "missing {name}");
    }

    let vol = dir.path().join("sweeps.vol");
    run_ok(echofield().args([
        "compound",
        "--data",
        data.to_str().unwrap(),
        "--out",
        vol.to_str().unwrap(),
        "--voxel",
        "1.5",
    ]));
    assert!(fs::read(&vol).unwrap().starts_with(b"ECHOVOL1"));

    let resliced = dir.path().join("reslice.pgm");
    run_ok(echofield().args([
        "slice",
        "--volume",
        vol.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--sweep",
        "train-a",
        "--frame",
        "0",
        "--out",
        resliced.to_str().unwrap(),
    ]));
    assert!(fs::read(&resliced).unwrap().starts_with(b"P5"));
}

#[test]
fn gradient_check_passes() {
    let output = run_ok(echofield().args(["gradcheck", "--seed", "3"]));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(
        stdout.contains("gradient checks passed"),
        "stdout:\n{stdout}"
    );
}

#[test]
fn missing_dataset_is_runtime_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let code = exit_code(echofield().args([
        "train",
        "--data",
        dir.path().join("absent").to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn unknown_config_key_is_validation_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let scene = write_mini_scene(dir.path());
    let data = dir.path().join("ds");
    run_ok(echofield().args([
        "simulate",
        "--out",
        data.to_str().unwrap(),
        "--scene-file",
        scene.to_str().unwrap(),
    ]));
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "width = 8\nmomentum = 0.9\n").unwrap();
    let output = echofield()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("m.ckpt").to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ])
        .output()
        .expect("spawn echofield");
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("momentum"), "stderr:\n{stderr}");
}

#[test]
fn temperature_requires_relaxed_mode() {
    let dir = tempfile::tempdir().expect("tempdir");
    let scene = write_mini_scene(dir.path());
    let code = exit_code(echofield().args([
        "simulate",
        "--out",
        dir.path().join("ds").to_str().unwrap(),
        "--scene-file",
        scene.to_str().unwrap(),
        "--mode",
        "hard",
        "--tau",
        "0.5",
    ]));
    assert_eq!(code, 1);
}
