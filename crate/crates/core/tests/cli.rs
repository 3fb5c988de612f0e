//! The binary's subcommands, argument handling and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use foveated::calibration::calvgg::{write_sweep_csv, SweepRow};
use foveated::sampling::SamplingMask;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_foveated"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "make-mask",
        "build-dataset",
        "synthesize",
        "train",
        "reconstruct",
        "composite",
        "calibrate",
        "evaluate",
        "sweep",
        "plot",
        "run",
        "config",
        "verify",
        "fetch-weights",
    ] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(run(&["config", "show", "--help"]).status.success());
}

#[test]
fn make_mask_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mk = |out: &Path, seed: &str| {
        let o = run(&[
            "make-mask", "--height", "32", "--width", "48", "--rate", "0.1", "--seed", seed, "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        SamplingMask::load_png(out).unwrap()
    };
    let a = mk(&p("a.png"), "5");
    let b = mk(&p("b.png"), "5");
    let c = mk(&p("c.png"), "6");
    assert_eq!(a.bits(), b.bits());
    assert_ne!(a.bits(), c.bits());
    assert_eq!(a.count(), (32.0 * 48.0 * 0.1f64).round() as usize);
}

#[test]
fn config_show_applies_layers() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "[train]\nmax_steps = 77\n").unwrap();
    let o = run(&[
        "--smoke",
        "--config",
        file.to_str().unwrap(),
        "--set",
        "regions.far_boundary_deg=16",
        "--seed",
        "9",
        "config",
        "show",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let v: toml::Table = text.parse().unwrap();
    assert_eq!(v["seed"].as_integer(), Some(9));
    assert_eq!(v["train"]["max_steps"].as_integer(), Some(77));
    assert_eq!(v["regions"]["far_boundary_deg"].as_float(), Some(16.0));
    assert_eq!(v["paths"]["work_dir"].as_str(), Some("runs/smoke"));
}

#[test]
fn exit_codes_follow_error_class() {
    // Invalid configuration value.
    let o = run(&["--set", "regions.near_boundary_deg=30", "config", "show"]);
    assert_eq!(o.status.code(), Some(2));
    // Missing input file.
    let o = run(&["plot", "--csv", "/nonexistent/sweep.csv", "--out", "/tmp/never.png"]);
    assert_eq!(o.status.code(), Some(3));
    // Unknown subcommand is a usage error.
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    // Bad sampling rate.
    let o = run(&["make-mask", "--height", "8", "--width", "8", "--rate", "1.5", "--out", "/tmp/never.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_renders_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let rows: Vec<SweepRow> = ["interpolation", "l2+adv"]
        .iter()
        .flat_map(|m| {
            (9..=22).map(move |b| SweepRow {
                method: m.to_string(),
                far_boundary_deg: b as f64,
                detection_rate: 0.5 + b as f64 / 100.0,
                n_images: 3,
            })
        })
        .collect();
    write_sweep_csv(&csv, &rows).unwrap();
    let png = dir.path().join("sweep.png");
    let o = run(&["plot", "--csv", csv.to_str().unwrap(), "--out", png.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(png.exists());
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["series"].as_array().unwrap().len(), 2);
}

#[test]
fn composite_and_calibrate_scalar_metric() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let img = foveated::imaging::ImagePatch::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/images/08_camera.png"),
    )
    .unwrap()
    .crop(0, 0, 64, 64)
    .unwrap();
    let full = d.join("full.png");
    img.save_png(&full).unwrap();
    let mut rows = String::from("reference,test,eccentricity,probability\n");
    for (i, s) in [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0].iter().enumerate() {
        let name = format!("blur{i}.png");
        foveated::imaging::gaussian_blur(&img, *s).unwrap().save_png(&d.join(&name)).unwrap();
        for e in [8.0, 20.0] {
            let p = 0.5 + 0.45 * (1.0 - (-s * 8.0 / e).exp());
            rows.push_str(&format!("full.png,{name},{e},{p}\n"));
        }
    }
    std::fs::write(d.join("data.csv"), rows).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let out = d.join("composite.png");
    let o = run(&[
        "composite", "--full", &s(&full), "--near", &s(&d.join("blur1.png")), "--far", &s(&d.join("blur5.png")),
        "--out", &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.exists());
    let model = d.join("ssim.json");
    let o = run(&["calibrate", "--metric", "ssim", "--data", &s(&d.join("data.csv")), "--out", &s(&model)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "evaluate", "--model", &s(&model), "--ref", &s(&full), "--test", &s(&d.join("blur6.png")), "--ecc", "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
}
