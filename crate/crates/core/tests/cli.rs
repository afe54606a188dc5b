use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spad_deglare::io;
use tempfile::TempDir;

const CONFIG: &str = "\
rows = 24
cols = 32
bins = 256
noise_window = 150..256
pulses_per_frame = 20000
frames = 4
band_rows = 5
seed = 9
";

const SCENE: &str = "\
depth = 85
alpha = 0.01
beta = 0.2
rect 6 4 18 28 55 0.02
retro 10 12 14 20 30 20
";

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spad-deglare"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPAD_DEGLARE_CONFIG")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A workspace with a scene, a matching atlas, and two config files:
/// `run.cfg` simulates without glare, `glare.cfg` adds the atlas.
fn workspace(scene: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    fs::write(
        dir.path().join("glare.cfg"),
        format!("{CONFIG}atlas = atlas.gsfa\n"),
    )
    .unwrap();
    fs::write(dir.path().join("scene.txt"), scene).unwrap();
    ok(
        dir.path(),
        &[
            "--config",
            "run.cfg",
            "synthetic-atlas",
            "--out",
            "atlas.gsfa",
        ],
    );
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn dark_scene_has_no_returns() {
    let dir = workspace("alpha = 0\nbeta = 0\n");
    let d = dir.path();
    ok(
        d,
        &[
            "--config",
            "run.cfg",
            "simulate",
            "--scene",
            "scene.txt",
            "--out",
            "cube.sphc",
        ],
    );
    ok(
        d,
        &[
            "--config",
            "glare.cfg",
            "pipeline",
            "--out",
            "out",
            "cube.sphc",
        ],
    );
    let depth = io::decode_depth(&read(d, "out/depth.dpth")).unwrap();
    assert_eq!((depth.rows, depth.cols), (24, 32));
    assert!(depth.depth.iter().all(|v| v.is_nan()));
    let table = String::from_utf8(read(d, "out/echoes.csv")).unwrap();
    assert_eq!(table.lines().count(), 1, "only the header expected");
    let conf = io::decode_confidence(&read(d, "out/confidence.conf")).unwrap();
    assert!(conf.values.iter().all(|v| v.is_nan()));
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let dir = workspace(SCENE);
    let d = dir.path();
    for cube in ["a.sphc", "b.sphc"] {
        ok(
            d,
            &[
                "--config",
                "glare.cfg",
                "simulate",
                "--scene",
                "scene.txt",
                "--out",
                cube,
            ],
        );
    }
    assert_eq!(read(d, "a.sphc"), read(d, "b.sphc"));
    for out in ["x", "y"] {
        ok(
            d,
            &["--config", "glare.cfg", "pipeline", "--out", out, "a.sphc"],
        );
    }
    for f in ["depth.dpth", "confidence.conf", "echoes.csv"] {
        assert_eq!(
            read(d, &format!("x/{f}")),
            read(d, &format!("y/{f}")),
            "{f}"
        );
    }
    // A different seed changes the photon counts.
    ok(
        d,
        &[
            "--config",
            "glare.cfg",
            "--seed",
            "10",
            "simulate",
            "--scene",
            "scene.txt",
            "--out",
            "c.sphc",
        ],
    );
    assert_ne!(read(d, "a.sphc"), read(d, "c.sphc"));
}

#[test]
fn pipeline_removes_ghosts_and_reports() {
    let dir = workspace(SCENE);
    let d = dir.path();
    ok(
        d,
        &[
            "--config",
            "glare.cfg",
            "simulate",
            "--scene",
            "scene.txt",
            "--out",
            "cube.sphc",
            "--truth-out",
            "truth.dpth",
        ],
    );
    let out = ok(
        d,
        &[
            "--config",
            "glare.cfg",
            "--truth",
            "truth.dpth",
            "--ghost_depth",
            "1.124",
            "pipeline",
            "--out",
            "out",
            "cube.sphc",
        ],
    );
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("rmse"), "{report}");
    assert!(report.contains("n_ghost_after = 0"), "{report}");
    assert!(!report.contains("n_ghost_before = 0"), "{report}");
    assert_eq!(read(d, "out/report.txt"), report.as_bytes());

    let truth = io::decode_depth(&read(d, "truth.dpth")).unwrap();
    let depth = io::decode_depth(&read(d, "out/depth.dpth")).unwrap();
    let rpb = spad_deglare::sensor::SensorConfig::default().range_per_bin;
    let wrong = truth
        .depth
        .iter()
        .zip(&depth.depth)
        .filter(|(t, p)| {
            let err = ((**t - **p) as f64).abs();
            err.is_nan() || err > 2.0 * rpb
        })
        .count();
    assert!(wrong * 50 < truth.depth.len(), "{wrong} pixels off");

    // The photographic baseline cannot undo glare from a piled-up source.
    let b = ok(
        d,
        &[
            "--config",
            "glare.cfg",
            "--truth",
            "truth.dpth",
            "--ghost_depth",
            "1.124",
            "baseline",
            "--out",
            "base.dpth",
            "cube.sphc",
        ],
    );
    let report = String::from_utf8(b.stdout).unwrap();
    assert!(!report.contains("n_ghost_after = 0"), "{report}");

    let e = ok(
        d,
        &[
            "--config",
            "glare.cfg",
            "--truth",
            "truth.dpth",
            "eval",
            "--pred",
            "out/depth.dpth",
            "--csv",
        ],
    );
    let csv = String::from_utf8(e.stdout).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

fn cube_dims(path: PathBuf) -> (usize, usize, usize) {
    let c = io::decode_cube(&fs::read(path).unwrap()).unwrap();
    (c.rows, c.cols, c.bins)
}

#[test]
fn flags_override_file_and_environment_supplies_file() {
    let dir = workspace("alpha = 0.01\n");
    let d = dir.path();
    let run = |extra: &[&str], env: bool| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_spad-deglare"));
        cmd.current_dir(d).env_remove("SPAD_DEGLARE_CONFIG");
        if env {
            cmd.env("SPAD_DEGLARE_CONFIG", "run.cfg");
        }
        let out = cmd
            .args(extra)
            .args(["simulate", "--scene", "scene.txt", "--out", "cube.sphc"])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        cube_dims(d.join("cube.sphc"))
    };
    assert_eq!(run(&["--config", "run.cfg"], false), (24, 32, 256));
    assert_eq!(run(&[], true), (24, 32, 256));
    assert_eq!(run(&["--cols", "30"], true), (24, 30, 256));
    // Without any file the built-in sensor size applies, so shrink it by flags.
    assert_eq!(
        run(
            &[
                "--rows",
                "20",
                "--cols",
                "28",
                "--bins",
                "128",
                "--noise_window",
                "64"
            ],
            false
        ),
        (20, 28, 128)
    );
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = workspace(SCENE);
    let d = dir.path();
    let code = |args: &[&str]| cli(d, args).status.code().unwrap();

    // Usage and configuration mistakes.
    assert_eq!(code(&["--bogus", "simulate"]), 2);
    assert_eq!(
        code(&[
            "--config",
            "run.cfg",
            "--rows",
            "0",
            "simulate",
            "--scene",
            "scene.txt",
            "--out",
            "x"
        ]),
        2
    );
    // Malformed inputs.
    fs::write(d.join("bad.cfg"), "rows = 4\ncolour = red\n").unwrap();
    assert_eq!(
        code(&[
            "--config",
            "bad.cfg",
            "simulate",
            "--scene",
            "scene.txt",
            "--out",
            "x"
        ]),
        3
    );
    fs::write(d.join("short.sphc"), b"SPHC\x01\x00").unwrap();
    assert_eq!(
        code(&[
            "--config",
            "glare.cfg",
            "pipeline",
            "--out",
            "o",
            "short.sphc"
        ]),
        3
    );
    // Missing files.
    assert_eq!(
        code(&[
            "--config",
            "glare.cfg",
            "pipeline",
            "--out",
            "o",
            "missing.sphc"
        ]),
        4
    );
    assert_eq!(
        code(&[
            "--config",
            "missing.cfg",
            "pipeline",
            "--out",
            "o",
            "a.sphc"
        ]),
        4
    );

    let out = cli(
        d,
        &[
            "--config",
            "glare.cfg",
            "pipeline",
            "--out",
            "o",
            "short.sphc",
        ],
    );
    let msg = String::from_utf8(out.stderr).unwrap();
    assert!(msg.starts_with("error:"), "{msg}");
    assert!(msg.contains("byte 4"), "{msg}");
}

#[test]
fn cubes_with_mismatched_sensor_are_rejected() {
    let dir = workspace(SCENE);
    let d = dir.path();
    ok(
        d,
        &[
            "--config",
            "run.cfg",
            "--cols",
            "30",
            "simulate",
            "--scene",
            "scene.txt",
            "--out",
            "narrow.sphc",
        ],
    );
    let out = cli(
        d,
        &[
            "--config",
            "glare.cfg",
            "pipeline",
            "--out",
            "o",
            "narrow.sphc",
        ],
    );
    assert!(!out.status.success());
}
