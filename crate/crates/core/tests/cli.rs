use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use holoflow::data::sample_checkerboard;
use holoflow::evalmetrics::CheckerboardSpec;
use holoflow::sampler::{write_pgm, write_points_csv};
use holoflow::spectral::Image;
use holoflow::trainer::{Checkpoint, TrainMode};
use holoflow::velocity_model::{ArchSpec, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = "\
[run]
epochs = 3
batch_size = 8
samples_per_epoch = 24
seed = 11

[grid]
modes = 4

[model]
width = 6
blocks = 1
time_freqs = 1

[eval]
every = 1
points = 20
steps = 2
loss_samples = 16

[sample]
n = 10
n_steps = 4
";

fn holoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_holoflow")).args(args).env("RUST_LOG", "warn").output().expect("run holoflow")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_field(o: &Output, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).expect("json on stdout");
    v[key].as_f64().unwrap_or_else(|| panic!("{key} missing in {v}"))
}

#[test]
fn verify_default_config_passes() {
    let o = holoflow(&["verify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_hsv_massless_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hsv.txt", "[background]\nkind = hsv\np = 0.5\n");
    let o = holoflow(&["verify", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn hsv_with_mass_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hsv.txt", "[background]\nkind = hsv\np = 0.5\nmass_squared = 0.3\n");
    let o = holoflow(&["verify", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_config_error_naming_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.txt", "[run]\nepochs = 2\nlearning_rat = 0.1\n");
    let o = holoflow(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn train_generate_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.txt", &TINY.replace("seed = 11\n", "seed = 11\ncheckpoint_every = 2\n"));
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = holoflow(&["train", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "metrics.csv", "final.gads", "checkpoint_epoch0002.gads"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,loss,wall_ms,bv,wed"));
    assert_eq!(lines.count(), 4);

    let ckpt = out.join("final.gads");
    let g1 = dir.path().join("g1");
    let g2 = dir.path().join("g2");
    for g in [&g1, &g2] {
        let o = holoflow(&[
            "generate",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            g.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(g1.join("samples.csv")).unwrap();
    assert_eq!(a, fs::read(g2.join("samples.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 11);

    let o = holoflow(&[
        "generate",
        "--config",
        &cfg,
        "--seed",
        "12",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        g2.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_ne!(a, fs::read(g2.join("samples.csv")).unwrap());

    let o = holoflow(&["eval", "--config", &cfg, g1.join("samples.csv").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bv = json_field(&o, "bv");
    assert!((0.0..=1.0).contains(&bv));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("every = 1\n", "every = 0\n").replace("seed = 11\n", "seed = 11\ncheckpoint_every = 1\n");
    let cfg = write_config(dir.path(), "tiny.txt", &text);
    let full = dir.path().join("full");
    let o = holoflow(&["train", "--config", &cfg, "--out", full.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let part = dir.path().join("part");
    fs::create_dir_all(&part).unwrap();
    let ck1 = full.join("checkpoint_epoch0001.gads");
    fs::copy(full.join("metrics.csv"), part.join("metrics.csv")).unwrap();
    let o =
        holoflow(&["train", "--config", &cfg, "--out", part.to_str().unwrap(), "--checkpoint", ck1.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    assert_eq!(fs::read(full.join("final.gads")).unwrap(), fs::read(part.join("final.gads")).unwrap());
    let losses = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{}", f[0], f[1])
            })
            .collect()
    };
    assert_eq!(losses(&full), losses(&part));
}

#[test]
fn different_seed_changes_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("every = 1\n", "every = 0\n").replace("epochs = 3", "epochs = 1");
    let cfg = write_config(dir.path(), "tiny.txt", &text);
    let mut traces = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(seed);
        let o = holoflow(&["train", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let m = fs::read_to_string(out.join("metrics.csv")).unwrap();
        traces.push(m.lines().map(|l| l.split(',').nth(1).unwrap().to_string()).collect::<Vec<_>>());
    }
    assert_ne!(traces[0], traces[1]);
}

#[test]
fn generate_rejects_architecture_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.txt", TINY);
    let ckpt = dir.path().join("wide.gads");
    let arch = ArchSpec { width: 7, ..ArchSpec::desk(4, 4) };
    let arch = ArchSpec { blocks: 1, time_freqs: 1, ..arch };
    Checkpoint::from_params(ModelParams::<f32>::zeros(arch).unwrap(), serde_json::Value::Null).save(&ckpt).unwrap();
    let o = holoflow(&[
        "generate",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().join("g").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
}

#[test]
fn zero_model_generates_or_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.txt", TINY);
    let ckpt = dir.path().join("zero.gads");
    let arch =
        ArchSpec { width: 6, blocks: 1, time_freqs: 1, ..ArchSpec::desk(4, TrainMode::FullLinear.out_channels()) };
    Checkpoint::from_params(ModelParams::<f32>::zeros(arch).unwrap(), serde_json::Value::Null).save(&ckpt).unwrap();
    let g = dir.path().join("g");
    let o =
        holoflow(&["generate", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", g.to_str().unwrap()]);
    match o.status.code() {
        Some(0) => {
            let text = fs::read_to_string(g.join("samples.csv")).unwrap();
            assert_eq!(text.lines().count(), 11);
        }
        Some(1) => assert!(stderr(&o).contains("decode"), "{}", stderr(&o)),
        other => panic!("unexpected exit {other:?}: {}", stderr(&o)),
    }
}

#[test]
fn eval_of_true_samples_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CheckerboardSpec::default();
    let pts = sample_checkerboard(&spec, 10_000, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let path = dir.path().join("true.csv");
    let mut buf = Vec::new();
    write_points_csv(&mut buf, &pts).unwrap();
    fs::write(&path, buf).unwrap();
    let o = holoflow(&["eval", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json_field(&o, "bv"), 0.0);
    let w = json_field(&o, "wed");
    assert!((0.0..=0.01).contains(&w), "wed {w}");

    let o = holoflow(&["eval", path.to_str().unwrap(), path.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(json_field(&o, "wed"), 0.0);
}

#[test]
fn eval_of_identical_images_has_zero_frechet() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    fs::create_dir_all(&imgs).unwrap();
    for i in 0..6 {
        let px: Vec<f64> = (0..16).map(|j| ((i * 7 + j * 3) % 11) as f64 / 10.0).collect();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &Image::new(4, px).unwrap()).unwrap();
        fs::write(imgs.join(format!("im{i}.pgm")), buf).unwrap();
    }
    let o = holoflow(&["eval", imgs.to_str().unwrap(), imgs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(json_field(&o, "frechet").abs() <= 1e-6);
}

#[test]
fn malformed_csv_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "x,y\n0.5,0.5\n1.0,oops\n").unwrap();
    let o = holoflow(&["eval", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}
