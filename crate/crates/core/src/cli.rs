//! Subcommand implementations behind the `holoflow` binary.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{load_images_for_grid, sample_checkerboard, DatasetSpec};
use crate::error::{Error, Result};
use crate::evalmetrics::{boundary_violation, frechet_gaussian, wed, CheckerboardSpec};
use crate::geometry::BackgroundKind;
use crate::paths::{hermite_path, linear_path, residual_target};
use crate::propagator::{radial_samples, verify_mode_ode};
use crate::sampler::{
    decode_image, decode_point, generate_states, read_pgm, read_points_csv, write_pgm, write_points_csv, FlowVelocity,
    SampleRun,
};
use crate::spectral::{sample_base, FieldState, Image};
use crate::trainer::{
    arch_mismatch, stream_rng, write_metrics_csv, Checkpoint, EpochRow, Trainer, STREAM_GENERATE, STREAM_REFERENCE,
};
use crate::velocity_model::ModelParams;

pub const CONFIG_ECHO: &str = "config.txt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.gads";
pub const POINTS_CSV: &str = "samples.csv";

const GENERATE_CHUNK: usize = 256;

/// Process exit code for an error: 2 for configuration and input problems,
/// 1 for everything that fails at run time.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Format(_) | Error::Checkpoint(_) | Error::Shape(_) => 2,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub label: String,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub lines: Vec<CheckLine>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&format!(
                "{} {:<48} {:.3e} (tol {:.0e})\n",
                if l.passed() { "PASS" } else { "FAIL" },
                l.label,
                l.value,
                l.tolerance
            ));
        }
        s.push_str(if self.passed() { "verify: PASS\n" } else { "verify: FAIL\n" });
        s
    }
}

/// Mode-ODE residuals of the configured background plus path invariants on
/// random states.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let bg = &cfg.train.background;
    let tol = cfg.verify.tolerance;
    let rs = radial_samples(bg, cfg.verify.radial_samples.max(5));
    let name = match bg.kind {
        BackgroundKind::PlanarAds { delta } => format!("planar d={} delta={delta}", bg.d),
        BackgroundKind::Hsv { p } => format!("hsv d={} p={p}", bg.d),
    };
    let mut lines = Vec::new();
    for &k in &cfg.verify.knorms {
        lines.push(CheckLine {
            label: format!("mode ODE {name} |k|={k}"),
            value: verify_mode_ode(bg, k, &rs)?,
            tolerance: tol,
        });
    }

    let grid = cfg.train.grid.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let s0 = sample_base(&grid, &cfg.train.base, &mut rng)?;
    let s1 = sample_base(&grid, &cfg.train.base, &mut rng)?;
    let dist = |a: &FieldState, b: &FieldState| -> f64 {
        a.phi.iter().zip(&b.phi).chain(a.pi.iter().zip(&b.pi)).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    };
    let h0 = hermite_path(bg, &grid, &s0, &s1, 0.0)?;
    let h1 = hermite_path(bg, &grid, &s0, &s1, 1.0)?;
    lines.push(CheckLine {
        label: "hermite endpoints".into(),
        value: dist(&h0.state, &s0).max(dist(&h1.state, &s1)),
        tolerance: 1e-12,
    });
    let mut onshell: f64 = 0.0;
    let mut linear: f64 = 0.0;
    let dr = bg.delta_r();
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let h = hermite_path(bg, &grid, &s0, &s1, t)?;
        let res = residual_target(&h)?;
        onshell = onshell.max(res.phi.iter().map(|z| z.norm()).fold(0.0, f64::max));
        let l = linear_path(bg, &grid, &s0, &s1, t)?;
        let res = residual_target(&l)?;
        for m in 0..grid.len() {
            let want = (s1.phi[m] - s0.phi[m]) - (s0.pi[m] * (1.0 - t) + s1.pi[m] * t) * dr;
            linear = linear.max((res.phi[m] - want).norm());
        }
    }
    lines.push(CheckLine { label: "hermite on-shell field residual".into(), value: onshell, tolerance: 0.0 });
    lines.push(CheckLine { label: "linear off-shell field defect".into(), value: linear, tolerance: 1e-12 });
    Ok(VerifyReport { lines })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub rows: Vec<EpochRow>,
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Train, writing the config echo, metrics CSV and checkpoints under `out`.
/// With `resume`, training continues from that checkpoint and new rows are
/// appended to an existing metrics file.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let echo = out.join(CONFIG_ECHO);
    write_file(&echo, cfg.to_text().as_bytes())?;
    let metrics = out.join(METRICS_CSV);
    let mut files = vec![echo, metrics.clone()];

    let (mut trainer, mut rows) = match resume {
        Some(path) => {
            let tr = Trainer::from_checkpoint(cfg.train.clone(), Checkpoint::load(path)?)?;
            let mut previous = match fs::read_to_string(&metrics) {
                Ok(text) => parse_metrics(&text)?,
                Err(_) => Vec::new(),
            };
            let done = tr.progress().epoch;
            previous.retain(|r| r.epoch <= done);
            (tr, previous)
        }
        None => {
            let mut tr = Trainer::new(cfg.train.clone())?;
            let row = tr.initial_row()?;
            log::info!("epoch 0 loss {:.6}{}", row.loss, eval_suffix(&row));
            (tr, vec![row])
        }
    };
    let with_eval = trainer.has_point_eval();
    let write_rows = |rows: &[EpochRow]| -> Result<()> {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, rows, with_eval)?;
        write_file(&metrics, &buf)
    };
    write_rows(&rows)?;
    let every = cfg.checkpoint_every;
    let mut periodic = Vec::new();
    trainer.run(|tr, row| {
        log::info!("epoch {} loss {:.6} wall {:.0} ms{}", row.epoch, row.loss, row.wall_ms, eval_suffix(row));
        rows.push(row.clone());
        write_rows(&rows)?;
        if every > 0 && row.epoch % every == 0 {
            let p = out.join(format!("checkpoint_epoch{:04}.gads", row.epoch));
            tr.checkpoint().save(&p)?;
            periodic.push(p);
        }
        Ok(())
    })?;
    let fin = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&fin)?;
    files.extend(periodic);
    files.push(fin);
    Ok(TrainSummary { rows, files })
}

/// Read a metrics CSV written by [`write_metrics_csv`].
pub fn parse_metrics(text: &str) -> Result<Vec<EpochRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("metrics line {}: `{line}`", i + 1));
        if f.len() != 3 && f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        rows.push(EpochRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            loss: num(f[1])?,
            wall_ms: num(f[2])?,
            bv: if f.len() == 5 { opt(f[3])? } else { None },
            wed: if f.len() == 5 { opt(f[4])? } else { None },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub files: Vec<PathBuf>,
    pub count: usize,
}

/// Generate `[sample] n` outputs from a checkpoint: points for a checkerboard
/// dataset, PGM images otherwise.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<GenerateSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(field) = arch_mismatch(&ckpt.params.arch, &cfg.train.arch) {
        return Err(Error::Checkpoint(format!(
            "{}: architecture differs from config in `{field}`",
            checkpoint.display()
        )));
    }
    let tr = &cfg.train;
    let grid = tr.grid.build()?;
    let field = FlowVelocity { bg: &tr.background, grid: &grid, mode: tr.mode, params: Some(&ckpt.params) };
    let run = SampleRun { n_steps: cfg.sample.n_steps, integrator: cfg.sample.integrator, seed: tr.seed };
    let mut rng = stream_rng(tr.seed, STREAM_GENERATE, 0, 0);
    fs::create_dir_all(out)?;
    let echo = out.join(CONFIG_ECHO);
    write_file(&echo, cfg.to_text().as_bytes())?;
    let mut files = vec![echo];

    let n = cfg.sample.n;
    let mut done = 0;
    match tr.dataset {
        DatasetSpec::Checkerboard(_) => {
            let points = generate_point_set(cfg, &ckpt.params, n)?;
            let path = out.join(POINTS_CSV);
            let mut buf = Vec::new();
            write_points_csv(&mut buf, &points)?;
            write_file(&path, &buf)?;
            files.push(path);
        }
        DatasetSpec::IdxImages { .. } => {
            while done < n {
                let m = GENERATE_CHUNK.min(n - done);
                for s in generate_states(&field, &grid, &tr.base, m, &run, &mut rng)? {
                    let img = decode_image(&grid, &s, &tr.background)?;
                    let path = out.join(format!("sample_{done:05}.pgm"));
                    let mut buf = Vec::new();
                    write_pgm(&mut buf, &img)?;
                    write_file(&path, &buf)?;
                    files.push(path);
                    done += 1;
                }
            }
        }
    }
    Ok(GenerateSummary { files, count: n })
}

fn eval_suffix(row: &EpochRow) -> String {
    match (row.bv, row.wed) {
        (Some(bv), Some(wed)) => format!(" bv {bv:.4} wed {wed:.5}"),
        (Some(bv), None) => format!(" bv {bv:.4} wed undefined"),
        _ => String::new(),
    }
}

/// Samples `n` points from `params` with the configured integrator, decoder and seed.
pub fn generate_point_set(cfg: &RunConfig, params: &ModelParams<f32>, n: usize) -> Result<Vec<[f64; 2]>> {
    let tr = &cfg.train;
    let grid = tr.grid.build()?;
    let field = FlowVelocity { bg: &tr.background, grid: &grid, mode: tr.mode, params: Some(params) };
    let run = SampleRun { n_steps: cfg.sample.n_steps, integrator: cfg.sample.integrator, seed: tr.seed };
    let mut rng = stream_rng(tr.seed, STREAM_GENERATE, 0, 0);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let m = GENERATE_CHUNK.min(n - points.len());
        for s in generate_states(&field, &grid, &tr.base, m, &run, &mut rng)? {
            let p = decode_point(&grid, &s, &tr.background, cfg.sample.decoder)
                .map_err(|e| Error::Decode(format!("sample {}: {e}", points.len())))?;
            points.push([p[0], p[1]]);
        }
    }
    Ok(points)
}

fn read_points_file(path: &Path) -> Result<Vec<[f64; 2]>> {
    let f = fs::File::open(path)?;
    read_points_csv(BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn read_pgm_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            read_pgm(&fs::read(p)?).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                other => other,
            })
        })
        .collect()
}

/// Metrics of generated outputs as a JSON object: `{bv, wed, ...}` for a
/// points CSV, `{frechet, ...}` for a directory of PGM images.
pub fn cmd_eval(cfg: &RunConfig, generated: &Path, reference: Option<&Path>) -> Result<serde_json::Value> {
    if generated.is_dir() {
        let gen = read_pgm_dir(generated)?;
        if gen.len() < 2 {
            return Err(Error::Format(format!(
                "{}: need at least 2 PGM images, found {}",
                generated.display(),
                gen.len()
            )));
        }
        let side = gen[0].side;
        let reference = match reference {
            Some(p) if p.is_dir() => read_pgm_dir(p)?,
            Some(p) => load_images_for_grid(p, usize::MAX, side)?,
            None => match &cfg.train.dataset {
                DatasetSpec::IdxImages { path, max_items } => load_images_for_grid(path, *max_items, side)?,
                DatasetSpec::Checkerboard(_) => {
                    return Err(Error::Config(
                        "image evaluation needs a reference (argument or idx_images dataset)".into(),
                    ))
                }
            },
        };
        if let Some(bad) = gen.iter().chain(&reference).find(|im| im.side != side) {
            return Err(Error::Format(format!("image sides differ: {} vs {side}", bad.side)));
        }
        let fg: Vec<&[f64]> = gen.iter().map(|i| i.pixels.as_slice()).collect();
        let fr: Vec<&[f64]> = reference.iter().map(|i| i.pixels.as_slice()).collect();
        let fd = frechet_gaussian(&fr, &fg)?;
        return Ok(json!({ "frechet": fd, "n_generated": gen.len(), "n_reference": reference.len() }));
    }
    let pts = read_points_file(generated)?;
    let spec = match &cfg.train.dataset {
        DatasetSpec::Checkerboard(cb) => *cb,
        DatasetSpec::IdxImages { .. } => CheckerboardSpec::default(),
    };
    let truth = match reference {
        Some(p) => read_points_file(p)?,
        None => {
            sample_checkerboard(&spec, cfg.reference_points, &mut stream_rng(cfg.train.seed, STREAM_REFERENCE, 0, 0))?
        }
    };
    let bv = boundary_violation(&pts, &spec)?;
    let w = wed(&pts, &truth, &spec)?;
    Ok(json!({
        "bv": bv,
        "wed": w.value,
        "wed_skipped_cells": w.skipped_cells,
        "n_generated": pts.len(),
        "n_reference": truth.len(),
    }))
}

/// Write a JSON value followed by a newline.
pub fn write_json<W: Write>(w: W, v: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(w);
    serde_json::to_writer(&mut w, v).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_hsv_configs_verify() {
        let report = cmd_verify(&RunConfig::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
        let hsv = RunConfig::parse("[background]\nkind = hsv\np = 0.5\n").unwrap();
        let report = cmd_verify(&hsv).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn metrics_csv_parses_back() {
        let rows = vec![
            EpochRow { epoch: 0, loss: 1.5, wall_ms: 2.0, bv: Some(0.5), wed: Some(0.25) },
            EpochRow { epoch: 1, loss: 1.25, wall_ms: 3.0, bv: None, wed: None },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows, true).unwrap();
        assert_eq!(parse_metrics(std::str::from_utf8(&buf).unwrap()).unwrap(), rows);
        assert!(parse_metrics("epoch,loss,wall_ms\n1,x,2\n").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 1);
        assert_eq!(exit_code(&Error::Decode("x".into())), 1);
    }
}
