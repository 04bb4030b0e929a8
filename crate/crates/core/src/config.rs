//! Plain-text run configuration.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment            (also after a value: key = 1  # note)
//! [section]
//! key = value
//! ```
//!
//! Sections: `run`, `background`, `grid`, `base`, `dataset`, `model`, `eval`,
//! `sample`, `verify`. Every key is optional and defaults to the values in
//! [`RunConfig::default`]; unknown sections or keys, duplicates and values
//! that do not parse are errors naming the line. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::evalmetrics::CheckerboardSpec;
use crate::geometry::{Background, BackgroundKind};
use crate::sampler::{Integrator, PointDecoder};
use crate::trainer::{TrainConfig, TrainMode};
use crate::velocity_model::{Activation, ArchSpec, Frame};

/// Generation options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub n: usize,
    pub n_steps: usize,
    pub integrator: Integrator,
    pub decoder: PointDecoder,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { n: 1000, n_steps: 100, integrator: Integrator::Rk4, decoder: PointDecoder::CircularMean }
    }
}

/// Physics self-check options.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub knorms: Vec<f64>,
    pub radial_samples: usize,
    pub tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { knorms: vec![0.0, 1.0, 2.0, 4.0], radial_samples: 33, tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Reference sample size for point evaluation.
    pub reference_points: usize,
    pub sample: SampleConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::checkerboard_desk(TrainMode::FullLinear, 1.5, 0).expect("valid default background"),
            checkpoint_every: 10,
            reference_points: 10_000,
            sample: SampleConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

const SECTIONS: [&str; 9] = ["run", "background", "grid", "base", "dataset", "model", "eval", "sample", "verify"];

struct Table {
    entries: BTreeMap<(String, String), Entry>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line}: unterminated section header")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!("line {line}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) =
                content.split_once('=').ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let sec =
                section.clone().ok_or_else(|| Error::Config(format!("line {line}: key outside of any [section]")))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line}: empty key")));
            }
            let k = (sec.clone(), key.clone());
            if let Some(prev) = entries.get(&k) {
                let prev: &Entry = prev;
                return Err(Error::Config(format!(
                    "line {line}: duplicate key `{key}` in [{sec}] (first on line {})",
                    prev.line
                )));
            }
            entries.insert(k, Entry { value: value.trim().to_string(), line, used: false });
        }
        Ok(Table { entries })
    }

    fn raw(&mut self, sec: &str, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(&(sec.to_string(), key.to_string())).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn has(&self, sec: &str, key: &str) -> bool {
        self.entries.contains_key(&(sec.to_string(), key.to_string()))
    }

    fn get<T: FromStr>(&mut self, sec: &str, key: &str, slot: &mut T) -> Result<()> {
        if let Some((v, line)) = self.raw(sec, key) {
            *slot =
                v.parse().map_err(|_| Error::Config(format!("line {line}: bad value `{v}` for `{key}` in [{sec}]")))?;
        }
        Ok(())
    }

    fn get_with<T>(&mut self, sec: &str, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>) -> Result<()> {
        if let Some((v, line)) = self.raw(sec, key) {
            *slot = parse(&v)
                .ok_or_else(|| Error::Config(format!("line {line}: bad value `{v}` for `{key}` in [{sec}]")))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(((sec, key), e)) = self.entries.iter().find(|(_, e)| !e.used) {
            return Err(Error::Config(format!("line {}: unknown key `{key}` in [{sec}]", e.line)));
        }
        Ok(())
    }
}

fn parse_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn parse_integrator(s: &str) -> Option<Integrator> {
    match s {
        "rk4" => Some(Integrator::Rk4),
        "euler" => Some(Integrator::Euler),
        _ => None,
    }
}

fn parse_decoder(s: &str) -> Option<PointDecoder> {
    match s {
        "circular_mean" => Some(PointDecoder::CircularMean),
        "centroid" => Some(PointDecoder::Centroid),
        _ => None,
    }
}

fn integrator_name(i: Integrator) -> &'static str {
    match i {
        Integrator::Rk4 => "rk4",
        Integrator::Euler => "euler",
    }
}

fn decoder_name(d: PointDecoder) -> &'static str {
    match d {
        PointDecoder::CircularMean => "circular_mean",
        PointDecoder::Centroid => "centroid",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Table::parse(text)?;
        let mut c = RunConfig::default();
        let tr = &mut c.train;

        t.get_with("run", "mode", &mut tr.mode, |s| s.parse().ok())?;
        t.get("run", "seed", &mut tr.seed)?;
        t.get("run", "epochs", &mut tr.epochs)?;
        t.get("run", "batch_size", &mut tr.batch_size)?;
        t.get("run", "samples_per_epoch", &mut tr.samples_per_epoch)?;
        t.get("run", "learning_rate", &mut tr.learning_rate)?;
        t.get("run", "weight_decay", &mut tr.weight_decay)?;
        t.get("run", "beta1", &mut tr.beta1)?;
        t.get("run", "beta2", &mut tr.beta2)?;
        t.get("run", "eps", &mut tr.eps)?;
        t.get("run", "checkpoint_every", &mut c.checkpoint_every)?;

        tr.background = parse_background(&mut t)?;

        t.get("grid", "modes", &mut tr.grid.modes)?;
        t.get("grid", "box_len", &mut tr.grid.box_len)?;
        t.get("grid", "dim", &mut tr.grid.dim)?;

        t.get("base", "c_phi", &mut tr.base.c_phi)?;
        t.get("base", "c_pi", &mut tr.base.c_pi)?;
        t.get("base", "s_phi", &mut tr.base.s_phi)?;
        t.get("base", "s_pi", &mut tr.base.s_pi)?;

        let mut kind = "checkerboard".to_string();
        t.get("dataset", "kind", &mut kind)?;
        tr.dataset = match kind.as_str() {
            "checkerboard" => {
                let mut cb = CheckerboardSpec::default();
                t.get("dataset", "half_width", &mut cb.half_width)?;
                t.get("dataset", "cell_side", &mut cb.cell_side)?;
                DatasetSpec::Checkerboard(cb)
            }
            "idx_images" => {
                let mut path = String::new();
                let mut max_items = 10_000usize;
                t.get("dataset", "path", &mut path)?;
                t.get("dataset", "max_items", &mut max_items)?;
                if path.is_empty() {
                    return Err(Error::Config("[dataset] kind = idx_images needs `path`".into()));
                }
                DatasetSpec::IdxImages { path: PathBuf::from(path), max_items }
            }
            other => return Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        };
        t.get("eval", "reference_points", &mut c.reference_points)?;

        let mut arch = ArchSpec::desk(tr.grid.modes, tr.mode.out_channels());
        t.get("model", "width", &mut arch.width)?;
        t.get("model", "blocks", &mut arch.blocks)?;
        t.get("model", "kernel", &mut arch.kernel)?;
        t.get("model", "time_freqs", &mut arch.time_freqs)?;
        t.get_with("model", "activation", &mut arch.activation, |s| match s {
            "silu" => Some(Activation::Silu),
            "identity" => Some(Activation::Identity),
            _ => None,
        })?;
        t.get_with("model", "frame", &mut arch.frame, |s| match s {
            "momentum" => Some(Frame::Momentum),
            "position" => Some(Frame::Position),
            _ => None,
        })?;
        tr.arch = arch;

        let ev = &mut tr.eval;
        t.get("eval", "every", &mut ev.every)?;
        t.get("eval", "points", &mut ev.points)?;
        t.get("eval", "steps", &mut ev.steps)?;
        t.get("eval", "loss_samples", &mut ev.loss_samples)?;
        t.get_with("eval", "integrator", &mut ev.integrator, parse_integrator)?;
        t.get_with("eval", "decoder", &mut ev.decoder, parse_decoder)?;

        let s = &mut c.sample;
        t.get("sample", "n", &mut s.n)?;
        t.get("sample", "n_steps", &mut s.n_steps)?;
        t.get_with("sample", "integrator", &mut s.integrator, parse_integrator)?;
        t.get_with("sample", "decoder", &mut s.decoder, parse_decoder)?;

        let v = &mut c.verify;
        t.get_with("verify", "knorms", &mut v.knorms, parse_list)?;
        t.get("verify", "radial_samples", &mut v.radial_samples)?;
        t.get("verify", "tolerance", &mut v.tolerance)?;

        t.finish()?;
        c.train.validate()?;
        if c.sample.n_steps == 0 {
            return Err(Error::Config("[sample] n_steps must be at least 1".into()));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text form listing every key; parses back to `self`.
    pub fn to_text(&self) -> String {
        let tr = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "mode = {}", tr.mode.name());
        let _ = writeln!(s, "seed = {}", tr.seed);
        let _ = writeln!(s, "epochs = {}", tr.epochs);
        let _ = writeln!(s, "batch_size = {}", tr.batch_size);
        let _ = writeln!(s, "samples_per_epoch = {}", tr.samples_per_epoch);
        let _ = writeln!(s, "learning_rate = {:e}", tr.learning_rate);
        let _ = writeln!(s, "weight_decay = {:e}", tr.weight_decay);
        let _ = writeln!(s, "beta1 = {}", tr.beta1);
        let _ = writeln!(s, "beta2 = {}", tr.beta2);
        let _ = writeln!(s, "eps = {:e}", tr.eps);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);

        let bg = &tr.background;
        let _ = writeln!(s, "\n[background]");
        match bg.kind {
            BackgroundKind::PlanarAds { delta } => {
                let _ = writeln!(
                    s,
                    "kind = planar_ads\nd = {}\ndelta = {delta}\nr_ir = {}\nr_uv = {}",
                    bg.d, bg.r_ir, bg.r_uv
                );
            }
            BackgroundKind::Hsv { p } => {
                let _ = writeln!(s, "kind = hsv\nd = {}\np = {p}\nr_ir = {}\nr_uv = {}", bg.d, bg.r_ir, bg.r_uv);
            }
        }

        let _ =
            writeln!(s, "\n[grid]\ndim = {}\nmodes = {}\nbox_len = {}", tr.grid.dim, tr.grid.modes, tr.grid.box_len);
        let b = &tr.base;
        let _ = writeln!(s, "\n[base]\nc_phi = {}\nc_pi = {}\ns_phi = {}\ns_pi = {}", b.c_phi, b.c_pi, b.s_phi, b.s_pi);

        let _ = writeln!(s, "\n[dataset]");
        match &tr.dataset {
            DatasetSpec::Checkerboard(cb) => {
                let _ =
                    writeln!(s, "kind = checkerboard\nhalf_width = {}\ncell_side = {}", cb.half_width, cb.cell_side);
            }
            DatasetSpec::IdxImages { path, max_items } => {
                let _ = writeln!(s, "kind = idx_images\npath = {}\nmax_items = {max_items}", path.display());
            }
        }

        let a = &tr.arch;
        let _ = writeln!(
            s,
            "\n[model]\nwidth = {}\nblocks = {}\nkernel = {}\ntime_freqs = {}\nactivation = {}\nframe = {}",
            a.width,
            a.blocks,
            a.kernel,
            a.time_freqs,
            match a.activation {
                Activation::Silu => "silu",
                Activation::Identity => "identity",
            },
            match a.frame {
                Frame::Momentum => "momentum",
                Frame::Position => "position",
            }
        );

        let e = &tr.eval;
        let _ = writeln!(
            s,
            "\n[eval]\nevery = {}\npoints = {}\nsteps = {}\nintegrator = {}\ndecoder = {}\nloss_samples = {}\nreference_points = {}",
            e.every,
            e.points,
            e.steps,
            integrator_name(e.integrator),
            decoder_name(e.decoder),
            e.loss_samples,
            self.reference_points
        );
        let sm = &self.sample;
        let _ = writeln!(
            s,
            "\n[sample]\nn = {}\nn_steps = {}\nintegrator = {}\ndecoder = {}",
            sm.n,
            sm.n_steps,
            integrator_name(sm.integrator),
            decoder_name(sm.decoder)
        );
        let v = &self.verify;
        let ks: Vec<String> = v.knorms.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(
            s,
            "\n[verify]\nknorms = {}\nradial_samples = {}\ntolerance = {:e}",
            ks.join(", "),
            v.radial_samples,
            v.tolerance
        );
        s
    }
}

fn parse_background(t: &mut Table) -> Result<Background> {
    let mut kind = "planar_ads".to_string();
    t.get("background", "kind", &mut kind)?;
    let mut d = 2u32;
    t.get("background", "d", &mut d)?;
    match kind.as_str() {
        "planar_ads" => {
            let (mut delta, mut r_ir, mut r_uv) = (1.5, 0.0, 1.0);
            t.get("background", "delta", &mut delta)?;
            t.get("background", "r_ir", &mut r_ir)?;
            t.get("background", "r_uv", &mut r_uv)?;
            Background::planar_ads(d, delta, r_ir, r_uv)
        }
        "hsv" => {
            for key in ["delta", "mass_squared", "mass"] {
                if t.has("background", key) {
                    return Err(Error::Config(format!(
                        "`{key}` given for an hsv background: only the massless scalar is supported there"
                    )));
                }
            }
            let mut p = 0.5;
            t.get("background", "p", &mut p)?;
            let has_r = t.has("background", "r_ir") || t.has("background", "r_uv");
            let has_z = t.has("background", "z_ir") || t.has("background", "z_uv");
            if has_r && has_z {
                return Err(Error::Config("give either r_ir/r_uv or z_ir/z_uv for an hsv background, not both".into()));
            }
            if has_r {
                let default = Background::hsv_default(d, p)?;
                let (mut r_ir, mut r_uv) = (default.r_ir, default.r_uv);
                t.get("background", "r_ir", &mut r_ir)?;
                t.get("background", "r_uv", &mut r_uv)?;
                Background::hsv(d, p, r_ir, r_uv)
            } else {
                let (mut z_ir, mut z_uv) = (1.0, (-1.0f64).exp());
                t.get("background", "z_ir", &mut z_ir)?;
                t.get("background", "z_uv", &mut z_uv)?;
                Background::hsv_from_z(d, p, z_ir, z_uv)
            }
        }
        other => Err(Error::Config(format!("unknown background kind `{other}`"))),
    }
}
