//! Generation: integrate the learned velocity from the IR slice to the UV
//! slice and decode the terminal state.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::geometry::Background;
use crate::paths::KgCoefficients;
use crate::propagator::kappa_on_grid;
use crate::spectral::{sample_base, BaseParams, FieldState, Image, ModeGrid};
use crate::trainer::TrainMode;
use crate::velocity_model::{ModelParams, Real, STATE_CHANNELS};

/// Modes whose boundary propagator falls below this are not divided out.
pub const KAPPA_FLOOR: f64 = 1e-12;

const NET_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRun {
    pub n_steps: usize,
    pub integrator: Integrator,
    pub seed: u64,
}

impl Default for SampleRun {
    fn default() -> Self {
        SampleRun { n_steps: 100, integrator: Integrator::Rk4, seed: 0 }
    }
}

/// How a point is read off the reconstructed source |J|.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointDecoder {
    /// Per-axis circular mean of the lattice positions on the periodic box.
    CircularMean,
    /// Plain weighted centroid.
    Centroid,
}

/// A time-dependent vector field on batches of states.
pub trait VelocityField {
    fn velocity(&self, states: &[FieldState], t: f64) -> Result<Vec<FieldState>>;
}

/// dS/dt = 0.
pub struct ZeroVelocity;

impl VelocityField for ZeroVelocity {
    fn velocity(&self, states: &[FieldState], _t: f64) -> Result<Vec<FieldState>> {
        Ok(states.iter().map(|s| FieldState::zeros(s.len())).collect())
    }
}

/// The generation velocity for a training mode: the network alone for
/// `FullLinear`, otherwise δ_r V_KG plus the network residual. `params = None`
/// stands for a network that outputs zero.
pub struct FlowVelocity<'a, T> {
    pub bg: &'a Background,
    pub grid: &'a ModeGrid,
    pub mode: TrainMode,
    pub params: Option<&'a ModelParams<T>>,
}

impl<T: Real> FlowVelocity<'_, T> {
    fn network(&self, params: &ModelParams<T>, states: &[FieldState], t: f64, out: &mut [FieldState]) -> Result<()> {
        let n = self.grid.len();
        let co = params.arch.out_channels;
        for (chunk, dst) in states.chunks(NET_CHUNK).zip(out.chunks_mut(NET_CHUNK)) {
            let mut x = Vec::with_capacity(chunk.len() * STATE_CHANNELS * n);
            for s in chunk {
                x.extend(s.to_channels().into_iter().map(T::of));
            }
            let y = params.forward_batch(&x, &vec![t; chunk.len()])?;
            for (b, o) in dst.iter_mut().enumerate() {
                let base = b * co * n;
                let at = |c: usize, i: usize| y[base + c * n + i].as_f64();
                for i in 0..n {
                    if co == 4 {
                        o.phi[i] += Complex64::new(at(0, i), at(1, i));
                        o.pi[i] += Complex64::new(at(2, i), at(3, i));
                    } else {
                        o.pi[i] += Complex64::new(at(0, i), at(1, i));
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> VelocityField for FlowVelocity<'_, T> {
    fn velocity(&self, states: &[FieldState], t: f64) -> Result<Vec<FieldState>> {
        let n = self.grid.len();
        let mut out: Vec<FieldState> = states.iter().map(|_| FieldState::zeros(n)).collect();
        if self.mode.uses_backbone() {
            let coeffs = KgCoefficients::new(self.bg, self.grid, self.bg.r_of_t(t)?)?;
            for (s, o) in states.iter().zip(out.iter_mut()) {
                coeffs.apply_scaled(s, self.bg.delta_r(), o);
            }
        }
        if let Some(p) = self.params {
            if p.arch.out_channels != self.mode.out_channels() {
                return Err(shape!(
                    "{:?} needs {} network outputs, model has {}",
                    self.mode,
                    self.mode.out_channels(),
                    p.arch.out_channels
                ));
            }
            self.network(p, states, t, &mut out)?;
        }
        Ok(out)
    }
}

fn axpy(dst: &mut [FieldState], src: &[FieldState], a: f64, k: &[FieldState]) {
    for ((d, s), v) in dst.iter_mut().zip(src).zip(k) {
        for i in 0..s.len() {
            d.phi[i] = s.phi[i] + v.phi[i] * a;
            d.pi[i] = s.pi[i] + v.pi[i] * a;
        }
    }
}

fn all_finite(states: &[FieldState]) -> bool {
    states.iter().all(|s| s.phi.iter().chain(&s.pi).all(|z| z.re.is_finite() && z.im.is_finite()))
}

/// Fixed-step integration of dS/dt = v(S, t) over t ∈ [0, 1].
pub fn integrate<V: VelocityField + ?Sized>(
    field: &V,
    states: Vec<FieldState>,
    run: &SampleRun,
) -> Result<Vec<FieldState>> {
    if run.n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    let h = 1.0 / run.n_steps as f64;
    let mut s = states;
    let mut tmp = s.clone();
    for step in 0..run.n_steps {
        let t = step as f64 * h;
        match run.integrator {
            Integrator::Euler => {
                let k1 = field.velocity(&s, t)?;
                axpy(&mut tmp, &s, h, &k1);
                std::mem::swap(&mut s, &mut tmp);
            }
            Integrator::Rk4 => {
                let k1 = field.velocity(&s, t)?;
                axpy(&mut tmp, &s, h / 2.0, &k1);
                let k2 = field.velocity(&tmp, t + h / 2.0)?;
                axpy(&mut tmp, &s, h / 2.0, &k2);
                let k3 = field.velocity(&tmp, t + h / 2.0)?;
                axpy(&mut tmp, &s, h, &k3);
                let k4 = field.velocity(&tmp, t + h)?;
                for (b, st) in s.iter_mut().enumerate() {
                    for i in 0..st.len() {
                        st.phi[i] += (k1[b].phi[i] + (k2[b].phi[i] + k3[b].phi[i]) * 2.0 + k4[b].phi[i]) * (h / 6.0);
                        st.pi[i] += (k1[b].pi[i] + (k2[b].pi[i] + k3[b].pi[i]) * 2.0 + k4[b].pi[i]) * (h / 6.0);
                    }
                }
            }
        }
        if !all_finite(&s) {
            return Err(Error::Numeric(format!("non-finite state after integration step {}", step + 1)));
        }
    }
    Ok(s)
}

/// Reconstructed position-space source J on the lattice (complex).
fn reconstruct_source(grid: &ModeGrid, state: &FieldState, bg: &Background) -> Result<Vec<Complex64>> {
    state.check(grid)?;
    let kappa = kappa_on_grid(bg, grid, bg.r_uv)?;
    let mut dropped = 0;
    let j: Vec<Complex64> = state
        .phi
        .iter()
        .zip(&kappa)
        .map(|(phi, k)| {
            if k.kappa.abs() < KAPPA_FLOOR {
                dropped += 1;
                Complex64::new(0.0, 0.0)
            } else {
                phi / k.kappa
            }
        })
        .collect();
    if dropped > 0 {
        log::warn!("dropped {dropped} mode(s) with boundary propagator below {KAPPA_FLOOR:e}");
    }
    grid.inverse_transform_complex(&j)
}

/// Decode a terminal state into a point in the box.
pub fn decode_point(grid: &ModeGrid, state: &FieldState, bg: &Background, decoder: PointDecoder) -> Result<Vec<f64>> {
    let src = reconstruct_source(grid, state, bg)?;
    let weights: Vec<f64> = src.iter().map(|z| z.re.abs()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Decode(format!("reconstructed source has no usable weight (sum |J| = {total})")));
    }
    let d = grid.dim();
    let nodes: Vec<Vec<f64>> = (0..grid.len()).map(|n| grid.node_position(n)).collect();
    let mut out = vec![0.0; d];
    match decoder {
        PointDecoder::Centroid => {
            for (w, x) in weights.iter().zip(&nodes) {
                for a in 0..d {
                    out[a] += w * x[a];
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        PointDecoder::CircularMean => {
            let l = grid.box_len();
            for (a, o) in out.iter_mut().enumerate() {
                let (mut s, mut c) = (0.0, 0.0);
                for (w, x) in weights.iter().zip(&nodes) {
                    let th = 2.0 * PI * x[a] / l;
                    s += w * th.sin();
                    c += w * th.cos();
                }
                *o = s.atan2(c) * l / (2.0 * PI);
            }
        }
    }
    Ok(out)
}

/// Decode a terminal state into a K×K intensity map clipped to [0, 1].
pub fn decode_image(grid: &ModeGrid, state: &FieldState, bg: &Background) -> Result<Image> {
    if grid.dim() != 2 {
        return Err(shape!("images need a 2-d grid, got d={}", grid.dim()));
    }
    let src = reconstruct_source(grid, state, bg)?;
    if src.iter().any(|z| !z.re.is_finite()) {
        return Err(Error::Decode("reconstructed source is not finite".into()));
    }
    Image::new(grid.modes_per_axis(), src.iter().map(|z| z.re.clamp(0.0, 1.0)).collect())
}

/// Draw `n` base states and integrate them to t = 1.
pub fn generate_states<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    grid: &ModeGrid,
    base: &BaseParams,
    n: usize,
    run: &SampleRun,
    rng: &mut R,
) -> Result<Vec<FieldState>> {
    let s0 = (0..n).map(|_| sample_base(grid, base, rng)).collect::<Result<Vec<_>>>()?;
    integrate(field, s0, run)
}

/// Points CSV: header `x,y`, one row per point.
pub fn write_points_csv<W: Write>(mut w: W, points: &[[f64; 2]]) -> Result<()> {
    writeln!(w, "x,y")?;
    for p in points {
        writeln!(w, "{},{}", p[0], p[1])?;
    }
    Ok(())
}

pub fn read_points_csv<R: BufRead>(r: R) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if i == 0 {
            if trimmed != "x,y" {
                return Err(Error::Format(format!("line 1: expected header `x,y`, got `{trimmed}`")));
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Format(format!("line {lineno}: expected 2 fields, got {}", fields.len())));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Format(format!("line {lineno}: `{s}` is not a number")))
        };
        out.push([parse(fields[0])?, parse(fields[1])?]);
    }
    Ok(out)
}

/// Binary PGM (P5), maxval 255, value = round(255·pixel).
pub fn write_pgm<W: Write>(mut w: W, image: &Image) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", image.side, image.side)?;
    let bytes: Vec<u8> = image.pixels.iter().map(|p| (255.0 * p.clamp(0.0, 1.0)).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("PGM header truncated at byte offset {start}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::Format(format!("PGM magic must be P5, got `{magic}`")));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header value `{s}`")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if w != h {
        return Err(Error::Format(format!("PGM image must be square, got {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("PGM maxval must be in 1..=255, got {maxval}")));
    }
    let data_start = pos + 1;
    let need = w * h;
    let data = bytes.get(data_start..data_start + need).ok_or_else(|| {
        Error::Format(format!(
            "PGM payload truncated: missing {} byte(s)",
            need - bytes.len().saturating_sub(data_start).min(need)
        ))
    })?;
    Image::new(w, data.iter().map(|&b| b as f64 / maxval as f64).collect())
}
