//! Discretised momentum lattice, source transforms and the base distribution.
//!
//! Modes are labelled by integer vectors m ∈ {−K/2, …, K/2−1}^d with
//! k = 2πm/L and stored row-major (first axis slowest). The position lattice
//! is cell-centred: x_n = −L/2 + (n + ½)Δx with Δx = L/K, in the same layout.
//!
//! Forward transform of a source sampled on the lattice:
//!   j_k = Δx^d (2π)^{−d/2} Σ_n e^{i k·x_n} J(x_n)
//! and its inverse:
//!   J(x_n) = (2π)^{d/2} L^{−d} Σ_k e^{−i k·x_n} j_k.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::geometry::Background;

/// The finite momentum lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeGrid {
    d: usize,
    k: usize,
    box_len: f64,
    /// Integer mode labels, `d` entries per mode.
    mvecs: Vec<i64>,
    /// Momentum components, `d` entries per mode.
    kvecs: Vec<f64>,
    knorm: Vec<f64>,
    /// e^{i k_m x_n} per axis, indexed `[m_idx * K + n_idx]`.
    axis_phase: Vec<Complex64>,
}

impl ModeGrid {
    pub fn new(d: usize, k: usize, box_len: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("grid dimension must be at least 1".into()));
        }
        if k == 0 || k % 2 != 0 {
            return Err(Error::Config(format!("modes per axis K must be even and positive, got {k}")));
        }
        if !(box_len > 0.0 && box_len.is_finite()) {
            return Err(Error::Config(format!("box side L must be positive, got {box_len}")));
        }
        let n_modes = k.pow(d as u32);
        let half = (k / 2) as i64;
        let mut mvecs = Vec::with_capacity(n_modes * d);
        let mut kvecs = Vec::with_capacity(n_modes * d);
        let mut knorm = Vec::with_capacity(n_modes);
        for idx in 0..n_modes {
            let mut rem = idx;
            let mut label = vec![0i64; d];
            for axis in (0..d).rev() {
                label[axis] = (rem % k) as i64 - half;
                rem /= k;
            }
            let mut sq = 0.0;
            for &m in &label {
                let kc = 2.0 * PI * m as f64 / box_len;
                kvecs.push(kc);
                sq += kc * kc;
            }
            mvecs.extend_from_slice(&label);
            knorm.push(sq.sqrt());
        }
        let dx = box_len / k as f64;
        let mut axis_phase = Vec::with_capacity(k * k);
        for mi in 0..k {
            let kc = 2.0 * PI * (mi as i64 - half) as f64 / box_len;
            for ni in 0..k {
                let x = -box_len / 2.0 + (ni as f64 + 0.5) * dx;
                axis_phase.push(Complex64::from_polar(1.0, kc * x));
            }
        }
        Ok(ModeGrid { d, k, box_len, mvecs, kvecs, knorm, axis_phase })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Modes per axis.
    pub fn modes_per_axis(&self) -> usize {
        self.k
    }

    pub fn box_len(&self) -> f64 {
        self.box_len
    }

    /// Δx = L / K.
    pub fn spacing(&self) -> f64 {
        self.box_len / self.k as f64
    }

    pub fn len(&self) -> usize {
        self.knorm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knorm.is_empty()
    }

    pub fn mode(&self, idx: usize) -> &[i64] {
        &self.mvecs[idx * self.d..(idx + 1) * self.d]
    }

    pub fn momentum(&self, idx: usize) -> &[f64] {
        &self.kvecs[idx * self.d..(idx + 1) * self.d]
    }

    pub fn knorm(&self) -> &[f64] {
        &self.knorm
    }

    /// Flat index of an integer mode label, if it lies on the grid.
    pub fn index_of(&self, m: &[i64]) -> Option<usize> {
        if m.len() != self.d {
            return None;
        }
        let half = (self.k / 2) as i64;
        let mut idx = 0usize;
        for &c in m {
            if c < -half || c >= half {
                return None;
            }
            idx = idx * self.k + (c + half) as usize;
        }
        Some(idx)
    }

    /// Index of the zero mode.
    pub fn zero_index(&self) -> usize {
        self.index_of(&vec![0; self.d]).expect("zero mode is always on the grid")
    }

    /// Position of lattice node `n` (same row-major layout as the modes).
    pub fn node_position(&self, n: usize) -> Vec<f64> {
        let mut rem = n;
        let mut pos = vec![0.0; self.d];
        let dx = self.spacing();
        for axis in (0..self.d).rev() {
            pos[axis] = -self.box_len / 2.0 + ((rem % self.k) as f64 + 0.5) * dx;
            rem /= self.k;
        }
        pos
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(shape!("{what} has {len} entries, grid has {} modes", self.len()));
        }
        Ok(())
    }

    /// Separable multi-dimensional transform: out_m = Σ_n Π_a w(m_a, n_a) in_n,
    /// with w = e^{±i k x} chosen by `sign`.
    fn separable(&self, input: &[Complex64], sign: f64) -> Vec<Complex64> {
        let k = self.k;
        let mut buf = input.to_vec();
        let mut scratch = vec![Complex64::new(0.0, 0.0); k];
        // stride of axis a in row-major layout
        for axis in 0..self.d {
            let stride = k.pow((self.d - 1 - axis) as u32);
            let outer = self.len() / (k * stride);
            for o in 0..outer {
                for inner in 0..stride {
                    let base = o * k * stride + inner;
                    for (mi, s) in scratch.iter_mut().enumerate() {
                        let row = &self.axis_phase[mi * k..(mi + 1) * k];
                        let mut acc = Complex64::new(0.0, 0.0);
                        for (ni, w) in row.iter().enumerate() {
                            let w = if sign > 0.0 { *w } else { w.conj() };
                            acc += w * buf[base + ni * stride];
                        }
                        *s = acc;
                    }
                    for (mi, s) in scratch.iter().enumerate() {
                        buf[base + mi * stride] = *s;
                    }
                }
            }
        }
        buf
    }

    /// Transform a position-lattice field to mode coefficients (forward normalisation).
    pub fn forward_transform(&self, field: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len("position field", field.len())?;
        let norm = self.spacing().powi(self.d as i32) * (2.0 * PI).powf(-(self.d as f64) / 2.0);
        let mut out = self.separable(field, 1.0);
        out.iter_mut().for_each(|v| *v *= norm);
        Ok(out)
    }

    /// Complex position-space reconstruction of mode coefficients.
    pub fn inverse_transform_complex(&self, modes: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len("mode array", modes.len())?;
        let norm = (2.0 * PI).powf(self.d as f64 / 2.0) * self.box_len.powi(-(self.d as i32));
        // Σ_m e^{−i k_m x_n} c_m: transpose of the forward kernel, conjugated
        let k = self.k;
        let mut buf = modes.to_vec();
        let mut scratch = vec![Complex64::new(0.0, 0.0); k];
        for axis in 0..self.d {
            let stride = k.pow((self.d - 1 - axis) as u32);
            let outer = self.len() / (k * stride);
            for o in 0..outer {
                for inner in 0..stride {
                    let base = o * k * stride + inner;
                    for (ni, s) in scratch.iter_mut().enumerate() {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for mi in 0..k {
                            acc += self.axis_phase[mi * k + ni].conj() * buf[base + mi * stride];
                        }
                        *s = acc;
                    }
                    for (ni, s) in scratch.iter().enumerate() {
                        buf[base + ni * stride] = *s;
                    }
                }
            }
        }
        buf.iter_mut().for_each(|v| *v *= norm);
        Ok(buf)
    }
}

/// Square image of intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(shape!("image of side {side} needs {} pixels, got {}", side * side, pixels.len()));
        }
        Ok(Image { side, pixels })
    }

    pub fn zeros(side: usize) -> Self {
        Image { side, pixels: vec![0.0; side * side] }
    }
}

/// A phase-space point: mode coefficients of the (stabilised) field and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub phi: Vec<Complex64>,
    pub pi: Vec<Complex64>,
}

impl FieldState {
    pub fn zeros(n: usize) -> Self {
        FieldState { phi: vec![Complex64::new(0.0, 0.0); n], pi: vec![Complex64::new(0.0, 0.0); n] }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn check(&self, grid: &ModeGrid) -> Result<()> {
        grid.check_len("phi", self.phi.len())?;
        grid.check_len("pi", self.pi.len())
    }

    /// Channel layout [Re φ̃, Im φ̃, Re π̃, Im π̃], each row-major over modes.
    pub fn to_channels(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; 4 * n];
        for i in 0..n {
            out[i] = self.phi[i].re;
            out[n + i] = self.phi[i].im;
            out[2 * n + i] = self.pi[i].re;
            out[3 * n + i] = self.pi[i].im;
        }
        out
    }

    pub fn from_channels(ch: &[f64], n: usize) -> Result<Self> {
        if ch.len() != 4 * n {
            return Err(shape!("expected {} channel values, got {}", 4 * n, ch.len()));
        }
        let phi = (0..n).map(|i| Complex64::new(ch[i], ch[n + i])).collect();
        let pi = (0..n).map(|i| Complex64::new(ch[2 * n + i], ch[3 * n + i])).collect();
        Ok(FieldState { phi, pi })
    }
}

/// Mode coefficients j_k of a boundary source.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySource {
    pub j: Vec<Complex64>,
}

/// δ source at `x_star`: j_k = e^{i k·x*} / (2π)^{d/2}.
pub fn encode_point(grid: &ModeGrid, x_star: &[f64]) -> Result<BoundarySource> {
    if x_star.len() != grid.dim() {
        return Err(shape!("point has {} coordinates, grid has d={}", x_star.len(), grid.dim()));
    }
    let half = grid.box_len() / 2.0;
    if let Some(c) = x_star.iter().find(|c| !(**c >= -half && **c < half)) {
        return Err(domain!("point coordinate {c} outside the box [-{half}, {half})"));
    }
    let norm = (2.0 * PI).powf(-(grid.dim() as f64) / 2.0);
    let j = (0..grid.len())
        .map(|i| {
            let phase: f64 = grid.momentum(i).iter().zip(x_star).map(|(k, x)| k * x).sum();
            Complex64::from_polar(norm, phase)
        })
        .collect();
    Ok(BoundarySource { j })
}

/// Source given by pixel intensities on the cell-centred lattice (one pixel per node).
pub fn encode_image(grid: &ModeGrid, image: &Image) -> Result<BoundarySource> {
    if grid.dim() != 2 {
        return Err(Error::Config(format!("image encoding needs a d=2 grid, got d={}", grid.dim())));
    }
    if image.side != grid.modes_per_axis() {
        return Err(shape!("image side {} must equal modes per axis K={}", image.side, grid.modes_per_axis()));
    }
    encode_field(grid, &image.pixels)
}

/// Forward transform of a real lattice field of any dimension.
pub fn encode_field(grid: &ModeGrid, field: &[f64]) -> Result<BoundarySource> {
    let c: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    Ok(BoundarySource { j: grid.forward_transform(&c)? })
}

/// Real part of the position-space source on the lattice.
pub fn inverse_transform(grid: &ModeGrid, source: &BoundarySource) -> Result<Vec<f64>> {
    Ok(grid.inverse_transform_complex(&source.j)?.into_iter().map(|v| v.re).collect())
}

/// Variance parameters of the base distribution, σ² = c (1 + |k|²)^{−s}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub c_phi: f64,
    pub c_pi: f64,
    pub s_phi: f64,
    pub s_pi: f64,
}

impl Default for BaseParams {
    fn default() -> Self {
        BaseParams { c_phi: 1.0, c_pi: 0.55, s_phi: 1.0, s_pi: 1.0 }
    }
}

impl BaseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_phi > 0.0 && self.c_pi > 0.0) {
            return Err(Error::Config(format!(
                "base variances must be positive, got c_phi={}, c_pi={}",
                self.c_phi, self.c_pi
            )));
        }
        if !(self.s_phi.is_finite() && self.s_pi.is_finite()) {
            return Err(Error::Config("base spectral exponents must be finite".into()));
        }
        Ok(())
    }

    pub fn phi_variance(&self, knorm: f64) -> f64 {
        self.c_phi * (1.0 + knorm * knorm).powf(-self.s_phi)
    }

    pub fn pi_variance(&self, knorm: f64) -> f64 {
        self.c_pi * (1.0 + knorm * knorm).powf(-self.s_pi)
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64, real_only: bool) -> Complex64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    if real_only {
        Complex64::new(a * var.sqrt(), 0.0)
    } else {
        let s = (var / 2.0).sqrt();
        Complex64::new(a * s, b * s)
    }
}

/// Draw S₀ from the per-mode Gaussian base. Real and imaginary parts each carry
/// σ²/2 so E|z|² = σ²; the zero mode is real with variance σ².
pub fn sample_base<R: Rng + ?Sized>(grid: &ModeGrid, params: &BaseParams, rng: &mut R) -> Result<FieldState> {
    params.validate()?;
    let zero = grid.zero_index();
    let n = grid.len();
    let mut st = FieldState::zeros(n);
    for i in 0..n {
        let kn = grid.knorm()[i];
        st.phi[i] = complex_gaussian(rng, params.phi_variance(kn), i == zero);
    }
    for i in 0..n {
        let kn = grid.knorm()[i];
        st.pi[i] = complex_gaussian(rng, params.pi_variance(kn), i == zero);
    }
    Ok(st)
}

/// Σ_k f(r)^d (|a^φ_k|² + |a^π_k|²).
pub fn weighted_norm_sq(bg: &Background, r: f64, phi: &[Complex64], pi: &[Complex64]) -> Result<f64> {
    if phi.len() != pi.len() {
        return Err(shape!("phi has {} entries, pi has {}", phi.len(), pi.len()));
    }
    let w = bg.warp(r)?.powi(bg.d as i32);
    let s: f64 = phi.iter().chain(pi).map(|z| z.norm_sqr()).sum();
    Ok(w * s)
}
