//! Interpolating paths between base and data states, their t-velocities, and
//! the Klein–Gordon backbone used by the residual losses.
//!
//! Every velocity here is a d/dt quantity. Along the flow r(t) = r_IR + δ_r t,
//! so a radial derivative enters with a factor δ_r.

use num_complex::Complex64;

use crate::error::{domain, shape, Error, Result};
use crate::geometry::{Background, BackgroundKind};
use crate::spectral::{FieldState, ModeGrid};

/// Which interpolant produced a [`PathTarget`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Linear,
    Hermite,
}

/// One point on a training path together with the velocities the network is
/// regressed against.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTarget {
    pub kind: PathKind,
    pub t: f64,
    pub r: f64,
    /// S_t.
    pub state: FieldState,
    /// U_t = dS_t/dt.
    pub target_velocity: FieldState,
    /// δ_r V_KG(S_t, r(t)).
    pub backbone: FieldState,
}

/// Per-mode coefficients of the first-order system at fixed r:
/// dφ/dr = π, dπ/dr = a_k φ + b π.
#[derive(Debug, Clone)]
pub(crate) struct KgCoefficients {
    pub(crate) mass_term: Vec<f64>,
    pub(crate) friction: f64,
}

impl KgCoefficients {
    pub(crate) fn new(bg: &Background, grid: &ModeGrid, r: f64) -> Result<Self> {
        let (scale, friction) = match bg.kind {
            BackgroundKind::PlanarAds { delta } => ((-2.0 * r).exp(), -(2.0 * delta - bg.d as f64)),
            BackgroundKind::Hsv { p } => {
                if !(r > 0.0) {
                    return Err(domain!("HSV Klein-Gordon system is singular at r <= 0 (r={r})"));
                }
                let gamma = 1.0 / p - 1.0;
                ((p * r).powf(2.0 * gamma), bg.d as f64 * gamma / r)
            }
        };
        let mass_term = grid.knorm().iter().map(|k| k * k * scale).collect();
        Ok(KgCoefficients { mass_term, friction })
    }

    /// Writes scale·V_KG(state) into `out`.
    pub(crate) fn apply_scaled(&self, state: &FieldState, scale: f64, out: &mut FieldState) {
        for i in 0..state.len() {
            let (phi, pi) = (state.phi[i], state.pi[i]);
            out.phi[i] = pi * scale;
            out.pi[i] = (phi * self.mass_term[i] + pi * self.friction) * scale;
        }
    }
}

/// Right-hand side of the first-order Klein–Gordon system, as a radial
/// derivative (dφ/dr, dπ/dr).
pub fn kg_velocity(bg: &Background, grid: &ModeGrid, state: &FieldState, r: f64) -> Result<FieldState> {
    state.check(grid)?;
    let coeffs = KgCoefficients::new(bg, grid, r)?;
    let mut out = FieldState::zeros(grid.len());
    coeffs.apply_scaled(state, 1.0, &mut out);
    Ok(out)
}

fn check_endpoints(grid: &ModeGrid, s0: &FieldState, s1: &FieldState, t: f64) -> Result<()> {
    s0.check(grid)?;
    s1.check(grid)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(domain!("path time t={t} outside [0, 1]"));
    }
    Ok(())
}

fn backbone(bg: &Background, grid: &ModeGrid, state: &FieldState, r: f64) -> Result<FieldState> {
    let coeffs = KgCoefficients::new(bg, grid, r)?;
    let mut out = FieldState::zeros(grid.len());
    coeffs.apply_scaled(state, bg.delta_r(), &mut out);
    Ok(out)
}

/// S_t = (1−t)S₀ + tS₁ with U_t = S₁ − S₀.
pub fn linear_path(bg: &Background, grid: &ModeGrid, s0: &FieldState, s1: &FieldState, t: f64) -> Result<PathTarget> {
    check_endpoints(grid, s0, s1, t)?;
    let lerp = |a: &[Complex64], b: &[Complex64]| -> Vec<Complex64> {
        a.iter().zip(b).map(|(x, y)| x * (1.0 - t) + y * t).collect()
    };
    let diff = |a: &[Complex64], b: &[Complex64]| -> Vec<Complex64> { a.iter().zip(b).map(|(x, y)| y - x).collect() };
    let state = FieldState { phi: lerp(&s0.phi, &s1.phi), pi: lerp(&s0.pi, &s1.pi) };
    let target_velocity = FieldState { phi: diff(&s0.phi, &s1.phi), pi: diff(&s0.pi, &s1.pi) };
    let r = bg.r_of_t(t)?;
    let backbone = backbone(bg, grid, &state, r)?;
    Ok(PathTarget { kind: PathKind::Linear, t, r, state, target_velocity, backbone })
}

/// Cubic Hermite basis (H₀₀, H₀₁, H₁₀, H₁₁) and its first two u-derivatives.
pub fn hermite_basis(u: f64) -> [[f64; 4]; 3] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        [2.0 * u3 - 3.0 * u2 + 1.0, -2.0 * u3 + 3.0 * u2, u3 - 2.0 * u2 + u, u3 - u2],
        [6.0 * u2 - 6.0 * u, -6.0 * u2 + 6.0 * u, 3.0 * u2 - 4.0 * u + 1.0, 3.0 * u2 - 2.0 * u],
        [12.0 * u - 6.0, -12.0 * u + 6.0, 6.0 * u - 4.0, 6.0 * u - 2.0],
    ]
}

/// Cubic Hermite interpolant in the affine parameter u(r). Φ matches the
/// endpoint values and its radial slopes match Π₀, Π₁; the state's momentum is
/// Π_t = (du/dr) ∂_uΦ so the path satisfies dφ/dr = π exactly.
pub fn hermite_path(bg: &Background, grid: &ModeGrid, s0: &FieldState, s1: &FieldState, t: f64) -> Result<PathTarget> {
    check_endpoints(grid, s0, s1, t)?;
    let r = bg.r_of_t(t)?;
    let u = match t {
        0.0 => 0.0,
        1.0 => 1.0,
        _ => bg.u_of_r(r)?,
    };
    let (du, d2u) = bg.du_dr_and_d2u_dr2(r)?;
    let (du_ir, _) = bg.du_dr_and_d2u_dr2(bg.r_ir)?;
    let (du_uv, _) = bg.du_dr_and_d2u_dr2(bg.r_uv)?;
    let [h, hu, huu] = hermite_basis(u);
    let dr = bg.delta_r();

    let n = grid.len();
    let mut state = FieldState::zeros(n);
    let mut vel = FieldState::zeros(n);
    for i in 0..n {
        let (p0, p1) = (s0.phi[i], s1.phi[i]);
        let m0 = s0.pi[i] / du_ir;
        let m1 = s1.pi[i] / du_uv;
        let comb = |c: &[f64; 4]| p0 * c[0] + p1 * c[1] + m0 * c[2] + m1 * c[3];
        let phi_u = comb(&hu);
        let pi_t = phi_u * du;
        state.phi[i] = comb(&h);
        state.pi[i] = pi_t;
        vel.phi[i] = pi_t * dr;
        vel.pi[i] = (comb(&huu) * (du * du) + phi_u * d2u) * dr;
    }
    // Endpoints are reproduced from the inputs directly so S₀ and S₁ are exact.
    if t == 0.0 {
        state = s0.clone();
    } else if t == 1.0 {
        state = s1.clone();
    }
    let backbone = backbone(bg, grid, &state, r)?;
    // dφ/dt and the backbone's φ-component are both δ_r π_t
    vel.phi.clone_from(&backbone.phi);
    Ok(PathTarget { kind: PathKind::Hermite, t, r, state, target_velocity: vel, backbone })
}

/// U_t − δ_r V_KG(S_t, r(t)). For Hermite paths the φ-component vanishes
/// identically; a nonzero value is reported as a numeric error.
pub fn residual_target(path: &PathTarget) -> Result<FieldState> {
    let u = &path.target_velocity;
    let b = &path.backbone;
    if u.len() != b.len() {
        return Err(shape!("velocity has {} modes, backbone has {}", u.len(), b.len()));
    }
    let sub = |x: &[Complex64], y: &[Complex64]| -> Vec<Complex64> { x.iter().zip(y).map(|(a, c)| a - c).collect() };
    let res = FieldState { phi: sub(&u.phi, &b.phi), pi: sub(&u.pi, &b.pi) };
    if path.kind == PathKind::Hermite {
        let worst = res.phi.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if worst > 1e-10 {
            return Err(Error::Numeric(format!("Hermite residual has nonzero field component ({worst:e})")));
        }
    }
    Ok(res)
}
