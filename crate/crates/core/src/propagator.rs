//! Closed-form mode coefficients of the bulk-to-boundary propagator.
//!
//! Planar AdS, stabilised field (ν = Δ − d/2, x = |k| e^{−r}):
//!   κ̃(r)      = (2/Γ(ν)) (x/2)^ν K_ν(x)
//!   dκ̃/dr(r)  = (4/Γ(ν)) (x/2)^{ν+1} K_{ν−1}(x)
//!
//! Massless scalar on HSV (z = (pr)^{1/p}, y = z|k|, β = (1 + (d−1)(1−p))/2):
//!   κ(r)      = y^β K_β(y) / (2^{β−1} Γ(β))
//!   dκ/dr(r)  = −y^{β+1} K_{β−1}(y) / (2^{β−1} Γ(β) p r)

use crate::error::{domain, shape, Result};
use crate::geometry::{Background, BackgroundKind};
use crate::specfun::{bessel_k_scaled, gamma};
use crate::spectral::{BoundarySource, FieldState, ModeGrid};

/// Propagator mode coefficient and its radial derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagatorEval {
    pub kappa: f64,
    pub dkappa_dr: f64,
}

impl PropagatorEval {
    const SOURCE: PropagatorEval = PropagatorEval { kappa: 1.0, dkappa_dr: 0.0 };
}

/// ln(e^x K_|ν|(x)).
fn ln_k_scaled(nu: f64, x: f64) -> f64 {
    bessel_k_scaled(nu.abs(), x).expect("arguments validated by caller").ln()
}

/// (a/Γ(ν)) (x/2)^power K_order(x), evaluated in log space.
fn scaled_power_bessel(prefactor: f64, ln_gamma: f64, power: f64, order: f64, x: f64) -> f64 {
    let ln = prefactor.ln() - ln_gamma + power * (0.5 * x).ln() + ln_k_scaled(order, x) - x;
    ln.exp()
}

/// κ̃_{|k|}(r) and dκ̃/dr for the stabilised planar-AdS field.
pub fn kappa_ads(bg: &Background, knorm: f64, r: f64) -> Result<PropagatorEval> {
    let BackgroundKind::PlanarAds { delta } = bg.kind else {
        return Err(domain!("kappa_ads called on a non-AdS background"));
    };
    let nu = delta - bg.d as f64 / 2.0;
    if !(nu > 0.0) {
        return Err(domain!("kappa_ads needs nu = delta - d/2 > 0, got {nu}"));
    }
    if !(knorm >= 0.0) || !r.is_finite() {
        return Err(domain!("kappa_ads needs |k| >= 0 and finite r (|k|={knorm}, r={r})"));
    }
    if knorm == 0.0 {
        return Ok(PropagatorEval::SOURCE);
    }
    let x = knorm * (-r).exp();
    let lg = gamma(nu)?.ln();
    Ok(PropagatorEval {
        kappa: scaled_power_bessel(2.0, lg, nu, nu, x),
        dkappa_dr: scaled_power_bessel(4.0, lg, nu + 1.0, nu - 1.0, x),
    })
}

/// κ_{|k|}(r) and dκ/dr for the massless scalar on an HSV background.
pub fn kappa_hsv(bg: &Background, knorm: f64, r: f64) -> Result<PropagatorEval> {
    let BackgroundKind::Hsv { p } = bg.kind else {
        return Err(domain!("kappa_hsv called on a non-HSV background"));
    };
    if !(r > 0.0) || !r.is_finite() {
        return Err(domain!("HSV propagator needs r > 0, got {r}"));
    }
    if !(knorm >= 0.0) {
        return Err(domain!("kappa_hsv needs |k| >= 0, got {knorm}"));
    }
    if knorm == 0.0 {
        return Ok(PropagatorEval::SOURCE);
    }
    let d = bg.d as f64;
    let beta = (1.0 + (d - 1.0) * (1.0 - p)) / 2.0;
    let z = (p * r).powf(1.0 / p);
    let y = z * knorm;
    // ln normalisation: (β−1) ln 2 + ln Γ(β)
    let ln_norm = (beta - 1.0) * std::f64::consts::LN_2 + gamma(beta)?.ln();
    let kappa = (beta * y.ln() + ln_k_scaled(beta, y) - y - ln_norm).exp();
    let dk = -((beta + 1.0) * y.ln() + ln_k_scaled(beta - 1.0, y) - y - ln_norm).exp() / (p * r);
    Ok(PropagatorEval { kappa, dkappa_dr: dk })
}

/// Dispatch on the background kind.
pub fn kappa(bg: &Background, knorm: f64, r: f64) -> Result<PropagatorEval> {
    match bg.kind {
        BackgroundKind::PlanarAds { .. } => kappa_ads(bg, knorm, r),
        BackgroundKind::Hsv { .. } => kappa_hsv(bg, knorm, r),
    }
}

/// Per-mode propagator values over a grid at radius r.
pub fn kappa_on_grid(bg: &Background, grid: &ModeGrid, r: f64) -> Result<Vec<PropagatorEval>> {
    grid.knorm().iter().map(|&kn| kappa(bg, kn, r)).collect()
}

/// Encoded training endpoint S₁ at r_UV: φ_k = j_k κ(r_UV), π_k = j_k ∂_r κ(r_UV).
pub fn boundary_data(bg: &Background, grid: &ModeGrid, source: &BoundarySource) -> Result<FieldState> {
    boundary_data_at(bg, grid, source, bg.r_uv)
}

/// Same as [`boundary_data`] but at an arbitrary radius.
pub fn boundary_data_at(bg: &Background, grid: &ModeGrid, source: &BoundarySource, r: f64) -> Result<FieldState> {
    if source.j.len() != grid.len() {
        return Err(shape!("source has {} modes, grid has {}", source.j.len(), grid.len()));
    }
    let kap = kappa_on_grid(bg, grid, r)?;
    Ok(FieldState {
        phi: source.j.iter().zip(&kap).map(|(j, k)| j * k.kappa).collect(),
        pi: source.j.iter().zip(&kap).map(|(j, k)| j * k.dkappa_dr).collect(),
    })
}

/// Right-hand side of dπ/dr for a single mode of the first-order KG system.
pub(crate) fn dpi_dr(bg: &Background, knorm: f64, r: f64, phi: f64, pi: f64) -> Result<f64> {
    let k2 = knorm * knorm;
    match bg.kind {
        BackgroundKind::PlanarAds { delta } => Ok(k2 * (-2.0 * r).exp() * phi - (2.0 * delta - bg.d as f64) * pi),
        BackgroundKind::Hsv { p } => {
            if !(r > 0.0) {
                return Err(domain!("HSV Klein-Gordon system is singular at r <= 0 (r={r})"));
            }
            let gamma = 1.0 / p - 1.0;
            Ok((p * r).powf(2.0 * gamma) * k2 * phi + bg.d as f64 * gamma / r * pi)
        }
    }
}

fn five_point(f: impl Fn(f64) -> Result<f64>, r: f64, h: f64) -> Result<f64> {
    Ok((-f(r + 2.0 * h)? + 8.0 * f(r + h)? - 8.0 * f(r - h)? + f(r - 2.0 * h)?) / (12.0 * h))
}

/// Plug the closed-form (κ, ∂_r κ) into the first-order Klein–Gordon system
/// and return the largest relative residual over `r_samples`, taking the
/// radial derivatives with O(h⁴) central differences.
///
/// Both equations are checked: dφ/dr = π and dπ/dr = RHS(φ, π). Residuals
/// are scaled by max(|RHS|, |κ|, |∂_r κ|).
pub fn verify_mode_ode(bg: &Background, knorm: f64, r_samples: &[f64]) -> Result<f64> {
    let span = (bg.r_uv - bg.r_ir).abs();
    let h = 1e-3 * span.max(1e-3);
    let mut worst: f64 = 0.0;
    for &r in r_samples {
        let lo = bg.r_ir.min(bg.r_uv);
        let hi = bg.r_ir.max(bg.r_uv);
        if !(r >= lo - 1e-12 && r <= hi + 1e-12) {
            return Err(domain!("sample r={r} outside cutoffs [{lo}, {hi}]"));
        }
        let ev = kappa(bg, knorm, r)?;
        let dphi = five_point(|s| Ok(kappa(bg, knorm, s)?.kappa), r, h)?;
        let dpi = five_point(|s| Ok(kappa(bg, knorm, s)?.dkappa_dr), r, h)?;
        let rhs = dpi_dr(bg, knorm, r, ev.kappa, ev.dkappa_dr)?;
        let scale = rhs.abs().max(ev.kappa.abs()).max(ev.dkappa_dr.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max((dphi - ev.dkappa_dr).abs() / scale);
        worst = worst.max((dpi - rhs).abs() / scale);
    }
    Ok(worst)
}

/// Evenly spaced radii spanning the cutoff interval.
pub fn radial_samples(bg: &Background, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![bg.r_ir];
    }
    (0..n).map(|i| bg.r_of_t_unchecked(i as f64 / (n - 1) as f64)).collect()
}
