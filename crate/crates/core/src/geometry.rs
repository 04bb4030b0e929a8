//! Warped backgrounds ds² = dr² + f(r)² dx², the compact flow time t ↔ r map,
//! and the volume-weighted affine parameter u(r) used by the Hermite path.
//!
//! All lengths are in units of the curvature radius.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Geometry family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundKind {
    /// Planar AdS, f(r) = e^r, scalar of scaling dimension `delta`.
    PlanarAds { delta: f64 },
    /// Hyperscaling-violating metric, f(r) = (p r)^{−γ}, γ = 1/p − 1, massless scalar.
    Hsv { p: f64 },
}

/// A background geometry with its radial cutoffs.
///
/// The flow runs from `r_ir` (t = 0) to `r_uv` (t = 1). For planar AdS the
/// boundary is at r → ∞ so `r_uv > r_ir`; for HSV the boundary sits at r = 0
/// and `r_uv < r_ir`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub kind: BackgroundKind,
    pub d: u32,
    pub r_ir: f64,
    pub r_uv: f64,
}

impl Background {
    pub fn planar_ads(d: u32, delta: f64, r_ir: f64, r_uv: f64) -> Result<Self> {
        let bg = Background { kind: BackgroundKind::PlanarAds { delta }, d, r_ir, r_uv };
        bg.validate()?;
        Ok(bg)
    }

    /// HSV background with explicit r-cutoffs.
    pub fn hsv(d: u32, p: f64, r_ir: f64, r_uv: f64) -> Result<Self> {
        let bg = Background { kind: BackgroundKind::Hsv { p }, d, r_ir, r_uv };
        bg.validate()?;
        Ok(bg)
    }

    /// HSV background with cutoffs given in the z coordinate, converted with r = z^p / p.
    pub fn hsv_from_z(d: u32, p: f64, z_ir: f64, z_uv: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(domain!("HSV exponent p must lie in (0, 1], got {p}"));
        }
        if !(z_ir > 0.0 && z_uv > 0.0) {
            return Err(domain!("HSV z cutoffs must be positive, got z_ir={z_ir}, z_uv={z_uv}"));
        }
        Self::hsv(d, p, z_ir.powf(p) / p, z_uv.powf(p) / p)
    }

    /// The default HSV cutoffs z_IR = 1, z_UV = 1/e.
    pub fn hsv_default(d: u32, p: f64) -> Result<Self> {
        Self::hsv_from_z(d, p, 1.0, (-1.0f64).exp())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("boundary dimension d must be at least 1".into()));
        }
        if !(self.r_ir.is_finite() && self.r_uv.is_finite()) {
            return Err(Error::Config("radial cutoffs must be finite".into()));
        }
        match self.kind {
            BackgroundKind::PlanarAds { delta } => {
                let half = self.d as f64 / 2.0;
                if !(delta > half) {
                    return Err(Error::Config(format!(
                        "planar AdS needs delta > d/2 (standard quantization); got delta={delta}, d={}",
                        self.d
                    )));
                }
                if !(self.r_uv > self.r_ir) {
                    return Err(Error::Config(format!(
                        "planar AdS needs r_uv > r_ir; got r_ir={}, r_uv={}",
                        self.r_ir, self.r_uv
                    )));
                }
            }
            BackgroundKind::Hsv { p } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::Config(format!("HSV exponent p must lie in (0, 1], got {p}")));
                }
                if !(self.r_uv > 0.0 && self.r_uv < self.r_ir) {
                    return Err(Error::Config(format!(
                        "HSV needs 0 < r_uv < r_ir; got r_ir={}, r_uv={}",
                        self.r_ir, self.r_uv
                    )));
                }
            }
        }
        Ok(())
    }

    /// Scaling dimension for planar AdS; `None` for HSV.
    pub fn delta(&self) -> Option<f64> {
        match self.kind {
            BackgroundKind::PlanarAds { delta } => Some(delta),
            BackgroundKind::Hsv { .. } => None,
        }
    }

    /// m² = Δ(Δ − d); zero for the massless HSV scalar.
    pub fn mass_squared(&self) -> f64 {
        match self.kind {
            BackgroundKind::PlanarAds { delta } => delta * (delta - self.d as f64),
            BackgroundKind::Hsv { .. } => 0.0,
        }
    }

    /// γ = 1/p − 1 for HSV, `None` for AdS.
    pub fn gamma_exponent(&self) -> Option<f64> {
        match self.kind {
            BackgroundKind::Hsv { p } => Some(1.0 / p - 1.0),
            BackgroundKind::PlanarAds { .. } => None,
        }
    }

    /// Signed δ_r = dr/dt = r_UV − r_IR (negative for HSV).
    pub fn delta_r(&self) -> f64 {
        self.r_uv - self.r_ir
    }

    fn r_range(&self) -> (f64, f64) {
        (self.r_ir.min(self.r_uv), self.r_ir.max(self.r_uv))
    }

    fn check_r(&self, r: f64) -> Result<()> {
        let (lo, hi) = self.r_range();
        let slack = 1e-12 * (hi - lo).abs().max(1.0);
        if !r.is_finite() || r < lo - slack || r > hi + slack {
            return Err(domain!("r={r} outside cutoff interval [{lo}, {hi}]"));
        }
        Ok(())
    }

    /// Warp factor f(r).
    pub fn warp(&self, r: f64) -> Result<f64> {
        match self.kind {
            BackgroundKind::PlanarAds { .. } => Ok(r.exp()),
            BackgroundKind::Hsv { p } => {
                if !(r > 0.0) {
                    return Err(domain!("HSV warp factor is singular at r <= 0 (r={r})"));
                }
                Ok((p * r).powf(-(1.0 / p - 1.0)))
            }
        }
    }

    /// f'(r)/f(r): 1 for planar AdS, −γ/r for HSV.
    pub fn warp_log_derivative(&self, r: f64) -> Result<f64> {
        match self.kind {
            BackgroundKind::PlanarAds { .. } => Ok(1.0),
            BackgroundKind::Hsv { p } => {
                if !(r > 0.0) {
                    return Err(domain!("HSV warp factor is singular at r <= 0 (r={r})"));
                }
                Ok(-(1.0 / p - 1.0) / r)
            }
        }
    }

    /// r(t) = (r_UV − r_IR) t + r_IR.
    pub fn r_of_t(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(domain!("flow time t={t} outside [0, 1]"));
        }
        Ok(self.r_of_t_unchecked(t))
    }

    pub(crate) fn r_of_t_unchecked(&self, t: f64) -> f64 {
        self.delta_r() * t + self.r_ir
    }

    /// Volume-affine parameter u(r), normalised so u(r_IR) = 0 and u(r_UV) = 1.
    pub fn u_of_r(&self, r: f64) -> Result<f64> {
        self.check_r(r)?;
        Ok(match self.kind {
            BackgroundKind::PlanarAds { .. } => {
                let d = self.d as f64;
                (-(-d * (r - self.r_ir)).exp_m1()) / (-(-d * self.delta_r()).exp_m1())
            }
            BackgroundKind::Hsv { p } => {
                let e = self.d as f64 * (1.0 / p - 1.0) + 1.0;
                let ir = self.r_ir.powf(e);
                (ir - r.powf(e)) / (ir - self.r_uv.powf(e))
            }
        })
    }

    /// (du/dr, d²u/dr²) from the closed form of u(r).
    ///
    /// du/dr is positive for planar AdS and negative for HSV, where r decreases
    /// along the flow; du/dt = δ_r du/dr is positive in both cases.
    pub fn du_dr_and_d2u_dr2(&self, r: f64) -> Result<(f64, f64)> {
        self.check_r(r)?;
        Ok(match self.kind {
            BackgroundKind::PlanarAds { .. } => {
                let d = self.d as f64;
                let norm = -(-d * self.delta_r()).exp_m1();
                let du = d * (-d * (r - self.r_ir)).exp() / norm;
                (du, -d * du)
            }
            BackgroundKind::Hsv { p } => {
                let gamma = 1.0 / p - 1.0;
                let dg = self.d as f64 * gamma;
                let e = dg + 1.0;
                let norm = self.r_ir.powf(e) - self.r_uv.powf(e);
                let du = -e * r.powf(dg) / norm;
                let d2u = if dg == 0.0 { 0.0 } else { -e * dg * r.powf(dg - 1.0) / norm };
                (du, d2u)
            }
        })
    }
}
