//! Diagonal preconditioners for the relaxed ordered-subsets iteration.
//!
//! The subiteration-dependent preconditioner is
//! `S^{k,i}(f) = diag(α_{k,i} · ν^{k,i}) · S(f)`, where `S` is the EM-like
//! base scaling, `α_{k,i}` a scalar momentum-style sequence and `ν^{k,i}` a
//! per-pixel factor that enlarges steps in smooth regions and shrinks them
//! near edges. Subiterations are counted globally as `J = kM + i` with
//! `i` in `1..=M`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, ReconError, Result};
use crate::image::Image;
use crate::projector::SystemMatrix;

/// Preconditioner family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// α ≡ 1, ν ≡ 1: plain BSREM.
    #[serde(rename = "BSREM")]
    Bsrem,
    /// Nesterov α with spatial ν.
    #[serde(rename = "SDP-P1")]
    P1,
    /// Extended-momentum α with spatial ν.
    #[serde(rename = "SDP-P2")]
    P2,
    /// Nesterov α, ν ≡ 1.
    #[serde(rename = "SDP-M1")]
    M1,
    /// Extended-momentum α, ν ≡ 1.
    #[serde(rename = "SDP-M2")]
    M2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Bsrem, Variant::P1, Variant::P2, Variant::M1, Variant::M2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bsrem => "BSREM",
            Variant::P1 => "SDP-P1",
            Variant::P2 => "SDP-P2",
            Variant::M1 => "SDP-M1",
            Variant::M2 => "SDP-M2",
        }
    }

    pub fn uses_spatial_factor(self) -> bool {
        matches!(self, Variant::P1 | Variant::P2)
    }

    pub fn uses_nesterov(self) -> bool {
        matches!(self, Variant::P1 | Variant::M1)
    }

    pub fn uses_extended_momentum(self) -> bool {
        matches!(self, Variant::P2 | Variant::M2)
    }

    /// Limit of α_{k,i} as k → ∞.
    pub fn alpha_limit(self, rho: f64) -> f64 {
        match self {
            Variant::Bsrem => 1.0,
            Variant::P1 | Variant::M1 => 2.0,
            Variant::P2 | Variant::M2 => rho,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ReconError::Config(format!("unknown algorithm variant `{s}`")))
    }
}

/// p_j = (Aᵀ1)_j / M, or 1/M for pixels no ray sees.
pub fn compute_p(a: &SystemMatrix, m: usize) -> Vec<f64> {
    let m = m.max(1) as f64;
    a.column_sums()
        .into_iter()
        .map(|s| if s > 0.0 { s / m } else { 1.0 / m })
        .collect()
}

/// Diagonal of S(f): f_j/p_j below U/2, (U − f_j)/p_j from U/2 up.
pub fn base_precond_diag(f: &[f64], p: &[f64], upper: f64) -> Result<Vec<f64>> {
    check_len("preconditioner weights", f.len(), p.len())?;
    let mut out = vec![0.0; f.len()];
    base_precond_into(f, p, upper, &mut out)?;
    Ok(out)
}

pub(crate) fn base_precond_into(f: &[f64], p: &[f64], upper: f64, out: &mut [f64]) -> Result<()> {
    let half = 0.5 * upper;
    for j in 0..f.len() {
        let v = f[j];
        if !(0.0..=upper).contains(&v) {
            return Err(ReconError::Domain(format!(
                "pixel {j} = {v} lies outside [0, {upper}]"
            )));
        }
        out[j] = if v < half { v / p[j] } else { (upper - v) / p[j] };
    }
    Ok(())
}

/// Nesterov-derived α_{k,i} = 1 + (t_{k,i} − 1)/t_{k,i+1} with
/// t_{k,i+1} = (1 + √(1 + 4t²_{k,i}))/2, t_{0,1} = 1 and t_{k+1,1} = t_{k,M+1}.
#[derive(Clone, Debug, PartialEq)]
pub struct NesterovAlpha {
    t: f64,
    k: usize,
    i: usize,
    m: usize,
}

impl NesterovAlpha {
    pub fn new(m: usize) -> Self {
        NesterovAlpha {
            t: 1.0,
            k: 0,
            i: 1,
            m: m.max(1),
        }
    }

    /// Current auxiliary scalar t_{k,i}.
    pub fn t(&self) -> f64 {
        self.t
    }

    /// (k, i) of the α the next call to [`advance`](Self::advance) returns.
    pub fn position(&self) -> (usize, usize) {
        (self.k, self.i)
    }

    /// Global subiteration index kM + i of the next α.
    pub fn global_index(&self) -> usize {
        self.k * self.m + self.i
    }

    /// Returns α_{k,i} and moves to the next subiteration.
    pub fn advance(&mut self) -> f64 {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * self.t * self.t).sqrt());
        let alpha = 1.0 + (self.t - 1.0) / t_next;
        self.t = t_next;
        if self.i == self.m {
            self.k += 1;
            self.i = 1;
        } else {
            self.i += 1;
        }
        alpha
    }
}

impl Iterator for NesterovAlpha {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.advance())
    }
}

/// α_{k,i} = (ϱ(kM + i − 1) + δ₂)/(kM + i − 1 + δ₁), `i` in 1..=M.
pub fn alpha_km(k: usize, i: usize, m: usize, rho: f64, delta1: f64, delta2: f64) -> f64 {
    let n = (k * m + i - 1) as f64;
    (rho * n + delta2) / (n + delta1)
}

/// Elementwise √(grad_x² + grad_y²) with central differences inside and
/// one-sided differences on the first/last row and column.
pub fn numerical_gradient_magnitude(f: &Image) -> Result<Image> {
    let (rows, cols) = f.dims();
    if rows < 2 || cols < 2 {
        return Err(ReconError::DegenerateImage(format!(
            "gradient magnitude needs at least 2×2 pixels, got {rows}×{cols}"
        )));
    }
    let mut out = Image::zeros(rows, cols, f.pixel_size());
    for r in 0..rows {
        for c in 0..cols {
            let gx = axis_difference(|cc| f.get(r, cc), c, cols);
            let gy = axis_difference(|rr| f.get(rr, c), r, rows);
            out.set(r, c, (gx * gx + gy * gy).sqrt());
        }
    }
    Ok(out)
}

#[inline]
fn axis_difference(at: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    if i == 0 {
        at(1) - at(0)
    } else if i == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        0.5 * (at(i + 1) - at(i - 1))
    }
}

/// Bounds and switching points of the spatial factor ν.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialFactorConfig {
    pub nu1: f64,
    pub nu2: f64,
    /// ν = 1 while J ≤ j0.
    pub j0: usize,
    /// ν is frozen at its J = j1 value afterwards.
    pub j1: usize,
}

impl SpatialFactorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu1 > 0.0 && self.nu1 < self.nu2 && self.nu2.is_finite()) {
            return Err(ReconError::Config(format!(
                "need 0 < nu1 < nu2, got nu1 = {}, nu2 = {}",
                self.nu1, self.nu2
            )));
        }
        if self.j0 > self.j1 {
            return Err(ReconError::Config(format!(
                "need J0 <= J1, got {} > {}",
                self.j0, self.j1
            )));
        }
        Ok(())
    }
}

/// Per-pixel step factor ν^{k,i}.
///
/// With μ = max(0.01, grad(f)/mean(f)):
/// ν = 1 for J ≤ J₀, ν = clamp(mean(μ)/μ, ν₁, ν₂) for J₀ < J ≤ J₁, and the
/// J₁ value for J > J₁.
#[derive(Clone, Debug)]
pub struct SpatialFactor {
    cfg: SpatialFactorConfig,
    current: Vec<f64>,
    frozen: bool,
}

impl SpatialFactor {
    pub fn new(cfg: SpatialFactorConfig, n_pixels: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(SpatialFactor {
            cfg,
            current: vec![1.0; n_pixels],
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    /// Factor for global subiteration `j` computed from the iterate `f`
    /// entering that subiteration.
    pub fn update(&mut self, f: &Image, j: usize) -> Result<&[f64]> {
        check_len("spatial factor image", self.current.len(), f.len())?;
        if self.frozen {
            return Ok(&self.current);
        }
        if j <= self.cfg.j0 {
            self.current.iter_mut().for_each(|v| *v = 1.0);
        } else if j <= self.cfg.j1 {
            let mean = f.mean();
            // Also rejects NaN.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(mean > 0.0) {
                return Err(ReconError::DegenerateImage(format!(
                    "spatial factor needs mean(f) > 0, got {mean}"
                )));
            }
            let grad = numerical_gradient_magnitude(f)?;
            let mu: Vec<f64> = grad.data().iter().map(|g| (g / mean).max(0.01)).collect();
            let mu_mean = mu.iter().sum::<f64>() / mu.len() as f64;
            for (nu, m) in self.current.iter_mut().zip(&mu) {
                *nu = (mu_mean / m).clamp(self.cfg.nu1, self.cfg.nu2);
            }
        }
        if j >= self.cfg.j1 {
            self.frozen = true;
        }
        Ok(&self.current)
    }
}
