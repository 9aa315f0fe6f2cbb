//! Relaxed, preconditioned ordered-subsets iterations (BSREM and its
//! subiteration-dependent-preconditioner variants).
//!
//! One outer iteration visits every subset once, in the partition's access
//! order:
//!
//! ```text
//! f̃ = f − λ_k · α_{k,i} · ν^{k,i} ⊙ S(f) ⊙ ∇Φ_i(f)
//! f = P_t(f̃)
//! ```
//!
//! with λ_k = λ₀/(ak + 1) and P_t mapping into the band [t, U − t].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, ReconError, Result};
use crate::image::Image;
use crate::objective::ObjectiveSpec;
use crate::preconditioner::{
    alpha_km, base_precond_into, compute_p, NesterovAlpha, SpatialFactor, SpatialFactorConfig,
    Variant,
};

/// λ_k = λ₀/(ak + 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSchedule {
    pub lambda0: f64,
    pub a: f64,
}

impl RelaxationSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0.is_finite() && self.lambda0 > 0.0 && self.a.is_finite() && self.a > 0.0) {
            return Err(ReconError::Config(format!(
                "relaxation needs lambda0 > 0 and a > 0, got lambda0 = {}, a = {}",
                self.lambda0, self.a
            )));
        }
        Ok(())
    }

    pub fn at(&self, k: usize) -> f64 {
        self.lambda0 / (self.a * k as f64 + 1.0)
    }
}

pub fn relaxation(schedule: &RelaxationSchedule, k: usize) -> f64 {
    schedule.at(k)
}

/// The box [0, U] and the interior margin t of P_t.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub t: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.upper.is_finite() && self.upper > 0.0) {
            return Err(ReconError::Config(format!("upper bound U must be > 0, got {}", self.upper)));
        }
        if !(self.t > 0.0 && self.t < 0.5 * self.upper) {
            return Err(ReconError::Config(format!(
                "projection margin t must lie in (0, U/2), got t = {}, U = {}",
                self.t, self.upper
            )));
        }
        Ok(())
    }
}

/// P_t: clamps every component into the band [t, U − t]. Values at or
/// below 0 map to t and values at or above U map to U − t, as in the
/// textbook operator; components already in (0, t) or (U − t, U) are also
/// moved to the band edge so that every iterate stays in [t, U − t].
pub fn project_interior(f: &mut [f64], bounds: &Bounds) -> Result<()> {
    bounds.validate()?;
    project_in_place(f, bounds.t, bounds.upper);
    Ok(())
}

#[inline]
fn project_in_place(f: &mut [f64], t: f64, upper: f64) {
    for v in f.iter_mut() {
        *v = v.clamp(t, upper - t);
    }
}

/// Parameters of one algorithm run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub variant: Variant,
    pub subsets: usize,
    #[serde(default = "one")]
    pub lambda0: f64,
    pub a: f64,
    /// ϱ, the limit of the extended-momentum α (P2/M2).
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub delta1: Option<f64>,
    /// Defaults to δ₁.
    #[serde(default)]
    pub delta2: Option<f64>,
    #[serde(default)]
    pub nu1: Option<f64>,
    #[serde(default)]
    pub nu2: Option<f64>,
    #[serde(default = "default_j0")]
    pub j0: usize,
    #[serde(default = "default_j1")]
    pub j1: usize,
}

fn one() -> f64 {
    1.0
}

fn default_j0() -> usize {
    3
}

fn default_j1() -> usize {
    1000
}

impl AlgorithmConfig {
    pub fn bsrem(subsets: usize, a: f64) -> Self {
        AlgorithmConfig {
            variant: Variant::Bsrem,
            subsets,
            lambda0: 1.0,
            a,
            rho: None,
            delta1: None,
            delta2: None,
            nu1: None,
            nu2: None,
            j0: default_j0(),
            j1: default_j1(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}({})", self.variant, self.subsets)
    }

    pub fn schedule(&self) -> RelaxationSchedule {
        RelaxationSchedule {
            lambda0: self.lambda0,
            a: self.a,
        }
    }

    /// Every problem with the parameters, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let label = self.label();
        if self.subsets == 0 {
            out.push(format!("{label}: subsets must be >= 1"));
        }
        if let Err(e) = self.schedule().validate() {
            out.push(format!("{label}: {e}"));
        }
        if self.variant.uses_extended_momentum() {
            match (self.rho, self.delta1) {
                (Some(r), Some(d)) if r > 0.0 && d > 0.0 && r.is_finite() && d.is_finite() => {}
                _ => out.push(format!("{label}: needs rho > 0 and delta1 > 0")),
            }
            if let Some(d2) = self.delta2 {
                if !(d2 > 0.0 && d2.is_finite()) {
                    out.push(format!("{label}: delta2 must be > 0"));
                }
            }
        }
        if self.variant.uses_spatial_factor() {
            match self.spatial_config() {
                Some(cfg) => {
                    if let Err(e) = cfg.validate() {
                        out.push(format!("{label}: {e}"));
                    }
                }
                None => out.push(format!("{label}: needs nu1 and nu2")),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ReconError::Validation(problems))
        }
    }

    pub fn spatial_config(&self) -> Option<SpatialFactorConfig> {
        Some(SpatialFactorConfig {
            nu1: self.nu1?,
            nu2: self.nu2?,
            j0: self.j0,
            j1: self.j1,
        })
    }
}

#[derive(Clone, Debug)]
enum AlphaSource {
    One,
    Nesterov(NesterovAlpha),
    Extended { rho: f64, delta1: f64, delta2: f64 },
}

/// Read-only view of the iterate handed to observers.
#[derive(Clone, Copy, Debug)]
pub struct Snapshot<'a> {
    /// Outer iteration (0-based).
    pub k: usize,
    /// Position in the access order, 1-based; equals M after a full iteration.
    pub i: usize,
    /// Subset id used at this position (0-based).
    pub subset: usize,
    pub f: &'a [f64],
    pub lambda: f64,
    pub alpha: f64,
    /// Optimizer time so far, excluding observer callbacks.
    pub elapsed: Duration,
}

/// Hooks invoked by [`Reconstructor::run`].
pub trait Observer {
    fn on_subiteration(&mut self, _snap: &Snapshot<'_>) -> Result<()> {
        Ok(())
    }

    fn on_iteration(&mut self, _snap: &Snapshot<'_>) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunStats {
    pub iterations: usize,
    pub elapsed: Duration,
}

/// Single-owner state of one SDP-BSREM run.
pub struct Reconstructor<'s> {
    spec: &'s ObjectiveSpec,
    cfg: AlgorithmConfig,
    bounds: Bounds,
    p: Vec<f64>,
    alpha: AlphaSource,
    nu: Option<SpatialFactor>,
    f: Vec<f64>,
    k: usize,
    elapsed: Duration,
    precond: Vec<f64>,
}

impl<'s> Reconstructor<'s> {
    pub fn new(spec: &'s ObjectiveSpec, cfg: AlgorithmConfig, bounds: Bounds, f0: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        bounds.validate()?;
        check_len("initial image", spec.n_pixels(), f0.len())?;
        if cfg.subsets != spec.n_subsets() {
            return Err(ReconError::Config(format!(
                "{} expects {} subsets, objective has {}",
                cfg.label(),
                cfg.subsets,
                spec.n_subsets()
            )));
        }
        if let Some(j) = f0.iter().position(|v| !(0.0..=bounds.upper).contains(v)) {
            return Err(ReconError::Domain(format!(
                "initial pixel {j} = {} outside [0, {}]",
                f0[j], bounds.upper
            )));
        }
        let m = cfg.subsets;
        let alpha = match cfg.variant {
            Variant::Bsrem => AlphaSource::One,
            Variant::P1 | Variant::M1 => AlphaSource::Nesterov(NesterovAlpha::new(m)),
            Variant::P2 | Variant::M2 => {
                let delta1 = cfg.delta1.expect("validated");
                AlphaSource::Extended {
                    rho: cfg.rho.expect("validated"),
                    delta1,
                    delta2: cfg.delta2.unwrap_or(delta1),
                }
            }
        };
        let nu = if cfg.variant.uses_spatial_factor() {
            Some(SpatialFactor::new(
                cfg.spatial_config().expect("validated"),
                spec.n_pixels(),
            )?)
        } else {
            None
        };
        Ok(Reconstructor {
            spec,
            p: compute_p(spec.matrix(), m),
            cfg,
            bounds,
            alpha,
            nu,
            precond: vec![0.0; f0.len()],
            f: f0,
            k: 0,
            elapsed: Duration::ZERO,
        })
    }

    pub fn image(&self) -> &[f64] {
        &self.f
    }

    pub fn into_image(self) -> Vec<f64> {
        self.f
    }

    pub fn config(&self) -> &AlgorithmConfig {
        &self.cfg
    }

    /// Completed outer iterations.
    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn elapsed(&self) -> Duration {
        self.elapsed
    }

    fn next_alpha(&mut self, k: usize, i: usize) -> f64 {
        match &mut self.alpha {
            AlphaSource::One => 1.0,
            AlphaSource::Nesterov(state) => {
                debug_assert_eq!(NesterovAlpha::position(state), (k, i));
                state.advance()
            }
            AlphaSource::Extended { rho, delta1, delta2 } => {
                alpha_km(k, i, self.cfg.subsets, *rho, *delta1, *delta2)
            }
        }
    }

    /// One preconditioned subset step at outer iteration `k`, position `i`
    /// (1-based) of the access order. Calls must be made in sequence.
    /// Returns (λ_k, α_{k,i}).
    pub fn subiterate(&mut self, k: usize, i: usize) -> Result<(f64, f64)> {
        let m = self.cfg.subsets;
        if i == 0 || i > m {
            return Err(ReconError::SubsetIndex { index: i, count: m });
        }
        let subset = self.spec.partition().access_order()[i - 1];
        let lambda = self.cfg.schedule().at(k);
        let alpha = self.next_alpha(k, i);
        let nu = match self.nu.as_mut() {
            Some(sf) => {
                let (rows, cols) = self.spec.dims();
                let img = Image::from_vec(rows, cols, 1.0, self.f.clone())?;
                Some(sf.update(&img, k * m + i)?)
            }
            None => None,
        };
        let grad = self.spec.subset_gradient(&self.f, subset)?;
        base_precond_into(&self.f, &self.p, self.bounds.upper, &mut self.precond)?;
        let step = lambda * alpha;
        for j in 0..self.f.len() {
            let scale = nu.map_or(1.0, |nu| nu[j]);
            let v = self.f[j] - step * scale * self.precond[j] * grad[j];
            if !v.is_finite() {
                return Err(ReconError::NumericalFailure {
                    k,
                    i,
                    detail: format!("pixel {j} became {v}"),
                });
            }
            self.f[j] = v;
        }
        project_in_place(&mut self.f, self.bounds.t, self.bounds.upper);
        Ok((lambda, alpha))
    }

    /// Runs `n_iters` outer iterations, calling every observer after each
    /// subiteration and each completed iteration.
    pub fn run(&mut self, n_iters: usize, observers: &mut [&mut dyn Observer]) -> Result<RunStats> {
        if n_iters == 0 {
            return Err(ReconError::Config("n_iters must be >= 1".into()));
        }
        let m = self.cfg.subsets;
        let start_k = self.k;
        for k in start_k..start_k + n_iters {
            for i in 1..=m {
                let t0 = Instant::now();
                let (lambda, alpha) = self.subiterate(k, i)?;
                self.elapsed += t0.elapsed();
                let snap = Snapshot {
                    k,
                    i,
                    subset: self.spec.partition().access_order()[i - 1],
                    f: &self.f,
                    lambda,
                    alpha,
                    elapsed: self.elapsed,
                };
                for obs in observers.iter_mut() {
                    obs.on_subiteration(&snap)?;
                }
                if i == m {
                    for obs in observers.iter_mut() {
                        obs.on_iteration(&snap)?;
                    }
                }
            }
            self.k = k + 1;
        }
        Ok(RunStats {
            iterations: n_iters,
            elapsed: self.elapsed,
        })
    }
}

/// Unregularized ordered-subsets EM, used to size the bound U.
pub fn os_em(spec: &ObjectiveSpec, f0: &[f64], n_iters: usize) -> Result<Vec<f64>> {
    check_len("initial image", spec.n_pixels(), f0.len())?;
    let mut f = f0.to_vec();
    let m = spec.n_subsets();
    let sens: Vec<Vec<f64>> = (0..m).map(|s| spec.subset_parts(s).0.column_sums()).collect();
    for _ in 0..n_iters {
        for &s in spec.partition().access_order() {
            let (a, g, gamma) = spec.subset_parts(s);
            let af = a.forward(&f)?;
            let ratio: Vec<f64> = (0..af.len()).map(|r| g[r] / (af[r] + gamma[r])).collect();
            let bp = a.back(&ratio)?;
            for j in 0..f.len() {
                if sens[s][j] > 0.0 {
                    f[j] *= bp[j] / sens[s][j];
                }
            }
        }
    }
    Ok(f)
}

/// U = 10 × max pixel of a 2-iteration OS-EM estimate started from f0.
pub fn default_upper_bound(spec: &ObjectiveSpec, f0: &[f64]) -> Result<f64> {
    let est = os_em(spec, f0, 2)?;
    let peak = est.iter().copied().fold(0.0f64, f64::max);
    if !(peak.is_finite() && peak > 0.0) {
        return Err(ReconError::DegenerateImage(format!(
            "OS-EM estimate has maximum {peak}; cannot size U"
        )));
    }
    Ok(10.0 * peak)
}

/// Saved iterate: magic `SDPCK1`, iteration, rows and cols as u64 LE, a
/// 32-byte config hash, then rows·cols f64 LE pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub rows: usize,
    pub cols: usize,
    pub config_hash: [u8; 32],
    pub image: Vec<f64>,
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"SDPCK1";

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        check_len("checkpoint image", self.rows * self.cols, self.image.len())?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [self.iteration, self.rows as u64, self.cols as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.config_hash)?;
        for v in &self.image {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let bad = |detail: &str| ReconError::Format {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let iteration = next(&mut r)?;
        let rows = next(&mut r)? as usize;
        let cols = next(&mut r)? as usize;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if rest.len() != 8 * rows * cols {
            return Err(bad("image size does not match header"));
        }
        let image = rest
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunks of 8")))
            .collect();
        Ok(Checkpoint {
            iteration,
            rows,
            cols,
            config_hash,
            image,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::RelativeDifferencePrior;
    use crate::projector::{SubsetPartition, SystemMatrix};
    use std::sync::Arc;

    #[test]
    fn relaxation_values() {
        let s = RelaxationSchedule { lambda0: 1.0, a: 1.0 / 35.0 };
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(35) - 0.5).abs() < 1e-15);
        assert!((1..200).all(|k| s.at(k) < s.at(k - 1)));
        assert!(RelaxationSchedule { lambda0: 1.0, a: 0.0 }.validate().is_err());
    }

    #[test]
    fn projection_examples() {
        let b = Bounds { t: 1e-4, upper: 10.0 };
        let mut f = vec![-0.5, 13.0, 0.0, 10.0, 4.2];
        project_interior(&mut f, &b).unwrap();
        assert_eq!(f, vec![1e-4, 10.0 - 1e-4, 1e-4, 10.0 - 1e-4, 4.2]);
        let mut edge = vec![5e-5, 10.0 - 5e-5, 1e-4, 10.0 - 1e-4];
        project_interior(&mut edge, &b).unwrap();
        assert_eq!(edge, vec![1e-4, 10.0 - 1e-4, 1e-4, 10.0 - 1e-4]);
        let bad = Bounds { t: 6.0, upper: 10.0 };
        assert!(matches!(project_interior(&mut f, &bad), Err(ReconError::Config(_))));
        assert!(project_interior(&mut f, &Bounds { t: 0.0, upper: 10.0 }).is_err());
    }

    fn toy_spec() -> ObjectiveSpec {
        let a = SystemMatrix::from_dense(3, 2, &[1.0, 0.5, 0.2, 1.0, 0.7, 0.7]).unwrap();
        let prior = RelativeDifferencePrior::standard(1, 2);
        let partition =
            SubsetPartition::new(vec![vec![0, 2], vec![1]], vec![1, 0], 3).unwrap();
        ObjectiveSpec::new(Arc::new(a), vec![3.0, 1.0, 4.0], vec![0.2, 0.1, 0.3], 0.5, prior, partition)
            .unwrap()
    }

    #[test]
    fn single_subiteration_matches_dense_arithmetic() {
        let spec = toy_spec();
        let bounds = Bounds { t: 1e-4, upper: 20.0 };
        let f0 = vec![1.5, 0.8];
        let mut rec = Reconstructor::new(&spec, AlgorithmConfig::bsrem(2, 0.1), bounds, f0.clone()).unwrap();
        rec.subiterate(0, 1).unwrap();

        // Subset 1 (first in access order) holds row 1 only: a = [0.2, 1.0].
        let (a0, a1, g, gam) = (0.2, 1.0, 1.0, 0.1);
        let ratio = 1.0 - g / (a0 * f0[0] + a1 * f0[1] + gam);
        let prior = spec.prior().gradient(&f0).unwrap();
        let grad = [a0 * ratio + 0.25 * prior[0], a1 * ratio + 0.25 * prior[1]];
        // p_j = column sums / M.
        let p = [(1.0 + 0.2 + 0.7) / 2.0, (0.5 + 1.0 + 0.7) / 2.0];
        let expected: Vec<f64> = (0..2).map(|j| f0[j] - 1.0 * (f0[j] / p[j]) * grad[j]).collect();
        assert_eq!(rec.image(), expected.as_slice());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        // One pixel, one bin: ∇Φ = 1 − g/(f + γ) vanishes at f = g − γ.
        let a = SystemMatrix::from_dense(1, 1, &[1.0]).unwrap();
        let prior = RelativeDifferencePrior::standard(1, 1);
        let spec = ObjectiveSpec::new(Arc::new(a), vec![4.0], vec![1.0], 0.0, prior, SubsetPartition::single(1))
            .unwrap();
        let bounds = Bounds { t: 1e-4, upper: 100.0 };
        let mut rec = Reconstructor::new(&spec, AlgorithmConfig::bsrem(1, 0.1), bounds, vec![3.0]).unwrap();
        rec.run(5, &mut []).unwrap();
        assert_eq!(rec.image(), &[3.0]);
    }

    #[test]
    fn mismatched_subsets_rejected() {
        let spec = toy_spec();
        let bounds = Bounds { t: 1e-4, upper: 20.0 };
        assert!(Reconstructor::new(&spec, AlgorithmConfig::bsrem(3, 0.1), bounds, vec![1.0; 2]).is_err());
        assert!(Reconstructor::new(&spec, AlgorithmConfig::bsrem(2, 0.1), bounds, vec![30.0; 2]).is_err());
        let mut rec = Reconstructor::new(&spec, AlgorithmConfig::bsrem(2, 0.1), bounds, vec![1.0; 2]).unwrap();
        assert!(rec.run(0, &mut []).is_err());
    }

    #[test]
    fn missing_variant_parameters_are_all_reported() {
        let cfg = AlgorithmConfig {
            variant: Variant::P2,
            subsets: 0,
            ..AlgorithmConfig::bsrem(0, -1.0)
        };
        let problems = cfg.problems();
        assert_eq!(problems.len(), 4, "{problems:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ck = Checkpoint {
            iteration: 400,
            rows: 2,
            cols: 3,
            config_hash: [7; 32],
            image: vec![1.0, 2.0, 3.5, 0.25, 1e-4, 9.0],
        };
        ck.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), ck);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Checkpoint::read(&path).is_err());
    }
}
