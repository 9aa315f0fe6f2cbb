//! Penalized Poisson objective Φ(f) = F(f) + βR(f) and its subset split.
//!
//! F(f) = ⟨Af, 1⟩ − ⟨ln(Af + γ), g⟩ is the negative log-likelihood up to a
//! constant and R is the relative difference prior
//!
//! ```text
//! R(f) = Σ_j Σ_{k∈N_j} (f_j − f_k)² / (f_j + f_k + γ_R |f_j − f_k| + ε)
//! ```
//!
//! summed over ordered pairs, so every unordered neighbour pair contributes
//! twice. Subset objectives carry β/M of the prior each, so Φ = Σ_i Φ_i.

use std::sync::Arc;

use crate::error::{check_len, check_nonnegative, ReconError, Result};
use crate::projector::{SubsetPartition, SystemMatrix};

/// Relative pixel offsets (drow, dcol) defining N_j; truncated at the border.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    offsets: Vec<(isize, isize)>,
}

impl Neighborhood {
    pub fn eight_point() -> Self {
        let mut offsets = Vec::with_capacity(8);
        for dr in -1..=1 {
            for dc in -1..=1 {
                if (dr, dc) != (0, 0) {
                    offsets.push((dr, dc));
                }
            }
        }
        Neighborhood { offsets }
    }

    pub fn four_point() -> Self {
        Neighborhood {
            offsets: vec![(-1, 0), (0, -1), (0, 1), (1, 0)],
        }
    }

    /// The offset set must be closed under negation so that
    /// k ∈ N_j ⇔ j ∈ N_k.
    pub fn new(offsets: Vec<(isize, isize)>) -> Result<Self> {
        for &(dr, dc) in &offsets {
            if (dr, dc) == (0, 0) {
                return Err(ReconError::Config("neighborhood may not contain (0, 0)".into()));
            }
            if !offsets.contains(&(-dr, -dc)) {
                return Err(ReconError::Config(format!(
                    "neighborhood is not symmetric: ({dr}, {dc}) without its mirror"
                )));
            }
        }
        Ok(Neighborhood { offsets })
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    /// Calls `visit(j, k)` for every ordered neighbour pair on a grid.
    #[inline]
    fn for_each_pair(&self, rows: usize, cols: usize, mut visit: impl FnMut(usize, usize)) {
        for r in 0..rows {
            for c in 0..cols {
                let j = r * cols + c;
                for &(dr, dc) in &self.offsets {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                        visit(j, rr as usize * cols + cc as usize);
                    }
                }
            }
        }
    }
}

/// Relative difference prior on a rows×cols grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeDifferencePrior {
    pub rows: usize,
    pub cols: usize,
    pub gamma_r: f64,
    pub epsilon: f64,
    pub neighborhood: Neighborhood,
}

impl RelativeDifferencePrior {
    /// 8-point neighborhood, γ_R = 2, ε = 1e-12.
    pub fn standard(rows: usize, cols: usize) -> Self {
        RelativeDifferencePrior {
            rows,
            cols,
            gamma_r: 2.0,
            epsilon: 1e-12,
            neighborhood: Neighborhood::eight_point(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(ReconError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.gamma_r.is_finite() && self.gamma_r >= 0.0) {
            return Err(ReconError::Config(format!("gamma_r must be >= 0, got {}", self.gamma_r)));
        }
        Neighborhood::new(self.neighborhood.offsets.clone())?;
        Ok(())
    }

    fn check(&self, f: &[f64]) -> Result<()> {
        check_len("prior input", self.rows * self.cols, f.len())?;
        check_nonnegative("prior input", f)
    }

    #[inline]
    fn denom(&self, a: f64, b: f64) -> f64 {
        a + b + self.gamma_r * (a - b).abs() + self.epsilon
    }

    pub fn value(&self, f: &[f64]) -> Result<f64> {
        self.check(f)?;
        let mut total = 0.0;
        self.neighborhood.for_each_pair(self.rows, self.cols, |j, k| {
            let d = f[j] - f[k];
            total += d * d / self.denom(f[j], f[k]);
        });
        Ok(total)
    }

    /// ∂R/∂f_j = 2 Σ_k (f_j − f_k)(γ_R|f_j − f_k| + f_j + 3f_k + 2ε) / D_jk².
    pub fn gradient(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check(f)?;
        let mut grad = vec![0.0; f.len()];
        self.gradient_into(f, 1.0, &mut grad);
        Ok(grad)
    }

    /// Adds `scale · ∇R(f)` into `out`. Inputs are assumed validated.
    pub(crate) fn gradient_into(&self, f: &[f64], scale: f64, out: &mut [f64]) {
        let (gr, eps) = (self.gamma_r, self.epsilon);
        let s2 = 2.0 * scale;
        self.neighborhood.for_each_pair(self.rows, self.cols, |j, k| {
            let (a, b) = (f[j], f[k]);
            let d = a - b;
            let den = self.denom(a, b);
            out[j] += s2 * d * (gr * d.abs() + a + 3.0 * b + 2.0 * eps) / (den * den);
        });
    }

    /// xᵀ∇²R(f)x = Σ_j Σ_k 2((2f_k + ε)x_j − (2f_j + ε)x_k)² / D_jk³.
    pub fn quadratic_form(&self, f: &[f64], x: &[f64]) -> Result<f64> {
        self.check(f)?;
        check_len("direction", f.len(), x.len())?;
        let eps = self.epsilon;
        let mut total = 0.0;
        self.neighborhood.for_each_pair(self.rows, self.cols, |j, k| {
            let (a, b) = (f[j], f[k]);
            let w = (2.0 * b + eps) * x[j] - (2.0 * a + eps) * x[k];
            let den = self.denom(a, b);
            total += 2.0 * w * w / (den * den * den);
        });
        Ok(total)
    }
}

/// Rows, counts and background of one subset.
#[derive(Clone, Debug)]
struct SubsetBlock {
    matrix: SystemMatrix,
    counts: Vec<f64>,
    background: Vec<f64>,
}

/// xᵀ∇²Φ(f)x split into its fidelity and (β-weighted) prior parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticForm {
    pub fidelity: f64,
    pub prior: f64,
}

impl QuadraticForm {
    pub fn total(&self) -> f64 {
        self.fidelity + self.prior
    }
}

/// Everything defining Φ: data, model constants and the subset split.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    matrix: Arc<SystemMatrix>,
    counts: Vec<f64>,
    background: Vec<f64>,
    beta: f64,
    prior: RelativeDifferencePrior,
    partition: SubsetPartition,
    blocks: Vec<SubsetBlock>,
}

impl ObjectiveSpec {
    pub fn new(
        matrix: Arc<SystemMatrix>,
        counts: Vec<f64>,
        background: Vec<f64>,
        beta: f64,
        prior: RelativeDifferencePrior,
        partition: SubsetPartition,
    ) -> Result<Self> {
        let (p, q) = matrix.shape();
        check_len("counts", p, counts.len())?;
        check_len("background", p, background.len())?;
        check_len("prior grid", q, prior.rows * prior.cols)?;
        check_len("subset partition rows", p, partition.n_rows())?;
        check_nonnegative("counts", &counts)?;
        if let Some(j) = background.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ReconError::Domain(format!(
                "background entry {j} is {} (must be > 0)",
                background[j]
            )));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(ReconError::Config(format!("beta must be >= 0, got {beta}")));
        }
        prior.validate()?;
        let blocks = partition
            .index_sets()
            .iter()
            .map(|rows| SubsetBlock {
                matrix: matrix.select_rows(rows),
                counts: rows.iter().map(|&r| counts[r]).collect(),
                background: rows.iter().map(|&r| background[r]).collect(),
            })
            .collect();
        Ok(ObjectiveSpec {
            matrix,
            counts,
            background,
            beta,
            prior,
            partition,
            blocks,
        })
    }

    /// Same data and model with a different subset split.
    pub fn with_partition(&self, partition: SubsetPartition) -> Result<Self> {
        Self::new(
            Arc::clone(&self.matrix),
            self.counts.clone(),
            self.background.clone(),
            self.beta,
            self.prior.clone(),
            partition,
        )
    }

    pub fn matrix(&self) -> &SystemMatrix {
        &self.matrix
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn prior(&self) -> &RelativeDifferencePrior {
        &self.prior
    }

    pub fn partition(&self) -> &SubsetPartition {
        &self.partition
    }

    pub fn n_subsets(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.matrix.n_cols()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.prior.rows, self.prior.cols)
    }

    /// Rows, counts and background of subset `i`.
    pub(crate) fn subset_parts(&self, i: usize) -> (&SystemMatrix, &[f64], &[f64]) {
        let b = &self.blocks[i];
        (&b.matrix, &b.counts, &b.background)
    }

    fn check_image(&self, f: &[f64]) -> Result<()> {
        check_len("image", self.n_pixels(), f.len())?;
        check_nonnegative("image", f)
    }

    fn block(&self, i: usize) -> Result<&SubsetBlock> {
        self.blocks.get(i).ok_or(ReconError::SubsetIndex {
            index: i,
            count: self.blocks.len(),
        })
    }

    pub fn fidelity_value(&self, f: &[f64]) -> Result<f64> {
        self.check_image(f)?;
        let af = self.matrix.forward(f)?;
        Ok(poisson_term(&af, &self.counts, &self.background))
    }

    pub fn prior_value(&self, f: &[f64]) -> Result<f64> {
        self.prior.value(f)
    }

    pub fn prior_gradient(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.prior.gradient(f)
    }

    /// Φ(f).
    pub fn value(&self, f: &[f64]) -> Result<f64> {
        let fid = self.fidelity_value(f)?;
        if self.beta == 0.0 {
            return Ok(fid);
        }
        Ok(fid + self.beta * self.prior.value(f)?)
    }

    /// ∇Φ(f) = Aᵀ(1 − g/(Af + γ)) + β∇R(f).
    pub fn gradient(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_image(f)?;
        let af = self.matrix.forward(f)?;
        let ratio = poisson_ratio(&af, &self.counts, &self.background);
        let mut grad = vec![0.0; f.len()];
        self.matrix.back_accumulate(&ratio, &mut grad);
        if self.beta != 0.0 {
            self.prior.gradient_into(f, self.beta, &mut grad);
        }
        Ok(grad)
    }

    /// Φ_i(f), with `i` a 0-based subset id.
    pub fn subset_value(&self, f: &[f64], i: usize) -> Result<f64> {
        let block = self.block(i)?;
        self.check_image(f)?;
        let af = block.matrix.forward(f)?;
        let mut v = poisson_term(&af, &block.counts, &block.background);
        if self.beta != 0.0 {
            v += self.beta / self.n_subsets() as f64 * self.prior.value(f)?;
        }
        Ok(v)
    }

    /// ∇Φ_i(f) = A_iᵀ(1 − g_i/(A_i f + γ_i)) + (β/M)∇R(f).
    pub fn subset_gradient(&self, f: &[f64], i: usize) -> Result<Vec<f64>> {
        let block = self.block(i)?;
        self.check_image(f)?;
        let af = block.matrix.forward(f)?;
        let ratio = poisson_ratio(&af, &block.counts, &block.background);
        let mut grad = vec![0.0; f.len()];
        block.matrix.back_accumulate(&ratio, &mut grad);
        if self.beta != 0.0 {
            let scale = self.beta / self.n_subsets() as f64;
            self.prior.gradient_into(f, scale, &mut grad);
        }
        Ok(grad)
    }

    /// xᵀ∇²Φ(f)x without forming the Hessian: xᵀAᵀGAx with
    /// G = diag(g/(Af + γ)²), plus β·xᵀ∇²R(f)x.
    pub fn hessian_quadratic_form(&self, f: &[f64], x: &[f64]) -> Result<QuadraticForm> {
        self.check_image(f)?;
        check_len("direction", f.len(), x.len())?;
        let af = self.matrix.forward(f)?;
        let ax = self.matrix.forward(x)?;
        let fidelity = (0..af.len())
            .filter(|&r| self.counts[r] != 0.0)
            .map(|r| {
                let den = af[r] + self.background[r];
                self.counts[r] * ax[r] * ax[r] / (den * den)
            })
            .sum();
        let prior = if self.beta == 0.0 {
            0.0
        } else {
            self.beta * self.prior.quadratic_form(f, x)?
        };
        Ok(QuadraticForm { fidelity, prior })
    }
}

fn poisson_term(af: &[f64], counts: &[f64], background: &[f64]) -> f64 {
    let mut total = 0.0;
    for r in 0..af.len() {
        total += af[r];
        if counts[r] != 0.0 {
            total -= counts[r] * (af[r] + background[r]).ln();
        }
    }
    total
}

/// 1 − g/(Af + γ), elementwise.
fn poisson_ratio(af: &[f64], counts: &[f64], background: &[f64]) -> Vec<f64> {
    (0..af.len())
        .map(|r| 1.0 - counts[r] / (af[r] + background[r]))
        .collect()
}
