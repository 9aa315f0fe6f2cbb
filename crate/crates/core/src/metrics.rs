//! Figures of merit: objective traces, NRMSD against a converged reference,
//! and the gradient-angle consistency diagnostics.

use serde::Serialize;

use crate::error::{check_len, ReconError, Result};
use crate::image::Image;
use crate::objective::ObjectiveSpec;
use crate::optimizer::{Observer, Snapshot};
use crate::preconditioner::numerical_gradient_magnitude;
use crate::simulator::UniformLayout;

/// Region of interest Ω as a pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    pub label: String,
    pub mask: Vec<bool>,
}

impl Roi {
    pub fn new(label: impl Into<String>, mask: Vec<bool>) -> Result<Self> {
        let label = label.into();
        if !mask.iter().any(|&m| m) {
            return Err(ReconError::UndefinedMetric(format!("ROI `{label}` is empty")));
        }
        Ok(Roi { label, mask })
    }

    /// Every pixel.
    pub fn full(n_pixels: usize) -> Self {
        Roi {
            label: "global".into(),
            mask: vec![true; n_pixels],
        }
    }

    pub fn union(label: impl Into<String>, rois: &[Roi]) -> Result<Self> {
        let n = rois.first().map_or(0, |r| r.mask.len());
        let mask = (0..n).map(|j| rois.iter().any(|r| r.mask[j])).collect();
        Roi::new(label, mask)
    }
}

/// ROIs of the uniform phantom: each insert disk, the central background
/// disk, and their union labelled `all_rois`.
pub fn uniform_rois(layout: &UniformLayout) -> Result<Vec<Roi>> {
    let (rows, cols) = (layout.rows, layout.cols);
    let mut rois = layout
        .inserts
        .iter()
        .chain(std::iter::once(&layout.background_roi))
        .map(|d| Roi::new(d.label.clone(), d.mask(rows, cols)))
        .collect::<Result<Vec<_>>>()?;
    let all = Roi::union("all_rois", &rois)?;
    rois.push(all);
    Ok(rois)
}

/// √Σ_Ω(f − f∞)² / √Σ_Ω(f∞)².
pub fn nrmsd(f: &[f64], reference: &[f64], roi: &Roi) -> Result<f64> {
    check_len("nrmsd image", reference.len(), f.len())?;
    check_len("nrmsd roi", reference.len(), roi.mask.len())?;
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..f.len() {
        if roi.mask[j] {
            let d = f[j] - reference[j];
            num += d * d;
            den += reference[j] * reference[j];
        }
    }
    if den == 0.0 {
        return Err(ReconError::UndefinedMetric(format!(
            "reference has zero norm over ROI `{}`",
            roi.label
        )));
    }
    Ok((num / den).sqrt())
}

/// arccos(⟨v₁, v₂⟩ / (‖v₁‖‖v₂‖)) in [0, π], cosine clamped to [−1, 1].
pub fn vector_angle(v1: &[f64], v2: &[f64]) -> Result<f64> {
    check_len("vector angle", v1.len(), v2.len())?;
    let dot: f64 = v1.iter().zip(v2).map(|(a, b)| a * b).sum();
    let n1 = v1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = v2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(ReconError::UndefinedMetric("angle with a zero vector".into()));
    }
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0).acos())
}

fn restricted_angle(v1: &[f64], v2: &[f64], set: &[usize]) -> Option<f64> {
    if set.is_empty() {
        return None;
    }
    let a: Vec<f64> = set.iter().map(|&j| v1[j]).collect();
    let b: Vec<f64> = set.iter().map(|&j| v2[j]).collect();
    vector_angle(&a, &b).ok()
}

/// Angles between successive subset gradients restricted to the smooth and
/// variable areas of the current iterate, at one subiteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AngleSample {
    pub k: usize,
    pub i: usize,
    /// None when the smooth set is empty (or a restricted gradient is zero).
    pub theta: Option<f64>,
    /// None when the variable set is empty.
    pub theta_tilde: Option<f64>,
    pub smooth_pixels: usize,
    pub variable_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationAngles {
    pub k: usize,
    /// Mean θ_{k,i} over the subiterations where it was defined.
    pub theta: Option<f64>,
    pub theta_tilde: Option<f64>,
    pub skipped_smooth: usize,
    pub skipped_variable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AngleDiagnostics {
    pub smooth_threshold: f64,
    pub variable_threshold: f64,
    pub samples: Vec<AngleSample>,
    pub per_iteration: Vec<IterationAngles>,
}

impl AngleDiagnostics {
    /// Means of θ_k and θ̃_k over iterations `first..=last` (0-based k).
    pub fn window_means(&self, first: usize, last: usize) -> (Option<f64>, Option<f64>) {
        let pick = |sel: fn(&IterationAngles) -> Option<f64>| {
            let vals: Vec<f64> = self
                .per_iteration
                .iter()
                .filter(|it| it.k >= first && it.k <= last)
                .filter_map(sel)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        (pick(|it| it.theta), pick(|it| it.theta_tilde))
    }
}

/// Observer computing θ_{k,i} = θ(∇_{I_s}Φ_{i−1}(f^{k,i−1}), ∇_{I_s}Φ_i(f^{k,i}))
/// and its variable-area counterpart, with Φ_0 := Φ_M. I_s and I_v come
/// from the numerical gradient of the post-projection iterate f^{k,i}.
pub struct AngleTracker<'s> {
    spec: &'s ObjectiveSpec,
    smooth_threshold: f64,
    variable_threshold: f64,
    previous: Vec<f64>,
    samples: Vec<AngleSample>,
    per_iteration: Vec<IterationAngles>,
    /// Record per-subiteration samples (memory grows with M·iterations).
    keep_samples: bool,
    pending: Vec<AngleSample>,
}

impl<'s> AngleTracker<'s> {
    pub const SMOOTH_THRESHOLD: f64 = 0.01;
    pub const VARIABLE_THRESHOLD: f64 = 0.2;

    /// `f0` is the starting image; the last subset's gradient there seeds
    /// the first comparison.
    pub fn new(spec: &'s ObjectiveSpec, f0: &[f64]) -> Result<Self> {
        let last = *spec.partition().access_order().last().expect("nonempty partition");
        Ok(AngleTracker {
            spec,
            smooth_threshold: Self::SMOOTH_THRESHOLD,
            variable_threshold: Self::VARIABLE_THRESHOLD,
            previous: spec.subset_gradient(f0, last)?,
            samples: Vec::new(),
            per_iteration: Vec::new(),
            keep_samples: true,
            pending: Vec::new(),
        })
    }

    pub fn keep_samples(mut self, keep: bool) -> Self {
        self.keep_samples = keep;
        self
    }

    pub fn finish(self) -> AngleDiagnostics {
        AngleDiagnostics {
            smooth_threshold: self.smooth_threshold,
            variable_threshold: self.variable_threshold,
            samples: self.samples,
            per_iteration: self.per_iteration,
        }
    }
}

impl Observer for AngleTracker<'_> {
    fn on_subiteration(&mut self, snap: &Snapshot<'_>) -> Result<()> {
        let current = self.spec.subset_gradient(snap.f, snap.subset)?;
        let (rows, cols) = self.spec.dims();
        let img = Image::from_vec(rows, cols, 1.0, snap.f.to_vec())?;
        let grad = numerical_gradient_magnitude(&img)?;
        let mean = img.mean();
        let (mut smooth, mut variable) = (Vec::new(), Vec::new());
        for (j, &g) in grad.data().iter().enumerate() {
            if g < self.smooth_threshold * mean {
                smooth.push(j);
            } else if g > self.variable_threshold * mean {
                variable.push(j);
            }
        }
        self.pending.push(AngleSample {
            k: snap.k,
            i: snap.i,
            theta: restricted_angle(&self.previous, &current, &smooth),
            theta_tilde: restricted_angle(&self.previous, &current, &variable),
            smooth_pixels: smooth.len(),
            variable_pixels: variable.len(),
        });
        self.previous = current;
        Ok(())
    }

    fn on_iteration(&mut self, snap: &Snapshot<'_>) -> Result<()> {
        let samples = std::mem::take(&mut self.pending);
        let mean_of = |sel: fn(&AngleSample) -> Option<f64>| {
            let vals: Vec<f64> = samples.iter().filter_map(sel).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        self.per_iteration.push(IterationAngles {
            k: snap.k,
            theta: mean_of(|s| s.theta),
            theta_tilde: mean_of(|s| s.theta_tilde),
            skipped_smooth: samples.iter().filter(|s| s.theta.is_none()).count(),
            skipped_variable: samples.iter().filter(|s| s.theta_tilde.is_none()).count(),
        });
        if self.keep_samples {
            self.samples.extend(samples);
        }
        Ok(())
    }
}

/// One trace row, describing the image f^k after k completed iterations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub k: usize,
    /// Subiteration position within iteration k (M for a full iteration, 0
    /// for the starting image).
    pub i: usize,
    pub wall_time_s: f64,
    pub objective: f64,
    pub nrmsd_global: Option<f64>,
    pub nrmsd_roi: Vec<f64>,
    pub theta_k: Option<f64>,
    pub theta_tilde_k: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationTrace {
    pub algorithm: String,
    pub roi_labels: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl IterationTrace {
    /// Attaches per-iteration mean angles; the angles measured during
    /// iteration k (0-based) land on row k + 1.
    pub fn attach_angles(&mut self, angles: &AngleDiagnostics) {
        for it in &angles.per_iteration {
            if let Some(row) = self.rows.iter_mut().find(|r| r.k == it.k + 1) {
                row.theta_k = it.theta;
                row.theta_tilde_k = it.theta_tilde;
            }
        }
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }
}

/// Observer recording Φ and NRMSD values after every iteration.
pub struct TraceRecorder<'s> {
    spec: &'s ObjectiveSpec,
    reference: Option<&'s [f64]>,
    rois: Vec<Roi>,
    trace: IterationTrace,
}

impl<'s> TraceRecorder<'s> {
    /// Records the row for the starting image immediately.
    pub fn new(
        algorithm: impl Into<String>,
        spec: &'s ObjectiveSpec,
        reference: Option<&'s [f64]>,
        rois: Vec<Roi>,
        f0: &[f64],
    ) -> Result<Self> {
        let mut rec = TraceRecorder {
            spec,
            reference,
            trace: IterationTrace {
                algorithm: algorithm.into(),
                roi_labels: rois.iter().map(|r| r.label.clone()).collect(),
                rows: Vec::new(),
            },
            rois,
        };
        let row = rec.row(0, 0, 0.0, f0)?;
        rec.trace.rows.push(row);
        Ok(rec)
    }

    fn row(&self, k: usize, i: usize, wall: f64, f: &[f64]) -> Result<TraceRow> {
        let (nrmsd_global, nrmsd_roi) = match self.reference {
            Some(reference) => (
                Some(nrmsd(f, reference, &Roi::full(f.len()))?),
                self.rois
                    .iter()
                    .map(|roi| nrmsd(f, reference, roi))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => (None, Vec::new()),
        };
        Ok(TraceRow {
            k,
            i,
            wall_time_s: wall,
            objective: self.spec.value(f)?,
            nrmsd_global,
            nrmsd_roi,
            theta_k: None,
            theta_tilde_k: None,
        })
    }

    pub fn finish(self) -> IterationTrace {
        self.trace
    }
}

impl Observer for TraceRecorder<'_> {
    fn on_iteration(&mut self, snap: &Snapshot<'_>) -> Result<()> {
        let row = self.row(snap.k + 1, snap.i, snap.elapsed.as_secs_f64(), snap.f)?;
        self.trace.rows.push(row);
        Ok(())
    }
}

/// First iteration index whose objective is at or below `target`.
pub fn first_iteration_reaching(trace: &IterationTrace, target: f64) -> Option<usize> {
    trace.rows.iter().find(|r| r.objective <= target).map(|r| r.k)
}
