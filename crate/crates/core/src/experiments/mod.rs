//! Declarative experiments: simulate, reconstruct with each configured
//! algorithm, and write traces, images and a manifest.
//!
//! Output directory layout:
//!
//! | file | content |
//! |------|---------|
//! | `trace.csv` | one row per (algorithm, k): objective, NRMSD, mean angles |
//! | `timing.csv` | optimizer wall time per (algorithm, k) |
//! | `angles.csv` | per-subiteration angles (optional) |
//! | `final_<label>.f64le` | last iterate, row-major little-endian f64 |
//! | `manifest.json` | config hash, version, seeds, file inventory |
//!
//! `trace.csv` is a pure function of the config, so reruns are
//! byte-identical; timings live in their own file.

mod config;

pub use config::{
    hex, AlgorithmEntry, ExperimentConfig, GeometryConfig, GeometryPreset, ModelConfig,
    OptimizerConfig, OutputsConfig, Overrides, PhantomConfig, ReferenceConfig,
};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{ReconError, Result};
use crate::image::Image;
use crate::metrics::{
    nrmsd, uniform_rois, AngleDiagnostics, AngleTracker, IterationTrace, Roi, TraceRecorder,
};
use crate::objective::{Neighborhood, ObjectiveSpec, RelativeDifferencePrior};
use crate::optimizer::{default_upper_bound, AlgorithmConfig, Bounds, Checkpoint, Observer, Reconstructor};
use crate::projector::{build_system_matrix, partition_subsets, ScannerGeometry, SystemMatrix};
use crate::simulator::{
    make_uniform_phantom, read_phantom_file, simulate_data, EmissionData, Phantom, UniformLayout,
};

/// Everything shared by the algorithms of one experiment.
pub struct Problem {
    pub geometry: ScannerGeometry,
    pub phantom: Phantom,
    pub layout: Option<UniformLayout>,
    pub data: EmissionData,
    pub rois: Vec<Roi>,
    pub bounds: Bounds,
    pub f0: Vec<f64>,
    /// Single-subset objective; subset variants share its matrix.
    pub objective: ObjectiveSpec,
}

pub fn load_phantom(cfg: &ExperimentConfig, geom: &ScannerGeometry) -> Result<Phantom> {
    match &cfg.phantom {
        PhantomConfig::Uniform => make_uniform_phantom(geom),
        PhantomConfig::File { path } => {
            let p = read_phantom_file(path)?;
            if p.activity.dims() != (geom.rows, geom.cols) {
                return Err(ReconError::InvalidPhantom(format!(
                    "{} is {}×{}, geometry expects {}×{}",
                    path.display(),
                    p.activity.rows(),
                    p.activity.cols(),
                    geom.rows,
                    geom.cols
                )));
            }
            // Pixel size follows the geometry.
            let activity = Image::from_vec(geom.rows, geom.cols, geom.pixel_size, p.activity.into_vec())?;
            Ok(Phantom { activity, ..p })
        }
    }
}

impl Problem {
    pub fn build(cfg: &ExperimentConfig) -> Result<Problem> {
        cfg.validate()?;
        let geometry = cfg.geometry.resolve();
        let phantom = load_phantom(cfg, &geometry)?;
        let layout = match cfg.phantom {
            PhantomConfig::Uniform => Some(UniformLayout::new(geometry.rows, geometry.cols)?),
            PhantomConfig::File { .. } => None,
        };
        let mu = cfg.simulation.attenuation_mu_per_cm;
        let attenuation = (mu > 0.0).then(|| phantom.attenuation_map(mu));
        let matrix = match &cfg.outputs.matrix_cache {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                SystemMatrix::load_or_build(path, &geometry, attenuation.as_ref())?
            }
            None => build_system_matrix(&geometry, attenuation.as_ref())?,
        };
        let data = simulate_data(&phantom, &matrix, &geometry, &cfg.simulation)?;
        let prior = RelativeDifferencePrior {
            rows: geometry.rows,
            cols: geometry.cols,
            gamma_r: cfg.model.gamma_r,
            epsilon: cfg.model.epsilon,
            neighborhood: Neighborhood::eight_point(),
        };
        let objective = ObjectiveSpec::new(
            Arc::new(matrix),
            data.counts_f64(),
            data.background.clone(),
            cfg.model.beta,
            prior,
            partition_subsets(&geometry, 1)?,
        )?;
        let f0 = vec![cfg.optimizer.init; geometry.n_pixels()];
        let upper = match cfg.optimizer.upper {
            Some(u) => u,
            None => {
                let spec = objective.with_partition(partition_subsets(&geometry, cfg.reference.subsets)?)?;
                default_upper_bound(&spec, &f0)?
            }
        };
        let bounds = Bounds {
            t: cfg.optimizer.t,
            upper,
        };
        bounds.validate()?;
        if cfg.optimizer.init > upper {
            return Err(ReconError::Config(format!(
                "optimizer.init = {} exceeds the upper bound {upper}",
                cfg.optimizer.init
            )));
        }
        let rois = match &layout {
            Some(l) => uniform_rois(l)?,
            None => Vec::new(),
        };
        Ok(Problem {
            geometry,
            phantom,
            layout,
            data,
            rois,
            bounds,
            f0,
            objective,
        })
    }

    /// Objective split into `m` angle-interleaved subsets.
    pub fn objective_with_subsets(&self, m: usize) -> Result<ObjectiveSpec> {
        if m == 1 {
            return Ok(self.objective.clone());
        }
        self.objective.with_partition(partition_subsets(&self.geometry, m)?)
    }

    /// Runs `cfg` for `n_iters` iterations from f0 and returns the image.
    pub fn reconstruct(
        &self,
        cfg: &AlgorithmConfig,
        n_iters: usize,
        observers: &mut [&mut dyn Observer],
    ) -> Result<Vec<f64>> {
        let spec = self.objective_with_subsets(cfg.subsets)?;
        let mut recon = Reconstructor::new(&spec, cfg.clone(), self.bounds, self.f0.clone())?;
        recon.run(n_iters, observers)?;
        Ok(recon.into_image())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceReport {
    pub checkpoint: PathBuf,
    pub iterations: usize,
    pub objective: f64,
    pub problem_hash: String,
}

/// Runs the BSREM reference and writes its checkpoint.
pub fn emit_reference(cfg: &ExperimentConfig) -> Result<ReferenceReport> {
    let problem = Problem::build(cfg)?;
    emit_reference_for(cfg, &problem)
}

pub fn emit_reference_for(cfg: &ExperimentConfig, problem: &Problem) -> Result<ReferenceReport> {
    let image = problem.reconstruct(&cfg.reference_algorithm(), cfg.reference.iterations, &mut [])?;
    let path = cfg.reference_checkpoint();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let objective = problem.objective.value(&image)?;
    Checkpoint {
        iteration: cfg.reference.iterations as u64,
        rows: problem.geometry.rows,
        cols: problem.geometry.cols,
        config_hash: cfg.problem_hash(),
        image,
    }
    .write(&path)?;
    Ok(ReferenceReport {
        checkpoint: path,
        iterations: cfg.reference.iterations,
        objective,
        problem_hash: hex(&cfg.problem_hash()),
    })
}

/// Loads f∞, refusing checkpoints computed for a different problem.
pub fn load_reference(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let path = cfg.reference_checkpoint();
    let rerun = format!("run `recon reference` with this config to create {}", path.display());
    if !path.exists() {
        return Err(ReconError::ReferenceMissing(format!("{} not found; {rerun}", path.display())));
    }
    let ck = Checkpoint::read(&path)?;
    if ck.config_hash != cfg.problem_hash() {
        return Err(ReconError::ReferenceMissing(format!(
            "{} was computed for a different problem; {rerun}",
            path.display()
        )));
    }
    let geom = cfg.geometry.resolve();
    if (ck.rows, ck.cols) != (geom.rows, geom.cols) {
        return Err(ReconError::ReferenceMissing(format!(
            "{} is {}×{}, geometry is {}×{}; {rerun}",
            path.display(),
            ck.rows,
            ck.cols,
            geom.rows,
            geom.cols
        )));
    }
    Ok(ck.image)
}

#[derive(Clone, Debug, Serialize)]
pub struct AlgorithmResult {
    pub label: String,
    pub n_iters: usize,
    pub final_objective: f64,
    pub final_nrmsd_global: Option<f64>,
    pub elapsed_s: f64,
    #[serde(skip)]
    pub trace: IterationTrace,
    #[serde(skip)]
    pub angles: Option<AngleDiagnostics>,
    #[serde(skip)]
    pub image: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub name: String,
    pub software: String,
    pub version: String,
    pub config_hash: String,
    pub problem_hash: String,
    pub simulation_seed: u64,
    pub geometry: ScannerGeometry,
    pub upper_bound: f64,
    pub counts_observed: u64,
    pub reference: Option<PathBuf>,
    pub roi_labels: Vec<String>,
    pub algorithms: Vec<AlgorithmResult>,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub results: Vec<AlgorithmResult>,
    pub manifest: Manifest,
}

/// Runs every configured algorithm and writes the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    // Fail on a missing reference before the expensive work.
    let reference = if cfg.outputs.nrmsd {
        Some(load_reference(cfg)?)
    } else {
        None
    };
    let problem = Problem::build(cfg)?;
    let results = cfg
        .algorithms
        .iter()
        .map(|entry| run_algorithm(cfg, &problem, entry, reference.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    write_outputs(cfg, &problem, results)
}

pub fn run_algorithm(
    cfg: &ExperimentConfig,
    problem: &Problem,
    entry: &AlgorithmEntry,
    reference: Option<&[f64]>,
) -> Result<AlgorithmResult> {
    let alg = entry.algorithm();
    let spec = problem.objective_with_subsets(alg.subsets)?;
    let mut recon = Reconstructor::new(&spec, alg.clone(), problem.bounds, problem.f0.clone())?;
    let rois = if reference.is_some() { problem.rois.clone() } else { Vec::new() };
    let mut recorder = TraceRecorder::new(alg.label(), &problem.objective, reference, rois, &problem.f0)?;
    let (stats, trace, angles) = if cfg.outputs.angles {
        let mut tracker = AngleTracker::new(&spec, &problem.f0)?.keep_samples(cfg.outputs.angle_samples);
        let stats = recon.run(entry.n_iters, &mut [&mut recorder, &mut tracker])?;
        let angles = tracker.finish();
        let mut trace = recorder.finish();
        trace.attach_angles(&angles);
        (stats, trace, Some(angles))
    } else {
        let stats = recon.run(entry.n_iters, &mut [&mut recorder])?;
        (stats, recorder.finish(), None)
    };
    let image = recon.into_image();
    let last = trace.rows.last().expect("trace has the initial row");
    Ok(AlgorithmResult {
        label: alg.label(),
        n_iters: entry.n_iters,
        final_objective: last.objective,
        final_nrmsd_global: match reference {
            Some(r) => Some(nrmsd(&image, r, &Roi::full(image.len()))?),
            None => None,
        },
        elapsed_s: stats.elapsed.as_secs_f64(),
        trace,
        angles,
        image,
    })
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// File-name-safe form of an algorithm label, e.g. `SDP-P1(24)` → `sdp-p1_24`.
pub fn slug(label: &str) -> String {
    label
        .to_ascii_lowercase()
        .replace('(', "_")
        .replace(')', "")
}

pub fn write_trace_csv(path: &Path, results: &[AlgorithmResult], roi_labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["algorithm".to_string(), "k".into(), "i".into(), "objective".into(), "nrmsd_global".into()];
    header.extend(roi_labels.iter().map(|l| format!("nrmsd_roi_{l}")));
    header.extend(["theta_k".to_string(), "theta_tilde_k".into()]);
    w.write_record(&header)?;
    for res in results {
        for row in &res.trace.rows {
            let mut rec = vec![res.label.clone(), row.k.to_string(), row.i.to_string(), num(row.objective), opt(row.nrmsd_global)];
            if row.nrmsd_roi.is_empty() {
                rec.extend(roi_labels.iter().map(|_| String::new()));
            } else {
                rec.extend(row.nrmsd_roi.iter().copied().map(num));
            }
            rec.extend([opt(row.theta_k), opt(row.theta_tilde_k)]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_timing_csv(path: &Path, results: &[AlgorithmResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["algorithm", "k", "wall_time_s"])?;
    for res in results {
        for row in &res.trace.rows {
            w.write_record([res.label.clone(), row.k.to_string(), num(row.wall_time_s)])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_angle_samples(path: &Path, results: &[AlgorithmResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["algorithm", "k", "i", "theta", "theta_tilde", "smooth_pixels", "variable_pixels"])?;
    for res in results {
        let Some(angles) = &res.angles else { continue };
        for s in &angles.samples {
            w.write_record([
                res.label.clone(),
                s.k.to_string(),
                s.i.to_string(),
                opt(s.theta),
                opt(s.theta_tilde),
                s.smooth_pixels.to_string(),
                s.variable_pixels.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_f64le(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn file_entry(dir: &Path, name: &str) -> Result<FileEntry> {
    let bytes = fs::read(dir.join(name))?;
    Ok(FileEntry {
        name: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

fn write_outputs(cfg: &ExperimentConfig, problem: &Problem, results: Vec<AlgorithmResult>) -> Result<ExperimentReport> {
    let dir = cfg.outputs.dir.clone();
    fs::create_dir_all(&dir)?;
    let roi_labels: Vec<String> = if cfg.outputs.nrmsd {
        problem.rois.iter().map(|r| r.label.clone()).collect()
    } else {
        Vec::new()
    };
    let mut files = vec!["trace.csv".to_string(), "timing.csv".to_string()];
    write_trace_csv(&dir.join("trace.csv"), &results, &roi_labels)?;
    write_timing_csv(&dir.join("timing.csv"), &results)?;
    if cfg.outputs.angles && cfg.outputs.angle_samples {
        write_angle_samples(&dir.join("angles.csv"), &results)?;
        files.push("angles.csv".into());
    }
    if cfg.outputs.images {
        for res in &results {
            let name = format!("final_{}.f64le", slug(&res.label));
            write_f64le(&dir.join(&name), &res.image)?;
            files.push(name);
        }
    }
    let manifest = Manifest {
        name: cfg.name.clone(),
        software: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hex(&cfg.hash()),
        problem_hash: hex(&cfg.problem_hash()),
        simulation_seed: cfg.simulation.seed,
        geometry: problem.geometry.clone(),
        upper_bound: problem.bounds.upper,
        counts_observed: problem.data.counts.iter().sum(),
        reference: cfg.outputs.nrmsd.then(|| cfg.reference_checkpoint()),
        roi_labels,
        algorithms: results.clone(),
        files: files.iter().map(|f| file_entry(&dir, f)).collect::<Result<_>>()?,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentReport {
        out_dir: dir,
        results,
        manifest,
    })
}
