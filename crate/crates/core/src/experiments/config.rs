use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ReconError, Result};
use crate::optimizer::AlgorithmConfig;
use crate::preconditioner::Variant;
use crate::projector::ScannerGeometry;
use crate::simulator::SimulationSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryPreset {
    #[default]
    Desk,
    Full,
}

/// A preset plus optional per-field overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(default)]
    pub preset: GeometryPreset,
    pub n_detectors: Option<usize>,
    pub detector_width: Option<f64>,
    pub fov: Option<f64>,
    pub n_angles: Option<usize>,
    pub n_radial: Option<usize>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub pixel_size: Option<f64>,
    pub rays_per_bin: Option<usize>,
}

impl GeometryConfig {
    pub fn resolve(&self) -> ScannerGeometry {
        let mut g = match self.preset {
            GeometryPreset::Desk => ScannerGeometry::desk_scale(),
            GeometryPreset::Full => ScannerGeometry::full_scale(),
        };
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    g.$field = v;
                }
            )*};
        }
        take!(n_detectors, detector_width, fov, n_angles, n_radial, rows, cols, pixel_size, rays_per_bin);
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PhantomConfig {
    /// Disk with four hot and two cold inserts, generated on the grid.
    Uniform,
    /// Text phantom file (see `read_phantom_file`); dimensions must match
    /// the geometry.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub beta: f64,
    #[serde(default = "default_gamma_r")]
    pub gamma_r: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_gamma_r() -> f64 {
    2.0
}

fn default_epsilon() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Margin of the projection band [t, U − t].
    #[serde(default = "default_t")]
    pub t: f64,
    /// Upper bound U; derived from a short OS-EM run when absent.
    pub upper: Option<f64>,
    /// Value of the uniform starting image.
    #[serde(default = "default_init")]
    pub init: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            t: default_t(),
            upper: None,
            init: default_init(),
        }
    }
}

fn default_t() -> f64 {
    1e-4
}

fn default_init() -> f64 {
    1.0
}

/// The converged image f∞ used for NRMSD: BSREM run long enough.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default = "default_reference_iterations")]
    pub iterations: usize,
    #[serde(default = "default_reference_subsets")]
    pub subsets: usize,
    /// Relaxation parameter a of the reference BSREM.
    pub a: f64,
    /// Checkpoint path; defaults to `<outputs.dir>/reference.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

fn default_reference_iterations() -> usize {
    400
}

fn default_reference_subsets() -> usize {
    24
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    pub dir: PathBuf,
    /// NRMSD columns; requires the reference checkpoint.
    #[serde(default = "yes")]
    pub nrmsd: bool,
    /// θ_k and θ̃_k columns.
    #[serde(default = "yes")]
    pub angles: bool,
    /// Per-subiteration angles in `angles.csv`.
    #[serde(default)]
    pub angle_samples: bool,
    /// Final images as raw little-endian f64.
    #[serde(default = "yes")]
    pub images: bool,
    /// System matrix cache file, reused when the geometry hash matches.
    pub matrix_cache: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

/// One `[[algorithms]]` entry: the optimizer parameters and a length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmEntry {
    pub variant: Variant,
    pub subsets: usize,
    pub n_iters: usize,
    #[serde(default = "one")]
    pub lambda0: f64,
    pub a: f64,
    pub rho: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub nu1: Option<f64>,
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

impl AlgorithmEntry {
    pub fn algorithm(&self) -> AlgorithmConfig {
        AlgorithmConfig {
            variant: self.variant,
            subsets: self.subsets,
            lambda0: self.lambda0,
            a: self.a,
            rho: self.rho,
            delta1: self.delta1,
            delta2: self.delta2,
            nu1: self.nu1,
            nu2: self.nu2,
            j0: self.j0,
            j1: self.j1,
        }
    }

    pub fn label(&self) -> String {
        self.algorithm().label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub geometry: GeometryConfig,
    pub phantom: PhantomConfig,
    pub simulation: SimulationSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub reference: ReferenceConfig,
    pub outputs: OutputsConfig,
    pub algorithms: Vec<AlgorithmEntry>,
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub desk_scale: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ReconError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            ReconError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ReconError::Config(msg) => ReconError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ReconError::Config(e.to_string()))
    }

    /// `--desk-scale` switches to the 64×64 geometry and scales the total
    /// counts by the ratio of pixel counts.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.simulation.seed = seed;
        }
        if let Some(dir) = &o.out_dir {
            self.outputs.dir = dir.clone();
        }
        if o.desk_scale {
            let before = self.geometry.resolve();
            self.geometry = GeometryConfig::default();
            let after = self.geometry.resolve();
            self.simulation.total_counts *=
                after.n_pixels() as f64 / before.n_pixels() as f64;
        }
    }

    pub fn reference_checkpoint(&self) -> PathBuf {
        self.reference
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.outputs.dir.join("reference.ckpt"))
    }

    pub fn reference_algorithm(&self) -> AlgorithmConfig {
        AlgorithmConfig::bsrem(self.reference.subsets, self.reference.a)
    }

    /// Every violation in the config, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.trim().is_empty() {
            out.push("name must not be empty".into());
        }
        let geom = self.geometry.resolve();
        if let Err(e) = geom.validate() {
            out.push(format!("geometry: {e}"));
        }
        if let Err(e) = self.simulation.validate() {
            out.push(format!("simulation: {e}"));
        }
        let m = &self.model;
        if !(m.beta.is_finite() && m.beta >= 0.0) {
            out.push(format!("model.beta must be >= 0, got {}", m.beta));
        }
        if !(m.gamma_r.is_finite() && m.gamma_r >= 0.0) {
            out.push(format!("model.gamma_r must be >= 0, got {}", m.gamma_r));
        }
        if !(m.epsilon.is_finite() && m.epsilon > 0.0) {
            out.push(format!("model.epsilon must be > 0, got {}", m.epsilon));
        }
        let o = &self.optimizer;
        if !(o.t.is_finite() && o.t > 0.0) {
            out.push(format!("optimizer.t must be > 0, got {}", o.t));
        }
        if let Some(u) = o.upper {
            if !(u.is_finite() && u > 2.0 * o.t) {
                out.push(format!("optimizer.upper must exceed 2t, got {u}"));
            }
        }
        if !(o.init.is_finite() && o.init > 0.0) {
            out.push(format!("optimizer.init must be > 0, got {}", o.init));
        }
        let r = &self.reference;
        if r.iterations == 0 {
            out.push("reference.iterations must be >= 1".into());
        }
        out.extend(
            self.reference_algorithm()
                .problems()
                .into_iter()
                .map(|p| format!("reference: {p}")),
        );
        if self.algorithms.is_empty() {
            out.push("algorithms: at least one entry is required".into());
        }
        for (n, entry) in self.algorithms.iter().enumerate() {
            if entry.n_iters == 0 {
                out.push(format!("algorithms[{n}] {}: n_iters must be >= 1", entry.label()));
            }
            out.extend(
                entry
                    .algorithm()
                    .problems()
                    .into_iter()
                    .map(|p| format!("algorithms[{n}] {p}")),
            );
            if geom.validate().is_ok() && entry.subsets > geom.n_angles {
                out.push(format!(
                    "algorithms[{n}] {}: {} subsets exceed {} angles",
                    entry.label(),
                    entry.subsets,
                    geom.n_angles
                ));
            }
        }
        let mut labels: Vec<String> = self.algorithms.iter().map(|e| e.label()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.algorithms.len() {
            out.push("algorithms: duplicate variant/subset combinations".into());
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

    /// SHA-256 of the canonical JSON form of the whole config.
    pub fn hash(&self) -> [u8; 32] {
        sha256_json(self)
    }

    /// SHA-256 of everything that determines f∞: the resolved geometry,
    /// phantom, simulation, model, bounds and reference run. Algorithm and
    /// output settings do not enter.
    pub fn problem_hash(&self) -> [u8; 32] {
        sha256_json(&serde_json::json!({
            "geometry": self.geometry.resolve(),
            "phantom": self.phantom,
            "simulation": self.simulation,
            "model": self.model,
            "optimizer": self.optimizer,
            "reference": {
                "iterations": self.reference.iterations,
                "subsets": self.reference.subsets,
                "a": self.reference.a,
            },
        }))
    }
}

fn sha256_json<T: Serialize>(value: &T) -> [u8; 32] {
    let bytes = serde_json::to_vec(value).expect("config serializes to JSON");
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
