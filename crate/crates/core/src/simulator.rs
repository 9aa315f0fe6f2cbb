//! Phantoms and synthetic emission data.
//!
//! Data model: trues are the forward projection of the PSF-blurred phantom,
//! scatter is a radially smoothed copy of the trues, randoms are uniform,
//! and the counts are a Poisson draw around their sum. The known background
//! handed to the reconstruction is the scatter + randoms mean.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{check_nonnegative, ReconError, Result};
use crate::image::Image;
use crate::projector::{ScannerGeometry, SystemMatrix};

/// Floor applied to every background entry so that ln(Af + γ) stays finite.
pub const BACKGROUND_FLOOR: f64 = 1e-10;

/// Linear attenuation coefficient of water, cm⁻¹.
pub const WATER_MU_PER_CM: f64 = 0.096;

const FWHM_TO_SIGMA: f64 = 0.424_660_900_144_009_5; // 1 / (2 √(2 ln 2))

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub activity: Image,
    pub support: Vec<bool>,
    pub label: String,
}

impl Phantom {
    /// Support is taken as the set of pixels with positive activity.
    pub fn from_activity(activity: Image, label: impl Into<String>) -> Result<Self> {
        check_nonnegative("phantom activity", activity.data())?;
        let support = activity.data().iter().map(|&v| v > 0.0).collect();
        Ok(Phantom {
            activity,
            support,
            label: label.into(),
        })
    }

    /// Uniform water attenuation over the support, in cm⁻¹.
    pub fn attenuation_map(&self, mu_per_cm: f64) -> Image {
        let data = self
            .support
            .iter()
            .map(|&s| if s { mu_per_cm } else { 0.0 })
            .collect();
        self.activity
            .with_data(data)
            .expect("support has one entry per pixel")
    }
}

/// A disk on the pixel grid, in pixel units relative to the image centre.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Disk {
    pub label: String,
    pub centre_x: f64,
    pub centre_y: f64,
    pub radius: f64,
    pub value: f64,
}

impl Disk {
    pub fn contains(&self, rows: usize, cols: usize, r: usize, c: usize) -> bool {
        let x = c as f64 + 0.5 - 0.5 * cols as f64 - self.centre_x;
        let y = r as f64 + 0.5 - 0.5 * rows as f64 - self.centre_y;
        x * x + y * y <= self.radius * self.radius
    }

    pub fn mask(&self, rows: usize, cols: usize) -> Vec<bool> {
        (0..rows * cols)
            .map(|j| self.contains(rows, cols, j / cols, j % cols))
            .collect()
    }
}

/// Layout of the uniform phantom at a given grid size. Lengths are defined
/// on a 256×256 grid and scaled with the smaller image dimension.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformLayout {
    pub rows: usize,
    pub cols: usize,
    pub background: Disk,
    pub inserts: Vec<Disk>,
    /// Background region used for local metrics (radius 25 px at 256²).
    pub background_roi: Disk,
}

const BACKGROUND_RADIUS: f64 = 105.0;
const INSERT_RING_RADIUS: f64 = 62.0;
const BACKGROUND_ROI_RADIUS: f64 = 25.0;
/// (radius at 256², activity) of the six inserts.
const INSERTS: [(f64, f64); 6] = [
    (4.0, 10.0),
    (6.0, 10.0),
    (8.0, 0.0),
    (10.0, 0.0),
    (12.0, 10.0),
    (14.0, 10.0),
];

impl UniformLayout {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 64 || cols < 64 {
            return Err(ReconError::InvalidPhantom(format!(
                "uniform phantom needs at least 64×64 pixels, got {rows}×{cols}"
            )));
        }
        let scale = rows.min(cols) as f64 / 256.0;
        let inserts = INSERTS
            .iter()
            .enumerate()
            .map(|(n, &(radius, value))| {
                let phi = std::f64::consts::PI / 3.0 * n as f64;
                let kind = if value > 1.0 { "hot" } else { "cold" };
                Disk {
                    label: format!("{kind}_r{radius}"),
                    centre_x: INSERT_RING_RADIUS * scale * phi.cos(),
                    centre_y: INSERT_RING_RADIUS * scale * phi.sin(),
                    radius: radius * scale,
                    value,
                }
            })
            .collect();
        Ok(UniformLayout {
            rows,
            cols,
            background: Disk {
                label: "body".into(),
                centre_x: 0.0,
                centre_y: 0.0,
                radius: BACKGROUND_RADIUS * scale,
                value: 1.0,
            },
            inserts,
            background_roi: Disk {
                label: "background".into(),
                centre_x: 0.0,
                centre_y: 0.0,
                radius: BACKGROUND_ROI_RADIUS * scale,
                value: 1.0,
            },
        })
    }
}

/// Uniform background disk of activity 1 with four hot (10) and two cold
/// (0) inserts of radii 4, 6, 8, 10, 12, 14 pixels at 256×256.
pub fn make_uniform_phantom(geom: &ScannerGeometry) -> Result<Phantom> {
    let layout = UniformLayout::new(geom.rows, geom.cols)?;
    let (rows, cols) = (geom.rows, geom.cols);
    let mut activity = Image::zeros(rows, cols, geom.pixel_size);
    let mut support = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if !layout.background.contains(rows, cols, r, c) {
                continue;
            }
            let mut v = layout.background.value;
            for disk in &layout.inserts {
                if disk.contains(rows, cols, r, c) {
                    v = disk.value;
                }
            }
            activity.set(r, c, v);
            support[r * cols + c] = true;
        }
    }
    Ok(Phantom {
        activity,
        support,
        label: "uniform".into(),
    })
}

/// Normalized Gaussian taps with σ in samples, truncated at 4σ.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_1d(input: &[f64], out: &mut [f64], taps: &[f64], n: usize, stride: usize) {
    let half = (taps.len() / 2) as isize;
    for i in 0..n {
        let mut acc = 0.0;
        for (t, &w) in taps.iter().enumerate() {
            let src = reflect(i as isize + t as isize - half, n);
            acc += w * input[src * stride];
        }
        out[i * stride] = acc;
    }
}

/// Separable Gaussian blur with unit-sum kernel and reflective boundary.
/// `fwhm_mm == 0` returns the input unchanged.
pub fn blur_psf(f: &Image, fwhm_mm: f64, pixel_size: f64) -> Result<Image> {
    if !(fwhm_mm.is_finite() && fwhm_mm >= 0.0 && pixel_size > 0.0) {
        return Err(ReconError::InvalidSpec(format!(
            "psf fwhm {fwhm_mm} mm / pixel {pixel_size} mm"
        )));
    }
    if fwhm_mm == 0.0 {
        return Ok(f.clone());
    }
    let taps = gaussian_kernel(fwhm_mm * FWHM_TO_SIGMA / pixel_size);
    let (rows, cols) = f.dims();
    let mut tmp = vec![0.0; rows * cols];
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        convolve_1d(&f.data()[span.clone()], &mut tmp[span], &taps, cols, 1);
    }
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        convolve_1d(&tmp[c..], &mut out[c..], &taps, rows, cols);
    }
    f.with_data(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    /// Expected total counts T + S + R.
    pub total_counts: f64,
    /// S / (T + S).
    pub scatter_fraction: f64,
    /// R / (T + S + R).
    pub random_fraction: f64,
    #[serde(default = "default_psf_fwhm")]
    pub psf_fwhm_mm: f64,
    /// FWHM of the radial scatter kernel in bins; defaults to n_radial / 4.
    #[serde(default)]
    pub scatter_smoothing_fwhm_bins: Option<f64>,
    #[serde(default = "default_mu")]
    pub attenuation_mu_per_cm: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_psf_fwhm() -> f64 {
    6.59
}

fn default_mu() -> f64 {
    WATER_MU_PER_CM
}

impl SimulationSpec {
    pub fn high_count() -> Self {
        SimulationSpec {
            total_counts: 6.8e6,
            scatter_fraction: 0.25,
            random_fraction: 0.25,
            psf_fwhm_mm: default_psf_fwhm(),
            scatter_smoothing_fwhm_bins: None,
            attenuation_mu_per_cm: WATER_MU_PER_CM,
            seed: 0,
        }
    }

    pub fn low_count() -> Self {
        SimulationSpec {
            total_counts: 6.8e5,
            ..Self::high_count()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.total_counts.is_finite() && self.total_counts > 0.0) {
            problems.push(format!("total_counts must be > 0, got {}", self.total_counts));
        }
        for (name, v) in [
            ("scatter_fraction", self.scatter_fraction),
            ("random_fraction", self.random_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                problems.push(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.psf_fwhm_mm.is_finite() && self.psf_fwhm_mm >= 0.0) {
            problems.push(format!("psf_fwhm_mm must be >= 0, got {}", self.psf_fwhm_mm));
        }
        if let Some(w) = self.scatter_smoothing_fwhm_bins {
            if !(w.is_finite() && w > 0.0) {
                problems.push(format!("scatter_smoothing_fwhm_bins must be > 0, got {w}"));
            }
        }
        if !(self.attenuation_mu_per_cm.is_finite() && self.attenuation_mu_per_cm >= 0.0) {
            problems.push("attenuation_mu_per_cm must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ReconError::InvalidSpec(problems.join("; ")))
        }
    }

    /// Expected (trues, scatter, randoms) totals.
    pub fn component_totals(&self) -> (f64, f64, f64) {
        let tc = self.total_counts;
        let randoms = self.random_fraction * tc;
        let prompts = tc - randoms;
        let scatter = self.scatter_fraction * prompts;
        (prompts - scatter, scatter, randoms)
    }
}

#[derive(Clone, Debug)]
pub struct EmissionData {
    pub n_angles: usize,
    pub n_radial: usize,
    pub counts: Vec<u64>,
    /// Known background mean γ = scatter + randoms (floored).
    pub background: Vec<f64>,
    pub trues_mean: Vec<f64>,
    pub scatter_mean: Vec<f64>,
    pub randoms_mean: Vec<f64>,
    pub truth: Phantom,
    pub spec: SimulationSpec,
}

impl EmissionData {
    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    /// Per-bin expected counts T̄ + S̄ + R̄.
    pub fn expected_counts(&self) -> Vec<f64> {
        (0..self.counts.len())
            .map(|j| self.trues_mean[j] + self.scatter_mean[j] + self.randoms_mean[j])
            .collect()
    }

    /// Writes `manifest.json`, `counts.u64le` and `background.f64le`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("counts.u64le"))?);
        for c in &self.counts {
            w.write_all(&c.to_le_bytes())?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("background.f64le"))?);
        for v in &self.background {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let manifest = serde_json::json!({
            "format": "sdp-emission-v1",
            "n_angles": self.n_angles,
            "n_radial": self.n_radial,
            "layout": "angle-major (row = angle * n_radial + radial)",
            "counts": { "file": "counts.u64le", "dtype": "u64", "endianness": "little" },
            "background": { "file": "background.f64le", "dtype": "f64", "endianness": "little" },
            "total_counts_observed": self.counts.iter().sum::<u64>(),
            "phantom": self.truth.label,
            "simulation": self.spec,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Gaussian smoothing of each angle's radial profile, reflective boundary.
fn smooth_radially(sino: &[f64], n_angles: usize, n_radial: usize, fwhm_bins: f64) -> Vec<f64> {
    let taps = gaussian_kernel(fwhm_bins * FWHM_TO_SIGMA);
    let mut out = vec![0.0; sino.len()];
    for a in 0..n_angles {
        let span = a * n_radial..(a + 1) * n_radial;
        convolve_1d(&sino[span.clone()], &mut out[span], &taps, n_radial, 1);
    }
    out
}

fn scaled_to(values: &mut [f64], total: f64) {
    let sum: f64 = values.iter().sum();
    if sum > 0.0 {
        let k = total / sum;
        values.iter_mut().for_each(|v| *v *= k);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Simulates one noisy acquisition. `a` should already carry the
/// attenuation of the phantom's support.
pub fn simulate_data(
    phantom: &Phantom,
    a: &SystemMatrix,
    geom: &ScannerGeometry,
    spec: &SimulationSpec,
) -> Result<EmissionData> {
    spec.validate()?;
    if a.n_rows() != geom.n_bins() {
        return Err(ReconError::shape("system matrix rows", geom.n_bins(), a.n_rows()));
    }
    let (t_total, s_total, r_total) = spec.component_totals();
    let blurred = blur_psf(&phantom.activity, spec.psf_fwhm_mm, phantom.activity.pixel_size())?;
    let mut trues = a.forward(blurred.data())?;
    if trues.iter().sum::<f64>() <= 0.0 {
        return Err(ReconError::InvalidPhantom("phantom projects to zero counts".into()));
    }
    scaled_to(&mut trues, t_total);

    let fwhm_bins = spec
        .scatter_smoothing_fwhm_bins
        .unwrap_or(geom.n_radial as f64 / 4.0);
    let mut scatter = if s_total > 0.0 {
        smooth_radially(&trues, geom.n_angles, geom.n_radial, fwhm_bins)
    } else {
        vec![0.0; trues.len()]
    };
    scaled_to(&mut scatter, s_total);

    let p = trues.len();
    let randoms = vec![r_total / p as f64; p];

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = (0..p)
        .map(|j| {
            let mean = trues[j] + scatter[j] + randoms[j];
            if mean > 0.0 {
                Poisson::new(mean)
                    .map(|d| d.sample(&mut rng) as u64)
                    .map_err(|e| ReconError::InvalidSpec(format!("bin {j}: {e}")))
            } else {
                Ok(0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let background = (0..p)
        .map(|j| (scatter[j] + randoms[j]).max(BACKGROUND_FLOOR))
        .collect();

    Ok(EmissionData {
        n_angles: geom.n_angles,
        n_radial: geom.n_radial,
        counts,
        background,
        trues_mean: trues,
        scatter_mean: scatter,
        randoms_mean: randoms,
        truth: phantom.clone(),
        spec: spec.clone(),
    })
}

/// Reads a phantom from text: `rows N`, `cols N` and `pixel_size_mm X`
/// header lines, then rows·cols whitespace-separated nonnegative values in
/// row-major order. `#` starts a comment.
pub fn read_phantom_file(path: &Path) -> Result<Phantom> {
    let text = fs::read_to_string(path)?;
    let bad = |detail: String| ReconError::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let mut header = |key: &str| -> Result<String> {
        match (tokens.next(), tokens.next()) {
            (Some(k), Some(v)) if k.trim_end_matches(':') == key => Ok(v.to_string()),
            _ => Err(bad(format!("expected header `{key} <value>`"))),
        }
    };
    let rows: usize = header("rows")?.parse().map_err(|e| bad(format!("rows: {e}")))?;
    let cols: usize = header("cols")?.parse().map_err(|e| bad(format!("cols: {e}")))?;
    let pixel: f64 = header("pixel_size_mm")?
        .parse()
        .map_err(|e| bad(format!("pixel_size_mm: {e}")))?;
    let values = tokens
        .map(|t| t.parse::<f64>().map_err(|e| bad(format!("value `{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != rows * cols {
        return Err(bad(format!("expected {} values, found {}", rows * cols, values.len())));
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "file".into());
    Phantom::from_activity(Image::from_vec(rows, cols, pixel, values)?, label)
}

pub fn write_phantom_file(phantom: &Phantom, path: &Path) -> Result<()> {
    let img = &phantom.activity;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "rows {}", img.rows())?;
    writeln!(w, "cols {}", img.cols())?;
    writeln!(w, "pixel_size_mm {}", img.pixel_size())?;
    for row in img.data().chunks(img.cols()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}
