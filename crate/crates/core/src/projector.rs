//! Ray-driven 2D system matrix, forward/back projection and ordered subsets.
//!
//! The sinogram is parallel-beam: `n_angles` projection angles evenly spread
//! over [0, π) and `n_radial` bins spaced `fov / n_radial` apart. A bin is the
//! average of `rays_per_bin` parallel sub-rays spread uniformly across the
//! detector width, each traced through the pixel grid with exact
//! intersection lengths (Siddon). Row index of bin `(angle, radial)` is
//! `angle * n_radial + radial`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, ReconError, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerGeometry {
    /// Detectors on the ring. Documents the scanner; the parallel-beam
    /// sampling below is what the projector actually uses.
    pub n_detectors: usize,
    /// Detector width in mm; sub-rays of a bin span this aperture.
    pub detector_width: f64,
    /// Field of view in mm.
    pub fov: f64,
    pub n_angles: usize,
    pub n_radial: usize,
    pub rows: usize,
    pub cols: usize,
    /// Pixel side in mm.
    pub pixel_size: f64,
    pub rays_per_bin: usize,
}

impl Default for ScannerGeometry {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl ScannerGeometry {
    /// Single-ring scanner at 256×256.
    pub fn full_scale() -> Self {
        ScannerGeometry {
            n_detectors: 576,
            detector_width: 4.0,
            fov: 300.0,
            n_angles: 288,
            n_radial: 288,
            rows: 256,
            cols: 256,
            pixel_size: 1.17,
            rays_per_bin: 32,
        }
    }

    /// 64×64 grid over the same field of view with 72 angles and 144 bins.
    pub fn desk_scale() -> Self {
        ScannerGeometry {
            n_angles: 72,
            n_radial: 144,
            rows: 64,
            cols: 64,
            pixel_size: 300.0 / 64.0,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_detectors", self.n_detectors),
            ("n_angles", self.n_angles),
            ("n_radial", self.n_radial),
            ("rows", self.rows),
            ("cols", self.cols),
            ("rays_per_bin", self.rays_per_bin),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ReconError::InvalidGeometry(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("fov", self.fov),
            ("pixel_size", self.pixel_size),
            ("detector_width", self.detector_width),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ReconError::InvalidGeometry(format!("{name} must be > 0, got {v}")));
            }
        }
        let extent = self.rows.min(self.cols) as f64 * self.pixel_size;
        if extent + self.pixel_size < self.fov {
            return Err(ReconError::InvalidGeometry(format!(
                "image extent {extent} mm does not cover the {} mm field of view",
                self.fov
            )));
        }
        Ok(())
    }

    /// Number of sinogram bins (system matrix rows).
    pub fn n_bins(&self) -> usize {
        self.n_angles * self.n_radial
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn radial_spacing(&self) -> f64 {
        self.fov / self.n_radial as f64
    }

    pub fn angle(&self, a: usize) -> f64 {
        std::f64::consts::PI * a as f64 / self.n_angles as f64
    }

    pub fn grid(&self) -> PixelGrid {
        PixelGrid {
            rows: self.rows,
            cols: self.cols,
            pixel_size: self.pixel_size,
        }
    }

    fn hash_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [
            self.n_detectors,
            self.n_angles,
            self.n_radial,
            self.rows,
            self.cols,
            self.rays_per_bin,
        ] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in [self.detector_width, self.fov, self.pixel_size] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }
}

/// Cache key for a system matrix: geometry plus attenuation map contents.
pub fn geometry_hash(geom: &ScannerGeometry, attenuation: Option<&Image>) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"SDPSM1");
    hasher.update(geom.hash_bytes());
    match attenuation {
        None => hasher.update([0u8]),
        Some(mu) => {
            hasher.update([1u8]);
            for v in mu.data() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Pixel grid centred on the origin. Column index grows with x, row index with y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelGrid {
    pub rows: usize,
    pub cols: usize,
    pub pixel_size: f64,
}

impl PixelGrid {
    fn x_min(&self) -> f64 {
        -0.5 * self.cols as f64 * self.pixel_size
    }

    fn y_min(&self) -> f64 {
        -0.5 * self.rows as f64 * self.pixel_size
    }
}

/// Reusable scratch space for [`trace_line`].
#[derive(Default)]
pub struct Tracer {
    ts: Vec<f64>,
}

impl Tracer {
    /// Visits every pixel crossed by the line `origin + t·dir` (|dir| = 1)
    /// with the exact intersection length.
    pub fn trace_line(
        &mut self,
        grid: &PixelGrid,
        origin: [f64; 2],
        dir: [f64; 2],
        mut visit: impl FnMut(usize, f64),
    ) {
        let s = grid.pixel_size;
        let (x0, y0) = (grid.x_min(), grid.y_min());
        let (x1, y1) = (-x0, -y0);
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        for (o, d, lo, hi) in [(origin[0], dir[0], x0, x1), (origin[1], dir[1], y0, y1)] {
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
                    return;
                }
            } else {
                let (a, b) = ((lo - o) / d, (hi - o) / d);
                t_enter = t_enter.max(a.min(b));
                t_exit = t_exit.min(a.max(b));
            }
        }
        if t_exit <= t_enter {
            return;
        }

        self.ts.clear();
        self.ts.push(t_enter);
        self.ts.push(t_exit);
        for (o, d, lo, n) in [
            (origin[0], dir[0], x0, grid.cols),
            (origin[1], dir[1], y0, grid.rows),
        ] {
            if d.abs() < 1e-15 {
                continue;
            }
            for plane in 1..n {
                let t = (lo + plane as f64 * s - o) / d;
                if t > t_enter && t < t_exit {
                    self.ts.push(t);
                }
            }
        }
        self.ts.sort_unstable_by(f64::total_cmp);

        for w in self.ts.windows(2) {
            let len = w[1] - w[0];
            if len <= 0.0 {
                continue;
            }
            let tm = 0.5 * (w[0] + w[1]);
            let px = origin[0] + tm * dir[0];
            let py = origin[1] + tm * dir[1];
            let c = (((px - x0) / s).floor().max(0.0) as usize).min(grid.cols - 1);
            let r = (((py - y0) / s).floor().max(0.0) as usize).min(grid.rows - 1);
            visit(r * grid.cols + c, len);
        }
    }
}

/// Sparse nonnegative p×q matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SystemMatrix {
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        check_len("row_ptr", n_rows + 1, row_ptr.len())?;
        check_len("col_idx", values.len(), col_idx.len())?;
        if row_ptr[0] != 0 || row_ptr[n_rows] != values.len() {
            return Err(ReconError::InvalidGeometry("inconsistent row pointers".into()));
        }
        if row_ptr.windows(2).any(|w| w[1] < w[0]) {
            return Err(ReconError::InvalidGeometry("row pointers not monotone".into()));
        }
        if col_idx.iter().any(|&c| c >= n_cols) {
            return Err(ReconError::InvalidGeometry("column index out of range".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ReconError::InvalidGeometry(
                "system matrix entries must be finite and nonnegative".into(),
            ));
        }
        Ok(SystemMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from a dense row-major array, dropping zeros.
    pub fn from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Result<Self> {
        check_len("dense matrix", n_rows * n_cols, dense.len())?;
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in dense.chunks(n_cols.max(1)).take(n_rows) {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Self::from_csr(n_rows, n_cols, row_ptr, col_idx, values)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.n_rows * self.n_cols];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                dense[r * self.n_cols + c] += v;
            }
        }
        dense
    }

    /// Af.
    pub fn forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        check_len("forward projection input", self.n_cols, f.len())?;
        Ok((0..self.n_rows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * f[c]).sum()
            })
            .collect())
    }

    /// Aᵀy, accumulated row by row in index order.
    pub fn back(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("back projection input", self.n_rows, y.len())?;
        let mut out = vec![0.0; self.n_cols];
        self.back_accumulate(y, &mut out);
        Ok(out)
    }

    pub(crate) fn back_accumulate(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c] += v * yr;
            }
        }
    }

    /// Aᵀ1.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (&c, &v) in self.col_idx.iter().zip(&self.values) {
            out[c] += v;
        }
        out
    }

    /// Sub-matrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> SystemMatrix {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &r in rows {
            let (cols, vals) = self.row(r);
            col_idx.extend_from_slice(cols);
            values.extend_from_slice(vals);
            row_ptr.push(values.len());
        }
        SystemMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Writes the binary cache file: magic `SDPSM1`, then geometry hash, p,
    /// q and nnz as u64 LE, then row pointers and column indices (u64 LE)
    /// and values (f64 LE).
    pub fn write_cache(&self, path: &Path, geometry_hash: u64) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        for v in [
            geometry_hash,
            self.n_rows as u64,
            self.n_cols as u64,
            self.nnz() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.row_ptr {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &v in &self.col_idx {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a cache file. Returns `Ok(None)` when the file is absent or was
    /// written for a different geometry hash.
    pub fn read_cache(path: &Path, geometry_hash: u64) -> Result<Option<SystemMatrix>> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut r = BufReader::new(file);
        let bad = |detail: &str| ReconError::Format {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let hash = read_u64(&mut r)?;
        if hash != geometry_hash {
            return Ok(None);
        }
        let n_rows = read_u64(&mut r)? as usize;
        let n_cols = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let row_ptr = (0..=n_rows)
            .map(|_| read_u64(&mut r).map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let col_idx = (0..nnz)
            .map(|_| read_u64(&mut r).map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let values = (0..nnz)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<std::io::Result<Vec<_>>>()?;
        SystemMatrix::from_csr(n_rows, n_cols, row_ptr, col_idx, values)
            .map(Some)
            .map_err(|e| bad(&e.to_string()))
    }

    /// Loads the cached matrix for this geometry, rebuilding (and rewriting
    /// the cache) on a miss.
    pub fn load_or_build(
        path: &Path,
        geom: &ScannerGeometry,
        attenuation: Option<&Image>,
    ) -> Result<SystemMatrix> {
        let hash = geometry_hash(geom, attenuation);
        if let Some(m) = Self::read_cache(path, hash)? {
            return Ok(m);
        }
        let m = build_system_matrix(geom, attenuation)?;
        m.write_cache(path, hash)?;
        Ok(m)
    }
}

const CACHE_MAGIC: &[u8; 6] = b"SDPSM1";

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Builds the ray-driven system matrix. When an attenuation map (μ in
/// cm⁻¹ per pixel) is given, each row is scaled by exp(−∫μ) along its bin.
pub fn build_system_matrix(
    geom: &ScannerGeometry,
    attenuation: Option<&Image>,
) -> Result<SystemMatrix> {
    geom.validate()?;
    if let Some(mu) = attenuation {
        if mu.dims() != (geom.rows, geom.cols) {
            return Err(ReconError::InvalidGeometry(format!(
                "attenuation map is {:?}, image grid is {:?}",
                mu.dims(),
                (geom.rows, geom.cols)
            )));
        }
        crate::error::check_nonnegative("attenuation map", mu.data())?;
    }
    let grid = geom.grid();
    let q = geom.n_pixels();
    let spacing = geom.radial_spacing();
    let inv_rays = 1.0 / geom.rays_per_bin as f64;
    let sub_offsets: Vec<f64> = (0..geom.rays_per_bin)
        .map(|m| ((m as f64 + 0.5) * inv_rays - 0.5) * geom.detector_width)
        .collect();

    let mut tracer = Tracer::default();
    let mut accum = vec![0.0; q];
    let mut touched: Vec<usize> = Vec::new();
    let mut row_ptr = Vec::with_capacity(geom.n_bins() + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();

    for a in 0..geom.n_angles {
        let theta = geom.angle(a);
        let dir = [theta.cos(), theta.sin()];
        let normal = [-dir[1], dir[0]];
        for b in 0..geom.n_radial {
            let centre = (b as f64 + 0.5 - 0.5 * geom.n_radial as f64) * spacing;
            for off in &sub_offsets {
                let s = centre + off;
                tracer.trace_line(&grid, [s * normal[0], s * normal[1]], dir, |j, len| {
                    if accum[j] == 0.0 {
                        touched.push(j);
                    }
                    accum[j] += len;
                });
            }
            touched.sort_unstable();
            let start = values.len();
            for &j in &touched {
                col_idx.push(j);
                values.push(accum[j] * inv_rays);
                accum[j] = 0.0;
            }
            touched.clear();
            if let Some(mu) = attenuation {
                // μ is per cm, lengths are mm.
                let integral: f64 = col_idx[start..]
                    .iter()
                    .zip(&values[start..])
                    .map(|(&j, &len)| len * mu.data()[j] * 0.1)
                    .sum();
                let scale = (-integral).exp();
                values[start..].iter_mut().for_each(|v| *v *= scale);
            }
            row_ptr.push(values.len());
        }
    }
    SystemMatrix::from_csr(geom.n_bins(), q, row_ptr, col_idx, values)
}

pub fn forward_project(a: &SystemMatrix, f: &[f64]) -> Result<Vec<f64>> {
    a.forward(f)
}

pub fn back_project(a: &SystemMatrix, y: &[f64]) -> Result<Vec<f64>> {
    a.back(y)
}

/// Disjoint row blocks and the order in which they are visited.
/// Subset ids are 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPartition {
    index_sets: Vec<Vec<usize>>,
    access_order: Vec<usize>,
}

impl SubsetPartition {
    /// Checks that `index_sets` partition `0..n_rows` and `access_order`
    /// is a permutation of the subset ids.
    pub fn new(index_sets: Vec<Vec<usize>>, access_order: Vec<usize>, n_rows: usize) -> Result<Self> {
        let m = index_sets.len();
        if m == 0 {
            return Err(ReconError::InvalidSubsets("at least one subset required".into()));
        }
        let mut seen = vec![false; n_rows];
        for (i, set) in index_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(ReconError::InvalidSubsets(format!("subset {i} is empty")));
            }
            for &r in set {
                if r >= n_rows || std::mem::replace(&mut seen[r], true) {
                    return Err(ReconError::InvalidSubsets(format!(
                        "row {r} out of range or in more than one subset"
                    )));
                }
            }
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(ReconError::InvalidSubsets(format!("row {r} not covered")));
        }
        let mut order = access_order.clone();
        order.sort_unstable();
        if order != (0..m).collect::<Vec<_>>() {
            return Err(ReconError::InvalidSubsets(
                "access order is not a permutation of the subsets".into(),
            ));
        }
        Ok(SubsetPartition {
            index_sets,
            access_order,
        })
    }

    /// One subset holding every row.
    pub fn single(n_rows: usize) -> Self {
        SubsetPartition {
            index_sets: vec![(0..n_rows).collect()],
            access_order: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.index_sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_sets.is_empty()
    }

    pub fn subset(&self, i: usize) -> &[usize] {
        &self.index_sets[i]
    }

    pub fn index_sets(&self) -> &[Vec<usize>] {
        &self.index_sets
    }

    pub fn access_order(&self) -> &[usize] {
        &self.access_order
    }

    pub fn n_rows(&self) -> usize {
        self.index_sets.iter().map(Vec::len).sum()
    }
}

/// Angle-strided subsets: subset `i` holds every angle `a` with
/// `a mod m == i`. Subsets are visited in bit-reversed order so that
/// consecutive subsets are far apart in angle.
pub fn partition_subsets(geom: &ScannerGeometry, m: usize) -> Result<SubsetPartition> {
    if m == 0 || m > geom.n_angles || !geom.n_angles.is_multiple_of(m) {
        return Err(ReconError::InvalidSubsets(format!(
            "{m} subsets do not divide {} projection angles",
            geom.n_angles
        )));
    }
    let index_sets = (0..m)
        .map(|i| {
            (i..geom.n_angles)
                .step_by(m)
                .flat_map(|a| (0..geom.n_radial).map(move |b| a * geom.n_radial + b))
                .collect()
        })
        .collect();
    Ok(SubsetPartition {
        index_sets,
        access_order: bit_reversal_order(m),
    })
}

/// Permutation of `0..m` obtained by reading `0..2^⌈log2 m⌉` in
/// bit-reversed order and dropping values ≥ m.
pub fn bit_reversal_order(m: usize) -> Vec<usize> {
    let bits = m.next_power_of_two().trailing_zeros();
    (0..m.next_power_of_two())
        .map(|k| if bits == 0 { 0 } else { k.reverse_bits() >> (usize::BITS - bits) })
        .filter(|&r| r < m)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rows: usize, cols: usize, pixel: f64) -> ScannerGeometry {
        ScannerGeometry {
            n_detectors: 16,
            detector_width: pixel,
            fov: rows.min(cols) as f64 * pixel,
            n_angles: 8,
            n_radial: 12,
            rows,
            cols,
            pixel_size: pixel,
            rays_per_bin: 4,
        }
    }

    /// Chord of a line through an axis-aligned square by parametric
    /// clipping, independent of the grid tracer.
    fn square_chord(half: f64, origin: [f64; 2], dir: [f64; 2]) -> f64 {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..2 {
            if dir[k].abs() < 1e-15 {
                if origin[k].abs() > half {
                    return 0.0;
                }
                continue;
            }
            let a = (-half - origin[k]) / dir[k];
            let b = (half - origin[k]) / dir[k];
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (hi - lo).max(0.0)
    }

    #[test]
    fn chord_through_single_pixel_centre() {
        let grid = PixelGrid { rows: 1, cols: 1, pixel_size: 2.5 };
        let mut tracer = Tracer::default();
        for theta in [0.0, 0.3, std::f64::consts::FRAC_PI_4, 1.2, std::f64::consts::FRAC_PI_2] {
            let dir = [f64::cos(theta), f64::sin(theta)];
            let mut hits = Vec::new();
            tracer.trace_line(&grid, [0.0, 0.0], dir, |j, l| hits.push((j, l)));
            let expected = square_chord(1.25, [0.0, 0.0], dir);
            assert_eq!(hits.len(), 1);
            assert!((hits[0].1 - expected).abs() < 1e-12, "{theta}: {hits:?} vs {expected}");
        }
        // Horizontal ray: chord equals the side.
        let mut total = 0.0;
        tracer.trace_line(&grid, [0.0, 0.0], [1.0, 0.0], |_, l| total += l);
        assert_eq!(total, 2.5);
    }

    #[test]
    fn traced_lengths_sum_to_clipped_chord() {
        let grid = PixelGrid { rows: 7, cols: 7, pixel_size: 1.3 };
        let half = 3.5 * 1.3;
        let mut tracer = Tracer::default();
        for k in 0..40 {
            let theta = 0.0731 * k as f64;
            let dir = [theta.cos(), theta.sin()];
            let s = -4.0 + 0.2 * k as f64;
            let origin = [-s * dir[1], s * dir[0]];
            let mut total = 0.0;
            tracer.trace_line(&grid, origin, dir, |_, l| total += l);
            let expected = square_chord(half, origin, dir);
            assert!((total - expected).abs() < 1e-10, "k={k}: {total} vs {expected}");
        }
    }

    #[test]
    fn zero_attenuation_matches_no_attenuation() {
        let geom = tiny(8, 8, 2.0);
        let plain = build_system_matrix(&geom, None).unwrap();
        let mu = Image::zeros(8, 8, 2.0);
        let att = build_system_matrix(&geom, Some(&mu)).unwrap();
        assert_eq!(plain, att);
    }

    #[test]
    fn attenuation_over_disk_scales_diametral_row() {
        // Fine grid so the rasterized disk is close to a true disk.
        let geom = ScannerGeometry {
            n_detectors: 64,
            detector_width: 0.05,
            fov: 100.0,
            n_angles: 4,
            n_radial: 101,
            rows: 400,
            cols: 400,
            pixel_size: 0.25,
            rays_per_bin: 1,
        };
        let diameter = 60.0;
        let mut mu = Image::zeros(400, 400, 0.25);
        for r in 0..400 {
            for c in 0..400 {
                let x = (c as f64 + 0.5 - 200.0) * 0.25;
                let y = (r as f64 + 0.5 - 200.0) * 0.25;
                if x * x + y * y <= 0.25 * diameter * diameter {
                    mu.set(r, c, 0.096);
                }
            }
        }
        let plain = build_system_matrix(&geom, None).unwrap();
        let att = build_system_matrix(&geom, Some(&mu)).unwrap();
        // Bin 50 of 101 passes through the centre.
        let row = 50;
        let scale = att.row(row).1[0] / plain.row(row).1[0];
        let expected = (-0.096 * diameter / 10.0).exp();
        // One pixel of rasterization error at each end of the chord.
        let tol = 0.096 * 2.0 * 0.25 / 10.0;
        assert!((scale.ln() - expected.ln()).abs() < tol, "{scale} vs {expected}");
        for (a, b) in att.row(row).1.iter().zip(plain.row(row).1) {
            assert!((a / b - scale).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_is_nonnegative_and_rows_match_fov_chords() {
        let geom = tiny(8, 8, 2.0);
        let a = build_system_matrix(&geom, None).unwrap();
        assert_eq!(a.shape(), (geom.n_bins(), 64));
        assert!(a.values().iter().all(|&v| v >= 0.0));
        // Angle 0 is horizontal: each central bin's row sum is the grid width.
        let (_, vals) = a.row(geom.n_radial / 2);
        assert!((vals.iter().sum::<f64>() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn zero_size_geometry_rejected() {
        let mut geom = tiny(8, 8, 2.0);
        geom.n_angles = 0;
        assert!(matches!(
            build_system_matrix(&geom, None),
            Err(ReconError::InvalidGeometry(_))
        ));
        let mut geom = tiny(8, 8, 2.0);
        geom.pixel_size = 0.0;
        assert!(geom.validate().is_err());
    }

    #[test]
    fn projection_examples() {
        let geom = tiny(8, 8, 2.0);
        let a = build_system_matrix(&geom, None).unwrap();
        assert!(a.forward(&vec![0.0; 64]).unwrap().iter().all(|&v| v == 0.0));
        assert!(a.back(&vec![0.0; a.n_rows()]).unwrap().iter().all(|&v| v == 0.0));
        let dense = a.to_dense();
        let j = 27;
        let mut e = vec![0.0; 64];
        e[j] = 1.0;
        let col = a.forward(&e).unwrap();
        for r in 0..a.n_rows() {
            assert_eq!(col[r], dense[r * 64 + j]);
        }
        let ones = vec![1.0; a.n_rows()];
        let bp = a.back(&ones).unwrap();
        let cs = a.column_sums();
        for (x, y) in bp.iter().zip(&cs) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        assert!(matches!(a.forward(&[1.0; 3]), Err(ReconError::Shape { .. })));
        assert!(matches!(a.back(&[1.0; 3]), Err(ReconError::Shape { .. })));
    }

    #[test]
    fn doubling_pixel_size_scales_chords() {
        // 1×2 grid of side s versus side 2s: every chord doubles.
        let g1 = PixelGrid { rows: 1, cols: 2, pixel_size: 1.0 };
        let g2 = PixelGrid { rows: 1, cols: 2, pixel_size: 2.0 };
        let mut tracer = Tracer::default();
        for theta in [0.1f64, 0.4, 1.0] {
            let dir = [theta.cos(), theta.sin()];
            let mut l1 = [0.0; 2];
            let mut l2 = [0.0; 2];
            tracer.trace_line(&g1, [0.0, 0.0], dir, |j, l| l1[j] += l);
            tracer.trace_line(&g2, [0.0, 0.0], dir, |j, l| l2[j] += l);
            for j in 0..2 {
                assert!((l2[j] - 2.0 * l1[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn subsets_follow_angle_stride() {
        let mut geom = tiny(8, 8, 2.0);
        geom.n_radial = 3;
        let p = partition_subsets(&geom, 4).unwrap();
        assert_eq!(p.subset(0), &[0, 1, 2, 12, 13, 14]);
        assert_eq!(p.subset(1), &[3, 4, 5, 15, 16, 17]);
        assert_eq!(p.access_order(), &[0, 2, 1, 3]);

        let one = partition_subsets(&geom, 1).unwrap();
        assert_eq!(one.access_order(), &[0]);
        assert_eq!(one.subset(0), (0..24).collect::<Vec<_>>().as_slice());

        assert!(matches!(
            partition_subsets(&geom, 3),
            Err(ReconError::InvalidSubsets(_))
        ));
        assert!(partition_subsets(&geom, 0).is_err());
    }

    #[test]
    fn bit_reversal_is_a_permutation() {
        for m in 1..=40 {
            let mut o = bit_reversal_order(m);
            assert_eq!(o.len(), m);
            assert_eq!(o[0], 0);
            o.sort_unstable();
            assert_eq!(o, (0..m).collect::<Vec<_>>());
        }
        assert_eq!(&bit_reversal_order(24)[..6], &[0, 16, 8, 4, 20, 12]);
    }

    #[test]
    fn cache_round_trip_and_hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sm");
        let geom = tiny(8, 8, 2.0);
        let a = SystemMatrix::load_or_build(&path, &geom, None).unwrap();
        let h = geometry_hash(&geom, None);
        assert_eq!(SystemMatrix::read_cache(&path, h).unwrap().unwrap(), a);
        assert!(SystemMatrix::read_cache(&path, h ^ 1).unwrap().is_none());

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"SDPSM1");
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), h);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), a.n_rows() as u64);

        let mut other = geom.clone();
        other.rays_per_bin = 2;
        let b = SystemMatrix::load_or_build(&path, &other, None).unwrap();
        assert_ne!(a, b);
        assert_eq!(b, build_system_matrix(&other, None).unwrap());
    }
}
