use crate::error::{check_len, Result};

/// Row-major 2D image with square pixels of side `pixel_size` (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    rows: usize,
    cols: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(rows: usize, cols: usize, pixel_size: f64) -> Self {
        Self::filled(rows, cols, pixel_size, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, pixel_size: f64, value: f64) -> Self {
        Image {
            rows,
            cols,
            pixel_size,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, pixel_size: f64, data: Vec<f64>) -> Result<Self> {
        check_len("image data", rows * cols, data.len())?;
        Ok(Image {
            rows,
            cols,
            pixel_size,
            data,
        })
    }

    /// Same grid as `self`, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Image::from_vec(self.rows, self.cols, self.pixel_size, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, c, self.get(r, self.cols - 1 - c));
            }
        }
        out
    }
}
