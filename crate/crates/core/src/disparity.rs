use crate::error::{Error, Result};

/// Per-pixel disparities with a validity mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl DisparityMap {
    /// All pixels invalid, values zero.
    pub fn invalid(width: usize, height: usize) -> Self {
        DisparityMap {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Every pixel valid.
    pub fn dense(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::from_parts(width, height, values, valid)
    }

    pub fn from_parts(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::shape(
                "disparity_map",
                format!(
                    "{}x{} map needs {} entries, got {} values and {} flags",
                    width,
                    height,
                    width * height,
                    values.len(),
                    valid.len()
                ),
            ));
        }
        let values = values
            .into_iter()
            .zip(&valid)
            .map(|(v, ok)| if *ok { v } else { 0.0 })
            .collect();
        Ok(DisparityMap {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.index(x, y)]
    }

    pub fn value(&self, x: usize, y: usize) -> f32 {
        self.values[self.index(x, y)]
    }

    /// The disparity at `(x, y)` if it is valid.
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = self.index(x, y);
        self.valid[i].then_some(self.values[i])
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        let i = self.index(x, y);
        self.values[i] = value;
        self.valid[i] = true;
    }

    /// Marks `(x, y)` invalid and zeroes its value, so equal maps compare equal.
    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = self.index(x, y);
        self.valid[i] = false;
        self.values[i] = 0.0;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Fraction of valid pixels.
    pub fn density(&self) -> f64 {
        if self.valid.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.valid.len() as f64
        }
    }

    pub fn same_size(&self, other: &DisparityMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}
