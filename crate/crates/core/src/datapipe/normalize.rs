use serde::{Deserialize, Serialize};

use super::{WindowSet, WindowedSample};
use crate::error::{Error, Result};

/// Floor applied to per-variable standard deviations (constant variables).
pub const STD_FLOOR: f64 = 1e-8;

/// Per-variable standardisation fitted on the training windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Fingerprint of the window set the statistics were fitted on.
    pub fitted_on: String,
}

impl NormalizationStats {
    /// Population mean and standard deviation of every variable over all
    /// training cells.
    pub fn fit(windows: &WindowSet) -> Result<Self> {
        if windows.len() < 2 {
            return Err(Error::Invalid(format!(
                "normalisation needs at least 2 training windows, got {}",
                windows.len()
            )));
        }
        let m = windows.cols();
        let count = (windows.len() * windows.rows()) as f64;
        let mut mean = vec![0.0; m];
        for row in windows.data().chunks(m) {
            mean.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        mean.iter_mut().for_each(|s| *s /= count);
        let mut var = vec![0.0; m];
        for row in windows.data().chunks(m) {
            for j in 0..m {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(STD_FLOOR)).collect();
        Ok(NormalizationStats {
            mean,
            std,
            fitted_on: windows.fingerprint(),
        })
    }

    pub fn variables(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.variables() {
            return Err(Error::Dimension {
                op: "apply_normalization",
                axis: "variables",
                expected: self.variables(),
                found: cols,
            });
        }
        Ok(())
    }

    /// `(x - mean_j) / std_j` on every cell, in place.
    pub fn apply(&self, windows: &mut WindowSet) -> Result<()> {
        self.check(windows.cols())?;
        let m = self.variables();
        for row in windows.data_mut().chunks_mut(m) {
            for j in 0..m {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        Ok(())
    }

    pub fn apply_sample(&self, sample: &mut WindowedSample) -> Result<()> {
        self.check(sample.cols)?;
        let m = self.variables();
        for row in sample.data.chunks_mut(m) {
            for j in 0..m {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        Ok(())
    }

    /// Undo [`apply`](Self::apply): `x * std_j + mean_j`.
    pub fn invert(&self, windows: &mut WindowSet) -> Result<()> {
        self.check(windows.cols())?;
        let m = self.variables();
        for row in windows.data_mut().chunks_mut(m) {
            for j in 0..m {
                row[j] = row[j] * self.std[j] + self.mean[j];
            }
        }
        Ok(())
    }
}
