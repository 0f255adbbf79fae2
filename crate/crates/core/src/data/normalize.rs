//! Per-group z-score normalization, fitted on the training partition only.

use serde::{Deserialize, Serialize};

/// Per-feature mean and population standard deviation. Zero-variance
/// features keep `std = 0` and normalize to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(rows: &[Vec<f64>], width: usize) -> FeatureStats {
        let n = rows.len();
        let mut mean = vec![0.0; width];
        let mut std = vec![0.0; width];
        if n == 0 {
            return FeatureStats { mean, std };
        }
        for row in rows {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for row in rows {
            for ((s, &v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n as f64).sqrt();
        }
        FeatureStats { mean, std }
    }

    pub fn apply(&self, row: &mut [f64]) {
        for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = if s > 0.0 { (*v - m) / s } else { 0.0 };
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// Independent statistics for the three feature groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub spatial: FeatureStats,
    pub temporal: FeatureStats,
    pub external: FeatureStats,
}
