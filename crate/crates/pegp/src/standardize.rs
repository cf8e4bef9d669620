//! Per-task value standardization and coordinate standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine scaler for one task: z = (y - mean) / scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScaler {
    pub mean: f64,
    pub scale: f64,
    /// set when the sample had zero variance and the scale was clamped to 1
    pub clamped: bool,
}

impl TaskScaler {
    /// Sample mean and standard deviation with denominator n; zero variance
    /// clamps the scale to 1 and flags it.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::NoData(format!(
                "need >= 2 observations per task, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 0.0 {
            Ok(TaskScaler { mean, scale: sd, clamped: false })
        } else {
            Ok(TaskScaler { mean, scale: 1.0, clamped: true })
        }
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        self.mean + self.scale * z
    }
}

/// Per-task standardizer over the latent outputs of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub tasks: Vec<TaskScaler>,
}

impl Standardizer {
    pub fn fit(per_task_values: &[Vec<f64>]) -> Result<Self> {
        let tasks = per_task_values
            .iter()
            .map(|v| TaskScaler::fit(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Standardizer { tasks })
    }
}

/// Standardization of (x, t) coordinates fed to kernels: raw SI coordinates
/// leave the lengthscales poorly conditioned, so kernels always see
/// ((x - x_mean)/x_scale, (t - t_mean)/t_scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordMap {
    pub x_mean: f64,
    pub x_scale: f64,
    pub t_mean: f64,
    pub t_scale: f64,
}

impl CoordMap {
    pub fn fit(coords: &[(f64, f64)]) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::NoData("need >= 2 points for coordinate map".into()));
        }
        let n = coords.len() as f64;
        let (mx, mt) = coords
            .iter()
            .fold((0.0, 0.0), |(ax, at), &(x, t)| (ax + x, at + t));
        let (mx, mt) = (mx / n, mt / n);
        let (vx, vt) = coords.iter().fold((0.0, 0.0), |(ax, at), &(x, t)| {
            (ax + (x - mx) * (x - mx), at + (t - mt) * (t - mt))
        });
        let sx = (vx / n).sqrt();
        let st = (vt / n).sqrt();
        Ok(CoordMap {
            x_mean: mx,
            x_scale: if sx > 0.0 { sx } else { 1.0 },
            t_mean: mt,
            t_scale: if st > 0.0 { st } else { 1.0 },
        })
    }

    pub fn to_std(&self, x: f64, t: f64) -> (f64, f64) {
        ((x - self.x_mean) / self.x_scale, (t - self.t_mean) / self.t_scale)
    }

    /// A wave speed in m/s becomes lambda * t_scale / x_scale in standardized units.
    pub fn speed_to_std(&self, lambda: f64) -> f64 {
        lambda * self.t_scale / self.x_scale
    }

    pub fn speed_from_std(&self, lambda_std: f64) -> f64 {
        lambda_std * self.x_scale / self.t_scale
    }

    /// A rate in 1/s (the relaxation coefficients a, b) becomes a * t_scale.
    pub fn rate_to_std(&self, rate: f64) -> f64 {
        rate * self.t_scale
    }
}
