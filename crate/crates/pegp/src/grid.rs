//! Regular space-time lattice and the fields stored on it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular (x, t) lattice. Cell centers sit at `x_min + (i + 0.5) dx` and
/// `t_min + (j + 0.5) dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub dx: f64,
    pub dt: f64,
    pub nx: usize,
    pub nt: usize,
}

impl SpaceTimeGrid {
    pub fn new(x_min: f64, x_max: f64, t_min: f64, t_max: f64, dx: f64, dt: f64) -> Result<Self> {
        if !(dx > 0.0 && dt > 0.0) {
            return Err(Error::InvalidArgument("dx and dt must be positive".into()));
        }
        if !(x_max > x_min && t_max > t_min) {
            return Err(Error::InvalidArgument("grid bounds must be increasing".into()));
        }
        let nx = ((x_max - x_min) / dx).round() as usize;
        let nt = ((t_max - t_min) / dt).round() as usize;
        if nx < 2 || nt < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid too small: nx = {nx}, nt = {nt} (need >= 2)"
            )));
        }
        Ok(Self { x_min, x_max, t_min, t_max, dx, dt, nx, nt })
    }

    pub fn x_center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx
    }

    pub fn t_center(&self, j: usize) -> f64 {
        self.t_min + (j as f64 + 0.5) * self.dt
    }

    /// Cell containing (x, t); points on the upper boundary of the domain
    /// are clamped into the last cell, points outside return None.
    pub fn cell_of(&self, x: f64, t: f64) -> Option<(usize, usize)> {
        if x < self.x_min || x > self.x_max || t < self.t_min || t > self.t_max {
            return None;
        }
        let i = (((x - self.x_min) / self.dx) as usize).min(self.nx - 1);
        let j = (((t - self.t_min) / self.dt) as usize).min(self.nt - 1);
        Some((i, j))
    }

    /// Row index of the cell whose center is nearest to position `x`.
    /// A position exactly on a cell boundary resolves to the lower index.
    pub fn nearest_row(&self, x: f64) -> Result<usize> {
        if x < self.x_min || x > self.x_max {
            return Err(Error::InvalidArgument(format!(
                "position {x} outside [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        let u = (x - self.x_min) / self.dx - 0.5;
        let lo = u.floor();
        let frac = u - lo;
        let i = if frac > 0.5 { lo + 1.0 } else { lo };
        Ok((i.max(0.0) as usize).min(self.nx - 1))
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.nt
    }
}

/// Density and speed fields on a grid with a validity mask.
#[derive(Debug, Clone)]
pub struct Field {
    pub grid: SpaceTimeGrid,
    /// veh/m, nx x nt
    pub rho: DMatrix<f64>,
    /// m/s, nx x nt
    pub v: DMatrix<f64>,
    /// membership in the valid set
    pub mask: DMatrix<bool>,
}

impl Field {
    /// All-false mask, zero values.
    pub fn empty(grid: SpaceTimeGrid) -> Self {
        let (nx, nt) = (grid.nx, grid.nt);
        Field {
            grid,
            rho: DMatrix::zeros(nx, nt),
            v: DMatrix::zeros(nx, nt),
            mask: DMatrix::from_element(nx, nt, false),
        }
    }

    /// Number of valid cells.
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Check the sign invariants on the valid set.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.grid.nx {
            for j in 0..self.grid.nt {
                if self.mask[(i, j)] {
                    let (r, u) = (self.rho[(i, j)], self.v[(i, j)]);
                    if !(r >= 0.0) || !(u >= 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "negative or NaN field value at cell ({i}, {j}): rho = {r}, v = {u}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
