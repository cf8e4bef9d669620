//! Vehicle trajectories and their aggregation onto the grid.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{Field, SpaceTimeGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub vehicle_id: u64,
    /// time-ordered samples
    pub points: Vec<TrajectoryPoint>,
}

/// Result of aggregation: the field plus the number of samples that fell
/// outside the grid and were dropped.
#[derive(Debug, Clone)]
pub struct Aggregated {
    pub field: Field,
    pub dropped_samples: usize,
}

/// Map trajectories onto the grid.
///
/// Speed per cell is the arithmetic mean of the sample speeds landing in the
/// cell, and the mask marks cells holding at least one sample. Density is
/// the generalized (Edie) density: total vehicle-time spent in the cell
/// divided by the cell area dx*dt, with the time computed exactly from the
/// piecewise-linear trajectory segments. A jump of more than half the
/// domain length between consecutive samples is treated as a periodic wrap
/// and split at the boundary.
pub fn aggregate_trajectories(
    trajectories: &[Trajectory],
    grid: &SpaceTimeGrid,
) -> Result<Aggregated> {
    if trajectories.is_empty() || trajectories.iter().all(|tr| tr.points.is_empty()) {
        return Err(Error::NoData("no trajectory data to aggregate".into()));
    }
    let (nx, nt) = (grid.nx, grid.nt);
    let mut vehicle_time = DMatrix::<f64>::zeros(nx, nt);
    let mut speed_sum = DMatrix::<f64>::zeros(nx, nt);
    let mut speed_count = DMatrix::<f64>::zeros(nx, nt);
    let mut dropped = 0usize;

    let domain_len = grid.x_max - grid.x_min;
    for tr in trajectories {
        for p in &tr.points {
            match grid.cell_of(p.x, p.t) {
                Some((i, j)) => {
                    speed_sum[(i, j)] += p.v;
                    speed_count[(i, j)] += 1.0;
                }
                None => dropped += 1,
            }
        }
        for w in tr.points.windows(2) {
            let (p0, p1) = (w[0], w[1]);
            if p1.t <= p0.t {
                continue;
            }
            let dx_raw = p1.x - p0.x;
            if dx_raw < -0.5 * domain_len {
                // forward motion across the periodic seam: split at x_max
                let x1_unwrapped = p1.x + domain_len;
                let s_cross = (grid.x_max - p0.x) / (x1_unwrapped - p0.x);
                let t_cross = p0.t + s_cross * (p1.t - p0.t);
                accumulate_segment(grid, &mut vehicle_time, p0.t, p0.x, t_cross, grid.x_max);
                accumulate_segment(grid, &mut vehicle_time, t_cross, grid.x_min, p1.t, p1.x);
            } else {
                accumulate_segment(grid, &mut vehicle_time, p0.t, p0.x, p1.t, p1.x);
            }
        }
    }

    let mut field = Field::empty(grid.clone());
    let cell_area = grid.dx * grid.dt;
    for i in 0..nx {
        for j in 0..nt {
            field.rho[(i, j)] = vehicle_time[(i, j)] / cell_area;
            if speed_count[(i, j)] > 0.0 {
                field.v[(i, j)] = speed_sum[(i, j)] / speed_count[(i, j)];
                field.mask[(i, j)] = true;
            }
        }
    }
    Ok(Aggregated { field, dropped_samples: dropped })
}

/// Split a linear segment at every grid-line crossing and assign each piece's
/// duration to the cell containing its midpoint.
fn accumulate_segment(
    grid: &SpaceTimeGrid,
    vehicle_time: &mut DMatrix<f64>,
    t0: f64,
    x0: f64,
    t1: f64,
    x1: f64,
) {
    let dt_seg = t1 - t0;
    if dt_seg <= 0.0 {
        return;
    }
    let mut cuts = vec![0.0, 1.0];
    // time-line crossings
    let j_lo = ((t0 - grid.t_min) / grid.dt).ceil() as i64;
    let j_hi = ((t1 - grid.t_min) / grid.dt).floor() as i64;
    for j in j_lo..=j_hi {
        let tc = grid.t_min + j as f64 * grid.dt;
        let s = (tc - t0) / dt_seg;
        if s > 0.0 && s < 1.0 {
            cuts.push(s);
        }
    }
    // space-line crossings
    let dx_seg = x1 - x0;
    if dx_seg.abs() > 0.0 {
        let (xa, xb) = if dx_seg > 0.0 { (x0, x1) } else { (x1, x0) };
        let i_lo = ((xa - grid.x_min) / grid.dx).ceil() as i64;
        let i_hi = ((xb - grid.x_min) / grid.dx).floor() as i64;
        for i in i_lo..=i_hi {
            let xc = grid.x_min + i as f64 * grid.dx;
            let s = (xc - x0) / dx_seg;
            if s > 0.0 && s < 1.0 {
                cuts.push(s);
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for w in cuts.windows(2) {
        let (s0, s1) = (w[0], w[1]);
        if s1 <= s0 {
            continue;
        }
        let sm = 0.5 * (s0 + s1);
        let tm = t0 + sm * dt_seg;
        let xm = x0 + sm * dx_seg;
        if let Some((i, j)) = grid.cell_of(xm, tm) {
            vehicle_time[(i, j)] += (s1 - s0) * dt_seg;
        }
    }
}

/// Total time each trajectory spends inside the grid domain, computed by
/// clipping each segment against the domain rectangle only. Serves as an
/// independent check of the per-cell decomposition.
pub fn time_in_domain(trajectories: &[Trajectory], grid: &SpaceTimeGrid) -> f64 {
    let domain_len = grid.x_max - grid.x_min;
    let mut total = 0.0;
    for tr in trajectories {
        for w in tr.points.windows(2) {
            let (p0, p1) = (w[0], w[1]);
            if p1.t <= p0.t {
                continue;
            }
            let dx_raw = p1.x - p0.x;
            let segments = if dx_raw < -0.5 * domain_len {
                let x1u = p1.x + domain_len;
                let s_cross = (grid.x_max - p0.x) / (x1u - p0.x);
                let t_cross = p0.t + s_cross * (p1.t - p0.t);
                vec![(p0.t, p0.x, t_cross, grid.x_max), (t_cross, grid.x_min, p1.t, p1.x)]
            } else {
                vec![(p0.t, p0.x, p1.t, p1.x)]
            };
            for (t0, x0, t1, x1) in segments {
                total += clipped_duration(grid, t0, x0, t1, x1);
            }
        }
    }
    total
}

fn clipped_duration(grid: &SpaceTimeGrid, t0: f64, x0: f64, t1: f64, x1: f64) -> f64 {
    let dt_seg = t1 - t0;
    let dx_seg = x1 - x0;
    let mut s_lo: f64 = 0.0;
    let mut s_hi: f64 = 1.0;
    // clip s against t in [t_min, t_max]
    s_lo = s_lo.max((grid.t_min - t0) / dt_seg);
    s_hi = s_hi.min((grid.t_max - t0) / dt_seg);
    // clip against x in [x_min, x_max]
    if dx_seg.abs() > 0.0 {
        let (a, b) = ((grid.x_min - x0) / dx_seg, (grid.x_max - x0) / dx_seg);
        s_lo = s_lo.max(a.min(b));
        s_hi = s_hi.min(a.max(b));
    } else if x0 < grid.x_min || x0 > grid.x_max {
        return 0.0;
    }
    if s_hi > s_lo {
        (s_hi - s_lo) * dt_seg
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1cell(dx: f64, dt: f64) -> SpaceTimeGrid {
        // smallest legal grid is 2x2; use cell (0,0) and leave the rest empty
        SpaceTimeGrid::new(0.0, 2.0 * dx, 0.0, 2.0 * dt, dx, dt).unwrap()
    }

    #[test]
    fn single_vehicle_full_cell_crossing() {
        // constant 10 m/s across one 50 m cell for the full dt = 5 s
        let grid = grid_1cell(50.0, 5.0);
        let tr = Trajectory {
            vehicle_id: 1,
            points: vec![
                TrajectoryPoint { t: 0.0, x: 0.0, v: 10.0 },
                TrajectoryPoint { t: 5.0, x: 50.0, v: 10.0 },
            ],
        };
        let agg = aggregate_trajectories(&[tr], &grid).unwrap();
        assert!((agg.field.v[(0, 0)] - 10.0).abs() < 1e-12);
        // rho = dt / (dx dt) = 1/dx
        assert!((agg.field.rho[(0, 0)] - 1.0 / 50.0).abs() < 1e-12);
        assert!(agg.field.mask[(0, 0)]);
    }

    #[test]
    fn two_vehicles_mean_speed() {
        let grid = grid_1cell(50.0, 5.0);
        let mk = |id, v| Trajectory {
            vehicle_id: id,
            points: vec![
                TrajectoryPoint { t: 1.0, x: 10.0, v },
                TrajectoryPoint { t: 2.0, x: 10.0 + v, v },
            ],
        };
        let agg = aggregate_trajectories(&[mk(1, 8.0), mk(2, 12.0)], &grid).unwrap();
        assert!((agg.field.v[(0, 0)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_error() {
        let grid = grid_1cell(10.0, 5.0);
        assert!(aggregate_trajectories(&[], &grid).is_err());
    }

    #[test]
    fn out_of_grid_samples_dropped_and_counted() {
        let grid = grid_1cell(10.0, 5.0);
        let tr = Trajectory {
            vehicle_id: 1,
            points: vec![
                TrajectoryPoint { t: -3.0, x: 5.0, v: 1.0 },
                TrajectoryPoint { t: 1.0, x: 5.0, v: 1.0 },
            ],
        };
        let agg = aggregate_trajectories(&[tr], &grid).unwrap();
        assert_eq!(agg.dropped_samples, 1);
    }

    #[test]
    fn vehicle_time_conservation() {
        // several vehicles with kinked paths; total rho * dx * dt must equal
        // the independently clipped time in domain
        let grid = SpaceTimeGrid::new(0.0, 100.0, 0.0, 50.0, 10.0, 5.0).unwrap();
        let mut trajectories = Vec::new();
        for k in 0..7u64 {
            let mut points = Vec::new();
            let mut x = 3.0 * k as f64 - 5.0;
            let mut t = -2.0 + 0.5 * k as f64;
            let mut v = 5.0 + k as f64;
            while t < 60.0 {
                points.push(TrajectoryPoint { t, x, v });
                t += 0.7;
                x += v * 0.7;
                v = (v + 0.3 * ((k as f64) - 3.0)).max(0.5);
            }
            trajectories.push(Trajectory { vehicle_id: k, points });
        }
        let agg = aggregate_trajectories(&trajectories, &grid).unwrap();
        let total_cell_time: f64 = agg.field.rho.iter().sum::<f64>() * grid.dx * grid.dt;
        let expect = time_in_domain(&trajectories, &grid);
        assert!(
            (total_cell_time - expect).abs() <= 1e-9 * expect.max(1.0),
            "{total_cell_time} vs {expect}"
        );
    }

    #[test]
    fn periodic_wrap_splits_segment() {
        let grid = SpaceTimeGrid::new(0.0, 100.0, 0.0, 50.0, 10.0, 5.0).unwrap();
        let tr = Trajectory {
            vehicle_id: 1,
            points: vec![
                TrajectoryPoint { t: 0.0, x: 95.0, v: 10.0 },
                TrajectoryPoint { t: 1.0, x: 5.0, v: 10.0 }, // wrapped past 100
            ],
        };
        let agg = aggregate_trajectories(&[tr], &grid).unwrap();
        let total_time: f64 = agg.field.rho.iter().sum::<f64>() * grid.dx * grid.dt;
        assert!((total_time - 1.0).abs() < 1e-9, "wrapped time {total_time}");
        // both seam cells collect time
        assert!(agg.field.rho[(9, 0)] > 0.0);
        assert!(agg.field.rho[(0, 0)] > 0.0);
    }
}
