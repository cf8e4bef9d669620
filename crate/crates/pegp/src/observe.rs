//! Scattered observations and the probe / loop-detector samplers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, SpaceTimeGrid};
use crate::physics::{EquilibriumConstants, ScaledPressure};
use crate::rng::{sample_indices, seeded_rng};
use crate::standardize::Standardizer;
use crate::traj::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Density,
    Speed,
}

impl Output {
    pub fn index(self) -> usize {
        match self {
            Output::Density => 0,
            Output::Speed => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Output::Density => "density",
            Output::Speed => "speed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(Output::Density),
            "speed" => Ok(Output::Speed),
            other => Err(Error::Format(format!("unknown output '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub x: f64,
    pub t: f64,
    pub output: Output,
    pub value: f64,
}

/// Scattered (x, t, output, value) tuples, sorted lexicographically by
/// (t, x, output) for reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub entries: Vec<Observation>,
    pub seed: u64,
}

impl ObservationSet {
    pub fn new(mut entries: Vec<Observation>, seed: u64) -> Self {
        entries.sort_by(|a, b| {
            (a.t, a.x, a.output.index())
                .partial_cmp(&(b.t, b.x, b.output.index()))
                .unwrap()
        });
        ObservationSet { entries, seed }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate_in(&self, grid: &SpaceTimeGrid) -> Result<()> {
        for e in &self.entries {
            if grid.cell_of(e.x, e.t).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "observation at ({}, {}) outside grid bounds",
                    e.x, e.t
                )));
            }
        }
        Ok(())
    }
}

/// Retain a pseudo-random fraction of vehicles and observe the field's
/// cell-aggregated (rho, v) at every valid cell their samples visit.
///
/// Sampling is by whole vehicle id, matching the notion of penetration
/// rate; the observed values are the aggregated cell values of `field`, so
/// penetration 1.0 reproduces exactly the masked cells of the full field.
pub fn sample_probe(
    field: &Field,
    trajectories: &[Trajectory],
    penetration: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if !(penetration > 0.0 && penetration <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "penetration {penetration} outside (0, 1]"
        )));
    }
    if trajectories.is_empty() {
        return Err(Error::NoData("no trajectories to sample from".into()));
    }
    let mut ids: Vec<u64> = trajectories.iter().map(|t| t.vehicle_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let k = (penetration * ids.len() as f64).round() as usize;
    let k = k.clamp(1, ids.len());
    let mut rng = seeded_rng(seed);
    let chosen_idx = sample_indices(ids.len(), k, &mut rng);
    let chosen: BTreeSet<u64> = chosen_idx.iter().map(|&i| ids[i]).collect();

    let grid = &field.grid;
    let mut cells: BTreeSet<(usize, usize)> = BTreeSet::new();
    for tr in trajectories {
        if !chosen.contains(&tr.vehicle_id) {
            continue;
        }
        for p in &tr.points {
            if let Some((i, j)) = grid.cell_of(p.x, p.t) {
                cells.insert((i, j));
            }
        }
    }
    let mut entries = Vec::with_capacity(2 * cells.len());
    for (i, j) in cells {
        if !field.mask[(i, j)] {
            continue;
        }
        let (x, t) = (grid.x_center(i), grid.t_center(j));
        entries.push(Observation { x, t, output: Output::Density, value: field.rho[(i, j)] });
        entries.push(Observation { x, t, output: Output::Speed, value: field.v[(i, j)] });
    }
    Ok(ObservationSet::new(entries, seed))
}

/// Number of vehicles `sample_probe` retains for a given penetration.
pub fn probe_count(n_vehicles: usize, penetration: f64) -> usize {
    ((penetration * n_vehicles as f64).round() as usize).clamp(1, n_vehicles)
}

/// Observe fixed cross-sections: for each detector position the nearest cell
/// row is read at every time step where the field is valid.
pub fn sample_loops(field: &Field, positions: &[f64]) -> Result<ObservationSet> {
    let grid = &field.grid;
    let mut entries = Vec::new();
    for &p in positions {
        let i = grid.nearest_row(p)?;
        for j in 0..grid.nt {
            if !field.mask[(i, j)] {
                continue;
            }
            let (x, t) = (grid.x_center(i), grid.t_center(j));
            entries.push(Observation { x, t, output: Output::Density, value: field.rho[(i, j)] });
            entries.push(Observation { x, t, output: Output::Speed, value: field.v[(i, j)] });
        }
    }
    Ok(ObservationSet::new(entries, 0))
}

/// How raw (rho, v) observations map onto the latent tasks of a model.
#[derive(Debug, Clone)]
pub enum TaskMapping {
    /// density -> task 0, speed -> task 1 (LWR bidirectional, plain SE)
    PerOutput,
    /// (rho, v) -> (w1, w2) jointly per cell (ARZ)
    ArzInvariants { pressure: ScaledPressure },
    /// both outputs -> density perturbation delta-rho (LWR scalar)
    LwrScalarDelta { constants: EquilibriumConstants },
}

/// Observations rewritten in latent-task coordinates.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub coords: Vec<(f64, f64)>,
    pub task: Vec<usize>,
    pub values: Vec<f64>,
    pub n_tasks: usize,
}

pub fn to_task_data(obs: &ObservationSet, mapping: &TaskMapping) -> Result<TaskData> {
    let mut coords = Vec::new();
    let mut task = Vec::new();
    let mut values = Vec::new();
    let n_tasks;
    match mapping {
        TaskMapping::PerOutput => {
            n_tasks = 2;
            for e in &obs.entries {
                coords.push((e.x, e.t));
                task.push(e.output.index());
                values.push(e.value);
            }
        }
        TaskMapping::ArzInvariants { pressure } => {
            n_tasks = 2;
            // entries are sorted by (t, x, output), so a (density, speed)
            // pair at one cell is adjacent
            let mut iter = obs.entries.iter().peekable();
            while let Some(e) = iter.next() {
                match e.output {
                    Output::Density => {
                        let paired = iter
                            .peek()
                            .filter(|n| n.t == e.t && n.x == e.x && n.output == Output::Speed)
                            .copied();
                        if let Some(sp) = paired {
                            iter.next();
                            let w1 = sp.value + pressure.p(e.value);
                            let w2 = sp.value;
                            coords.push((e.x, e.t));
                            task.push(0);
                            values.push(w1);
                            coords.push((e.x, e.t));
                            task.push(1);
                            values.push(w2);
                        }
                        // an unpaired density cannot form w1 = v + P(rho); skip
                    }
                    Output::Speed => {
                        coords.push((e.x, e.t));
                        task.push(1);
                        values.push(e.value);
                    }
                }
            }
        }
        TaskMapping::LwrScalarDelta { constants } => {
            n_tasks = 1;
            let v_prime = (constants.lambda0_lwr - constants.v0) / constants.rho0;
            if v_prime.abs() < 1e-300 {
                return Err(Error::InvalidArgument(
                    "V'(rho0) = 0: speed observations cannot map to density perturbations".into(),
                ));
            }
            for e in &obs.entries {
                let delta = match e.output {
                    Output::Density => e.value - constants.rho0,
                    Output::Speed => (e.value - constants.v0) / v_prime,
                };
                coords.push((e.x, e.t));
                task.push(0);
                values.push(delta);
            }
        }
    }
    if values.is_empty() {
        return Err(Error::NoData("no usable observations after task mapping".into()));
    }
    Ok(TaskData { coords, task, values, n_tasks })
}

/// Per-task sample mean and standard deviation (denominator n) over the
/// task-mapped observations.
pub fn fit_standardizer(obs: &ObservationSet, mapping: &TaskMapping) -> Result<Standardizer> {
    let data = to_task_data(obs, mapping)?;
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); data.n_tasks];
    for (&t, &v) in data.task.iter().zip(data.values.iter()) {
        groups[t].push(v);
    }
    Standardizer::fit(&groups)
}

/// Median of the observed density values; the default equilibrium density.
pub fn median_density(obs: &ObservationSet) -> Result<f64> {
    let mut d: Vec<f64> = obs
        .entries
        .iter()
        .filter(|e| e.output == Output::Density)
        .map(|e| e.value)
        .collect();
    if d.is_empty() {
        return Err(Error::NoData("no density observations".into()));
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = d.len();
    Ok(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{aggregate_trajectories, TrajectoryPoint};

    fn demo_trajectories(n: u64) -> Vec<Trajectory> {
        (0..n)
            .map(|id| {
                let x0 = 10.0 * id as f64;
                let points = (0..20)
                    .map(|k| TrajectoryPoint {
                        t: 2.0 * k as f64,
                        x: (x0 + 12.0 * k as f64) % 590.0,
                        v: 6.0 + (id % 5) as f64,
                    })
                    .collect();
                Trajectory { vehicle_id: id, points }
            })
            .collect()
    }

    fn demo_field() -> (Field, Vec<Trajectory>) {
        let grid = SpaceTimeGrid::new(0.0, 600.0, 0.0, 40.0, 10.0, 5.0).unwrap();
        let trajectories = demo_trajectories(30);
        let agg = aggregate_trajectories(&trajectories, &grid).unwrap();
        (agg.field, trajectories)
    }

    #[test]
    fn full_penetration_covers_masked_cells() {
        let (field, trajectories) = demo_field();
        let obs = sample_probe(&field, &trajectories, 1.0, 3).unwrap();
        let cells: BTreeSet<(usize, usize)> = obs
            .entries
            .iter()
            .map(|e| field.grid.cell_of(e.x, e.t).unwrap())
            .collect();
        let masked: BTreeSet<(usize, usize)> = (0..field.grid.nx)
            .flat_map(|i| (0..field.grid.nt).map(move |j| (i, j)))
            .filter(|&(i, j)| field.mask[(i, j)])
            .collect();
        assert_eq!(cells, masked);
        // both outputs at each cell
        assert_eq!(obs.len(), 2 * masked.len());
    }

    #[test]
    fn probe_determinism_and_count() {
        let (field, trajectories) = demo_field();
        let a = sample_probe(&field, &trajectories, 0.3, 42).unwrap();
        let b = sample_probe(&field, &trajectories, 0.3, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_probe(&field, &trajectories, 0.3, 43).unwrap();
        assert_ne!(a, c);
        // exactly round(p n) retained
        assert_eq!(probe_count(100, 0.1), 10);
    }

    #[test]
    fn penetration_bounds_checked() {
        let (field, trajectories) = demo_field();
        assert!(sample_probe(&field, &trajectories, 0.0, 1).is_err());
        assert!(sample_probe(&field, &trajectories, 1.2, 1).is_err());
    }

    #[test]
    fn entries_sorted_lexicographically() {
        let (field, trajectories) = demo_field();
        let obs = sample_probe(&field, &trajectories, 0.5, 9).unwrap();
        for w in obs.entries.windows(2) {
            let ka = (w[0].t, w[0].x, w[0].output.index());
            let kb = (w[1].t, w[1].x, w[1].output.index());
            assert!(ka <= kb);
        }
    }

    #[test]
    fn loops_observe_nearest_rows() {
        let grid = SpaceTimeGrid::new(0.0, 600.0, 0.0, 300.0, 10.0, 5.0).unwrap();
        let mut field = Field::empty(grid);
        field.mask.fill(true);
        for i in 0..field.grid.nx {
            for j in 0..field.grid.nt {
                field.rho[(i, j)] = 0.01 * i as f64;
                field.v[(i, j)] = 1.0 * j as f64;
            }
        }
        let obs = sample_loops(&field, &[60.0, 180.0, 300.0, 420.0]).unwrap();
        // 4 rows x nt observations per output
        assert_eq!(obs.len(), 4 * field.grid.nt * 2);
        // boundary position 60 resolves to the lower row (index 5, center 55)
        let xs: BTreeSet<u64> = obs.entries.iter().map(|e| e.x.to_bits()).collect();
        assert!(xs.contains(&55.0f64.to_bits()));
        assert!(!xs.contains(&65.0f64.to_bits()));

        assert!(sample_loops(&field, &[700.0]).is_err());
        let empty = sample_loops(&field, &[]).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn standardizer_modes() {
        let entries = vec![
            Observation { x: 5.0, t: 2.5, output: Output::Density, value: 2.0 },
            Observation { x: 5.0, t: 2.5, output: Output::Speed, value: 10.0 },
            Observation { x: 15.0, t: 2.5, output: Output::Density, value: 4.0 },
            Observation { x: 15.0, t: 2.5, output: Output::Speed, value: 20.0 },
        ];
        let obs = ObservationSet::new(entries, 0);

        let s = fit_standardizer(&obs, &TaskMapping::PerOutput).unwrap();
        assert_eq!(s.tasks[0].mean, 3.0);
        assert_eq!(s.tasks[1].mean, 15.0);

        // ARZ: w1 = v + rho^2/2 -> {12, 28}, w2 = v -> {10, 20}
        let s = fit_standardizer(
            &obs,
            &TaskMapping::ArzInvariants {
                pressure: ScaledPressure::bare(crate::physics::PressureLaw::HalfSquare),
            },
        )
        .unwrap();
        assert_eq!(s.tasks[0].mean, 20.0);
        assert_eq!(s.tasks[1].mean, 15.0);
    }

    #[test]
    fn median_density_odd_even() {
        let mk = |vals: &[f64]| {
            ObservationSet::new(
                vals.iter()
                    .enumerate()
                    .map(|(i, &v)| Observation {
                        x: i as f64,
                        t: 0.0,
                        output: Output::Density,
                        value: v,
                    })
                    .collect(),
                0,
            )
        };
        assert_eq!(median_density(&mk(&[3.0, 1.0, 2.0])).unwrap(), 2.0);
        assert_eq!(median_density(&mk(&[4.0, 1.0, 2.0, 3.0])).unwrap(), 2.5);
    }
}
