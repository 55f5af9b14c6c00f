//! D3Q19 BGK lattice Boltzmann solver for steady Stokes flow and Darcy
//! permeability.
//!
//! Flow is driven along +x by a uniform body force. The domain is periodic
//! in every direction; two one-voxel solid slabs are padded onto the faces
//! normal to the configured wall axis. Solid voxels use halfway
//! bounce-back, so a fully open grid between the slabs is a plane channel
//! whose gap equals the grid edge.
//!
//! Only fluid nodes are stored. Streaming is a gather through a
//! precomputed source table that already encodes bounce-back.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;

pub const Q: usize = 19;

/// Lattice velocities: rest, six axis links, twelve edge diagonals.
pub const VELOCITIES: [[i32; 3]; Q] = [
    [0, 0, 0],
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
    [1, 1, 0],
    [-1, -1, 0],
    [1, -1, 0],
    [-1, 1, 0],
    [1, 0, 1],
    [-1, 0, -1],
    [1, 0, -1],
    [-1, 0, 1],
    [0, 1, 1],
    [0, -1, -1],
    [0, 1, -1],
    [0, -1, 1],
];

pub const WEIGHTS: [f64; Q] = [
    1.0 / 3.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
];

pub const OPPOSITE: [usize; Q] = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15, 18, 17];

/// Square meters per millidarcy.
pub const M2_PER_MILLIDARCY: f64 = 9.869233e-16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WallAxis {
    /// Fully periodic, no walls.
    None,
    Y,
    Z,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbmConfig {
    pub relaxation_time: f64,
    /// Lattice force density along x.
    pub body_force: f64,
    /// Relative change of the mean velocity between checks.
    pub convergence_tol: f64,
    pub check_interval: u64,
    pub max_steps: u64,
    /// Pa s. Cancels out of the permeability; kept for reporting.
    pub dynamic_viscosity: f64,
    /// Meters per voxel.
    pub voxel_size: f64,
    pub wall_axis: WallAxis,
    /// Drop pore clusters that do not wrap around the periodic x direction.
    /// They carry no net flow at steady state.
    pub prune_stagnant: bool,
}

impl Default for LbmConfig {
    fn default() -> Self {
        Self {
            relaxation_time: 1.0,
            body_force: 1e-6,
            convergence_tol: 1e-6,
            check_interval: 100,
            max_steps: 200_000,
            dynamic_viscosity: 1e-3,
            voxel_size: 0.003,
            wall_axis: WallAxis::Z,
            prune_stagnant: true,
        }
    }
}

impl LbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.relaxation_time > 0.5) {
            return Err(Error::config(format!(
                "relaxation_time must exceed 0.5 for BGK stability, got {}",
                self.relaxation_time
            )));
        }
        if !(self.body_force > 0.0) {
            return Err(Error::config("body_force must be positive"));
        }
        if !(self.convergence_tol > 0.0) || self.check_interval == 0 {
            return Err(Error::config("convergence_tol and check_interval must be positive"));
        }
        if !(self.voxel_size > 0.0) || !(self.dynamic_viscosity > 0.0) {
            return Err(Error::config("voxel_size and dynamic_viscosity must be positive"));
        }
        Ok(())
    }

    /// Kinematic viscosity in lattice units.
    pub fn lattice_viscosity(&self) -> f64 {
        (self.relaxation_time - 0.5) / 3.0
    }
}

/// Second-order BGK equilibrium.
pub fn equilibrium(rho: f64, u: [f64; 3]) -> [f64; Q] {
    let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    let mut feq = [0.0; Q];
    for i in 0..Q {
        let c = VELOCITIES[i];
        let cu = c[0] as f64 * u[0] + c[1] as f64 * u[1] + c[2] as f64 * u[2];
        feq[i] = WEIGHTS[i] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq);
    }
    feq
}

/// Lattice populations over the fluid nodes of one geometry.
#[derive(Clone, Debug)]
pub struct LbmState {
    /// Lattice dimensions `[x, y, z]` including wall padding.
    dims: [usize; 3],
    /// Lattice offset of the original grid's origin.
    offset: [usize; 3],
    grid_edge: usize,
    /// Fluid flag per lattice cell.
    fluid_mask: Vec<bool>,
    /// Lattice cell of each stored node.
    nodes: Vec<usize>,
    /// Post-collision populations, `[direction][node]`.
    f: Vec<f64>,
    scratch: Vec<f64>,
    /// Pull-streaming sources, `[direction][node]`, indexing into `f`.
    sources: Vec<u32>,
    step_count: u64,
    last_mean_velocity: f64,
}

impl LbmState {
    /// Equilibrium at rest on every pore voxel of `voxels`.
    pub fn new(voxels: &VoxelGrid, wall_axis: WallAxis) -> Self {
        let n = voxels.edge();
        let (dims, offset) = match wall_axis {
            WallAxis::None => ([n, n, n], [0, 0, 0]),
            WallAxis::Y => ([n, n + 2, n], [0, 1, 0]),
            WallAxis::Z => ([n, n, n + 2], [0, 0, 1]),
        };
        let mut fluid_mask = vec![false; dims[0] * dims[1] * dims[2]];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    if voxels.is_pore(x, y, z) {
                        let l = lattice_index(dims, [x + offset[0], y + offset[1], z + offset[2]]);
                        fluid_mask[l] = true;
                    }
                }
            }
        }
        Self::from_mask(dims, offset, n, fluid_mask)
    }

    fn from_mask(dims: [usize; 3], offset: [usize; 3], grid_edge: usize, fluid_mask: Vec<bool>) -> Self {
        let nodes: Vec<usize> = (0..fluid_mask.len()).filter(|&l| fluid_mask[l]).collect();
        let nf = nodes.len();
        let mut slot = vec![u32::MAX; fluid_mask.len()];
        for (k, &l) in nodes.iter().enumerate() {
            slot[l] = k as u32;
        }
        let mut sources = vec![0u32; Q * nf];
        for (k, &l) in nodes.iter().enumerate() {
            let p = lattice_coords(dims, l);
            for i in 0..Q {
                let c = VELOCITIES[i];
                let from = neighbor(dims, p, [-c[0], -c[1], -c[2]]);
                let s = slot[lattice_index(dims, from)];
                sources[i * nf + k] = if s != u32::MAX {
                    (i * nf) as u32 + s
                } else {
                    (OPPOSITE[i] * nf + k) as u32
                };
            }
        }
        let mut f = vec![0.0; Q * nf];
        for i in 0..Q {
            f[i * nf..(i + 1) * nf].fill(WEIGHTS[i]);
        }
        Self {
            dims,
            offset,
            grid_edge,
            fluid_mask,
            nodes,
            scratch: f.clone(),
            f,
            sources,
            step_count: 0,
            last_mean_velocity: 0.0,
        }
    }

    /// Keep only pore clusters that wrap around the periodic x direction.
    pub fn pruned_to_flowing(self) -> Self {
        let mask = flowing_mask(self.dims, &self.fluid_mask);
        Self::from_mask(self.dims, self.offset, self.grid_edge, mask)
    }

    pub fn fluid_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Mean x-velocity over all grid voxels (solids count as zero) after
    /// the most recent step.
    pub fn last_mean_velocity(&self) -> f64 {
        self.last_mean_velocity
    }

    pub fn total_mass(&self) -> f64 {
        neumaier_sum(self.f.iter().copied())
    }

    /// Solid flags over the original grid (wall padding excluded).
    pub fn solid_mask(&self) -> VoxelGrid {
        let o = self.offset;
        VoxelGrid::from_fn(self.grid_edge, |x, y, z| {
            !self.fluid_mask[lattice_index(self.dims, [x + o[0], y + o[1], z + o[2]])]
        })
    }

    /// Populations of direction `i` at grid voxel `(x, y, z)`, if fluid.
    pub fn population(&self, i: usize, x: usize, y: usize, z: usize) -> Option<f64> {
        let o = self.offset;
        let l = lattice_index(self.dims, [x + o[0], y + o[1], z + o[2]]);
        let k = self.nodes.binary_search(&l).ok()?;
        Some(self.f[i * self.nodes.len() + k])
    }

    /// One stream-collide update with forcing; updates the mean velocity.
    pub fn step(&mut self, cfg: &LbmConfig) -> Result<()> {
        let nf = self.nodes.len();
        self.step_count += 1;
        if nf == 0 {
            self.last_mean_velocity = 0.0;
            return Ok(());
        }
        let omega = 1.0 / cfg.relaxation_time;
        let g = cfg.body_force;
        let mut forcing = [0.0; Q];
        for i in 0..Q {
            forcing[i] = 3.0 * WEIGHTS[i] * VELOCITIES[i][0] as f64 * g;
        }

        let mut sum = 0.0;
        let mut comp = 0.0;
        let mut finite = true;
        let f = &self.f;
        let out = &mut self.scratch;
        let src = &self.sources;
        let mut fi = [0.0; Q];
        for k in 0..nf {
            for i in 0..Q {
                fi[i] = f[src[i * nf + k] as usize];
            }
            let rho: f64 = fi.iter().sum();
            let jx = fi[1] - fi[2] + fi[7] - fi[8] + fi[9] - fi[10] + fi[11] - fi[12] + fi[13] - fi[14];
            let jy = fi[3] - fi[4] + fi[7] - fi[8] - fi[9] + fi[10] + fi[15] - fi[16] + fi[17] - fi[18];
            let jz = fi[5] - fi[6] + fi[11] - fi[12] - fi[13] + fi[14] + fi[15] - fi[16] - fi[17] + fi[18];
            finite &= rho.is_finite() && rho > 0.0;
            let inv = 1.0 / rho;
            let u = [jx * inv, jy * inv, jz * inv];
            // Speeds past the lattice limit mean the run has left the valid regime.
            finite &= u[0] * u[0] + u[1] * u[1] + u[2] * u[2] < 1.0;
            let feq = equilibrium(rho, u);
            for i in 0..Q {
                out[i * nf + k] = fi[i] - omega * (fi[i] - feq[i]) + forcing[i];
            }
            // Mass flux with the half-step force correction, over the unit
            // reference density; dividing by the local density would leak
            // pressure variations into the Darcy flux.
            let ux = jx + 0.5 * g;
            let y = ux - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        if !finite {
            return Err(Error::Divergence {
                step: self.step_count,
                msg: "non-finite density or velocity beyond the lattice limit".into(),
            });
        }
        std::mem::swap(&mut self.f, &mut self.scratch);
        self.last_mean_velocity = sum / (self.grid_edge.pow(3)) as f64;
        Ok(())
    }
}

#[inline]
fn lattice_index(dims: [usize; 3], p: [usize; 3]) -> usize {
    p[0] + dims[0] * (p[1] + dims[1] * p[2])
}

#[inline]
fn lattice_coords(dims: [usize; 3], l: usize) -> [usize; 3] {
    [l % dims[0], (l / dims[0]) % dims[1], l / (dims[0] * dims[1])]
}

#[inline]
fn neighbor(dims: [usize; 3], p: [usize; 3], d: [i32; 3]) -> [usize; 3] {
    let mut q = [0; 3];
    for a in 0..3 {
        q[a] = (p[a] as i64 + d[a] as i64).rem_euclid(dims[a] as i64) as usize;
    }
    q
}

/// Fluid cells belonging to clusters that wrap around x, using the
/// 18-neighbour connectivity the lattice streams along.
fn flowing_mask(dims: [usize; 3], fluid: &[bool]) -> Vec<bool> {
    const UNSEEN: i64 = i64::MIN;
    let mut image = vec![[UNSEEN; 3]; fluid.len()];
    let mut keep = vec![false; fluid.len()];
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    for start in 0..fluid.len() {
        if !fluid[start] || image[start][0] != UNSEEN {
            continue;
        }
        image[start] = [0, 0, 0];
        queue.push_back(start);
        members.clear();
        let mut wraps_x = false;
        while let Some(l) = queue.pop_front() {
            members.push(l);
            let p = lattice_coords(dims, l);
            let img = image[l];
            for c in &VELOCITIES[1..] {
                let mut next_img = img;
                let mut q = [0usize; 3];
                for a in 0..3 {
                    let raw = p[a] as i64 + c[a] as i64;
                    let size = dims[a] as i64;
                    next_img[a] += raw.div_euclid(size);
                    q[a] = raw.rem_euclid(size) as usize;
                }
                let m = lattice_index(dims, q);
                if !fluid[m] {
                    continue;
                }
                if image[m][0] == UNSEEN {
                    image[m] = next_img;
                    queue.push_back(m);
                } else if image[m][0] != next_img[0] {
                    wraps_x = true;
                }
            }
        }
        if wraps_x {
            for &l in &members {
                keep[l] = true;
            }
        }
    }
    keep
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// One convergence check: `(step, mean_velocity, relative_change)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceRecord {
    pub step: u64,
    pub mean_velocity: f64,
    pub relative_change: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermeabilityResult {
    pub k_millidarcy: f64,
    /// Lattice units squared.
    pub k_lattice: f64,
    pub steps: u64,
    pub converged: bool,
    pub mean_velocity: f64,
    pub history: Vec<ConvergenceRecord>,
}

impl PermeabilityResult {
    fn no_flow() -> Self {
        Self {
            k_millidarcy: 0.0,
            k_lattice: 0.0,
            steps: 0,
            converged: true,
            mean_velocity: 0.0,
            history: Vec::new(),
        }
    }

    /// CSV with columns `step,mean_velocity,relative_change`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("step,mean_velocity,relative_change\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e},{:e}\n", r.step, r.mean_velocity, r.relative_change));
        }
        s
    }
}

pub fn lattice_to_millidarcy(k_lattice: f64, voxel_size: f64) -> f64 {
    k_lattice * voxel_size * voxel_size / M2_PER_MILLIDARCY
}

/// Run to steady state and apply Darcy's law along x.
pub fn solve_permeability(voxels: &VoxelGrid, cfg: &LbmConfig) -> Result<PermeabilityResult> {
    cfg.validate()?;
    if voxels.pore_count() == 0 {
        return Ok(PermeabilityResult::no_flow());
    }
    let mut state = LbmState::new(voxels, cfg.wall_axis);
    if cfg.prune_stagnant {
        state = state.pruned_to_flowing();
    }
    if state.fluid_nodes() == 0 {
        return Ok(PermeabilityResult::no_flow());
    }

    let mut history = Vec::new();
    let mut previous = 0.0;
    let mut converged = false;
    while state.step_count() < cfg.max_steps {
        state.step(cfg)?;
        if state.step_count().is_multiple_of(cfg.check_interval) {
            let u = state.last_mean_velocity();
            let change = if u == 0.0 && previous == 0.0 {
                0.0
            } else {
                ((u - previous) / u).abs()
            };
            history.push(ConvergenceRecord {
                step: state.step_count(),
                mean_velocity: u,
                relative_change: change,
            });
            previous = u;
            if change <= cfg.convergence_tol {
                converged = true;
                break;
            }
        }
    }
    let mean_velocity = state.last_mean_velocity();
    let k_lattice = cfg.lattice_viscosity() * mean_velocity / cfg.body_force;
    Ok(PermeabilityResult {
        k_millidarcy: lattice_to_millidarcy(k_lattice, cfg.voxel_size),
        k_lattice,
        steps: state.step_count(),
        converged,
        mean_velocity,
        history,
    })
}
