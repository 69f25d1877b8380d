use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::ensemble::{ordered_sum, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::kinematics::{sigma_collision, Vec3};
use crate::restitution::RestitutionModel;
use crate::rng::{self, Purpose};

/// Particles handled by one thermostat random stream.
const THERMOSTAT_CHUNK: usize = 4096;

/// Free streaming `x ← (x + v dt) mod 1`.
pub fn transport_step(ensemble: &mut ParticleEnsemble, dt: f64) {
    ensemble
        .positions
        .par_iter_mut()
        .zip(ensemble.velocities.par_iter())
        .for_each(|(x, v)| {
            for k in 0..3 {
                let mut y = (x[k] + v[k] * dt).rem_euclid(1.0);
                if y >= 1.0 {
                    y = 0.0;
                }
                x[k] = y;
            }
        });
}

/// Gaussian velocity kicks of variance `2 λ^γ dt` per component.
///
/// With `momentum_projection` the ensemble-mean kick is removed, so total
/// momentum is unchanged.
pub fn thermostat_step(
    ensemble: &mut ParticleEnsemble,
    lambda: f64,
    gamma: f64,
    dt: f64,
    momentum_projection: bool,
    seed: u64,
    step: u64,
) {
    let strength = lambda.powf(gamma);
    if strength == 0.0 {
        return;
    }
    let amplitude = (2.0 * strength * dt).sqrt();
    let mut kicks = vec![Vec3::zeros(); ensemble.len()];
    kicks
        .par_chunks_mut(THERMOSTAT_CHUNK)
        .enumerate()
        .for_each(|(chunk, out)| {
            let mut rng = rng::stream(seed, Purpose::Thermostat, step, chunk as u64);
            for k in out {
                *k = Vec3::new(
                    amplitude * rng.sample::<f64, _>(StandardNormal),
                    amplitude * rng.sample::<f64, _>(StandardNormal),
                    amplitude * rng.sample::<f64, _>(StandardNormal),
                );
            }
        });
    let mean = if momentum_projection {
        ordered_sum(&kicks, |k| *k) / kicks.len() as f64
    } else {
        Vec3::zeros()
    };
    ensemble
        .velocities
        .par_iter_mut()
        .zip(kicks.par_iter())
        .for_each(|(v, k)| *v += k - mean);
}

/// Particle-to-cell assignment and per-cell majorant relative speeds.
#[derive(Debug, Clone, Default)]
pub struct CellGrid {
    pub counts: [usize; 3],
    /// Particle indices grouped by cell.
    pub order: Vec<usize>,
    /// `offsets[c]..offsets[c + 1]` indexes `order` for cell `c`.
    pub offsets: Vec<usize>,
    /// Majorant of `|v_i - v_j|` within each cell, refreshed every step.
    pub u_max: Vec<f64>,
}

impl CellGrid {
    pub fn new(counts: [usize; 3]) -> Result<Self> {
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::input("cells", "cell counts must be positive"));
        }
        Ok(Self {
            counts,
            ..Default::default()
        })
    }

    pub fn n_cells(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.n_cells() == 1
    }

    pub fn cell_volume(&self) -> f64 {
        1.0 / self.n_cells() as f64
    }

    #[inline]
    pub fn cell_of(&self, x: &Vec3) -> usize {
        let [cx, cy, cz] = self.counts;
        let idx = |c: f64, n: usize| ((c * n as f64) as usize).min(n - 1);
        (idx(x[0], cx) * cy + idx(x[1], cy)) * cz + idx(x[2], cz)
    }

    /// Counting sort of particles into cells.
    pub fn assign(&mut self, ensemble: &ParticleEnsemble) {
        let n_cells = self.n_cells();
        self.offsets.clear();
        self.offsets.resize(n_cells + 1, 0);
        if n_cells == 1 {
            self.order.clear();
            self.order.extend(0..ensemble.len());
            self.offsets[1] = ensemble.len();
            return;
        }
        let cells: Vec<usize> = ensemble.positions.iter().map(|x| self.cell_of(x)).collect();
        for &c in &cells {
            self.offsets[c + 1] += 1;
        }
        for c in 0..n_cells {
            self.offsets[c + 1] += self.offsets[c];
        }
        let mut cursor = self.offsets.clone();
        self.order.resize(ensemble.len(), 0);
        for (i, &c) in cells.iter().enumerate() {
            self.order[cursor[c]] = i;
            cursor[c] += 1;
        }
    }
}

/// Per-step collision bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct CollisionStats {
    pub candidates: u64,
    pub accepted: u64,
    /// Candidates whose relative speed exceeded the cell majorant.
    pub overflows: u64,
    /// Sum over accepted collisions of `|v'|²+|v'_*|²-|v|²-|v_*|²` from the loss formula.
    pub energy_change: f64,
    /// Largest per-collision gap between the loss formula and the recomputed energies.
    pub max_identity_residual: f64,
}

impl CollisionStats {
    pub fn merge(&mut self, other: &CollisionStats) {
        self.candidates += other.candidates;
        self.accepted += other.accepted;
        self.overflows += other.overflows;
        self.energy_change += other.energy_change;
        self.max_identity_residual = self.max_identity_residual.max(other.max_identity_residual);
    }
}

/// Kinetic constants shared by every cell in a step.
struct CellKernel<'a> {
    model: &'a RestitutionModel,
    lambda: f64,
    /// `4π · w / V_c · dt`.
    rate_factor: f64,
    seed: u64,
    step: u64,
}

/// No-time-counter collision sampling.
///
/// A cell with `n` particles draws `n(n-1)/2 · 4π u_max · (w/V_c) · dt`
/// candidate pairs (fractional part by a Bernoulli draw) and accepts each with
/// probability `|u|/u_max`; accepted pairs scatter with `σ` uniform on the
/// sphere. `u_max = 2 max_i |v_i - v̄|` over the cell bounds every pair speed
/// at the start of the step.
#[allow(clippy::too_many_arguments)]
pub fn collision_step(
    ensemble: &mut ParticleEnsemble,
    grid: &mut CellGrid,
    model: &RestitutionModel,
    lambda: f64,
    dt: f64,
    seed: u64,
    step: u64,
) -> Result<CollisionStats> {
    grid.assign(ensemble);
    let n_cells = grid.n_cells();
    let kernel = CellKernel {
        model,
        lambda,
        rate_factor: 4.0 * PI * ensemble.particle_weight() / grid.cell_volume() * dt,
        seed,
        step,
    };

    if grid.is_homogeneous() {
        let (stats, u_max) = collide_cell(&mut ensemble.velocities, 0, &kernel)?;
        grid.u_max.clear();
        grid.u_max.push(u_max);
        return Ok(stats);
    }

    let mut buffer: Vec<Vec3> = grid.order.iter().map(|&i| ensemble.velocities[i]).collect();
    let mut slices: Vec<(usize, &mut [Vec3])> = Vec::with_capacity(n_cells);
    let mut rest: &mut [Vec3] = &mut buffer;
    for c in 0..n_cells {
        let len = grid.offsets[c + 1] - grid.offsets[c];
        let (head, tail) = std::mem::take(&mut rest).split_at_mut(len);
        slices.push((c, head));
        rest = tail;
    }
    let results: Vec<Result<(CollisionStats, f64)>> = slices
        .into_par_iter()
        .map(|(c, cell)| collide_cell(cell, c, &kernel))
        .collect();

    let mut stats = CollisionStats::default();
    grid.u_max.clear();
    for r in results {
        let (s, u) = r?;
        stats.merge(&s);
        grid.u_max.push(u);
    }
    for (slot, &i) in grid.order.iter().enumerate() {
        ensemble.velocities[i] = buffer[slot];
    }
    Ok(stats)
}

fn collide_cell(v: &mut [Vec3], cell: usize, k: &CellKernel) -> Result<(CollisionStats, f64)> {
    let n = v.len();
    let mut stats = CollisionStats::default();
    if n < 2 {
        return Ok((stats, 0.0));
    }
    let mean = v.iter().fold(Vec3::zeros(), |a, x| a + x) / n as f64;
    let radius = v.iter().map(|x| (x - mean).norm()).fold(0.0, f64::max);
    let u_max = 2.0 * radius;
    if u_max == 0.0 {
        return Ok((stats, 0.0));
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = pairs * k.rate_factor * u_max;
    if expected > 10.0 * pairs {
        return Err(Error::config(
            "dt",
            format!(
                "cell {cell} needs {expected:.3e} candidates for {pairs} pairs in one step; reduce dt"
            ),
        ));
    }
    let mut rng: ChaCha8Rng = rng::stream(k.seed, Purpose::Collisions, k.step, cell as u64);
    let whole = expected.floor();
    let mut count = whole as u64;
    if rng.random::<f64>() < expected - whole {
        count += 1;
    }
    stats.candidates = count;
    for _ in 0..count {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let u = v[i] - v[j];
        let speed = u.norm();
        if speed > u_max {
            stats.overflows += 1;
        }
        if rng.random::<f64>() * u_max >= speed {
            continue;
        }
        let sigma = uniform_sphere(&mut rng);
        let out = sigma_collision(v[i], v[j], u, speed, &sigma, k.model, k.lambda);
        let before = v[i].norm_squared() + v[j].norm_squared();
        let after = out.v_prime.norm_squared() + out.v_star_prime.norm_squared();
        let cos = (u.dot(&sigma) / speed).clamp(-1.0, 1.0);
        let formula = -speed * speed * (1.0 - cos) / 4.0 * (1.0 - out.e_used * out.e_used);
        stats.max_identity_residual = stats
            .max_identity_residual
            .max(((after - before) - formula).abs());
        stats.energy_change += formula;
        stats.accepted += 1;
        v[i] = out.v_prime;
        v[j] = out.v_star_prime;
    }
    Ok((stats, u_max))
}

#[inline]
pub(crate) fn uniform_sphere<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f64 = 2.0 * rng.random::<f64>() - 1.0;
    let phi = 2.0 * PI * rng.random::<f64>();
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}
