//! Particle simulation of the thermostatted inelastic Boltzmann equation on the
//! unit torus: free transport, no-time-counter collisions and Gaussian kicks.

pub mod checkpoint;
mod ensemble;
mod step;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use ensemble::{init_ensemble, InitKind, ParticleEnsemble};
pub(crate) use step::uniform_sphere;
pub use step::{collision_step, thermostat_step, transport_step, CellGrid, CollisionStats};

use crate::collision_oracle::{dissipation, QuadratureSpec};
use crate::error::{Error, Result};
use crate::observables::{moments, spatial_mode, stretched_tail_moment, ModeField, MomentReport};
use crate::restitution::{check_lambda, RestitutionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub lambda: f64,
    pub model: RestitutionModel,
    pub n_particles: usize,
    pub cells: [usize; 3],
    pub dt: f64,
    pub thermostat: bool,
    pub momentum_projection: bool,
    pub seed: u64,
    pub t_end: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda).map_err(|e| Error::config("lambda", e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| Error::config("restitution", e.to_string()))?;
        if self.n_particles < 2 {
            return Err(Error::config("n_particles", "needs at least 2 particles"));
        }
        if self.cells.iter().any(|&c| c == 0) {
            return Err(Error::config("cells", "cell counts must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config("t_end", format!("must be non-negative, got {}", self.t_end)));
        }
        Ok(())
    }

    /// Exponent `γ` of the heat-bath strength.
    pub fn bath_gamma(&self) -> f64 {
        self.model.bath_exponent()
    }

    /// `λ^γ`, zero when the thermostat is off.
    pub fn bath_strength(&self) -> f64 {
        if self.thermostat {
            self.lambda.powf(self.bath_gamma())
        } else {
            0.0
        }
    }

    /// A tenth of the initial mean free time, `0.1 / (4π E|v - v_*|)`.
    pub fn default_dt(init: &InitKind) -> f64 {
        0.1 / (4.0 * PI * init.mean_relative_speed())
    }

    pub fn steps_for(&self, duration: f64) -> u64 {
        (duration / self.dt - 1e-9).ceil().max(0.0) as u64
    }
}

/// Mean time between collisions of one particle at temperature `theta`.
pub fn mean_collision_time(theta: f64) -> f64 {
    1.0 / (4.0 * PI * (16.0 * theta / PI).sqrt())
}

/// Observables recorded during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSchedule {
    #[serde(default = "default_moments_period")]
    pub moments_period: f64,
    #[serde(default)]
    pub modes: Vec<[i64; 3]>,
    /// Dissipation estimate with this many sampled pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dissipation_samples: Option<usize>,
    /// Stretched tail moment `exp(A|v|^p)` with `(A, p)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<(f64, f64)>,
}

fn default_moments_period() -> f64 {
    0.1
}

impl Default for ObservableSchedule {
    fn default() -> Self {
        Self::moments_every(default_moments_period())
    }
}

impl ObservableSchedule {
    pub fn moments_every(period: f64) -> Self {
        Self {
            moments_period: period,
            modes: Vec::new(),
            dissipation_samples: None,
            tail: None,
        }
    }
}

/// Simulation state: ensemble, cell grid and global step counter.
///
/// Time is always `step · dt`, and every random stream is keyed by the
/// step, so a restored checkpoint continues the exact same trajectory.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    ensemble: ParticleEnsemble,
    grid: CellGrid,
    step: u64,
    totals: CollisionStats,
}

impl Simulation {
    pub fn new(config: SimConfig, ensemble: ParticleEnsemble) -> Result<Self> {
        Self::resume(config, ensemble, 0)
    }

    pub fn from_init(config: SimConfig, init: &InitKind) -> Result<Self> {
        config.validate()?;
        let ensemble = init_ensemble(init, config.n_particles, config.seed)?;
        Self::new(config, ensemble)
    }

    /// Continues from `ensemble` at global step `step`.
    pub fn resume(config: SimConfig, mut ensemble: ParticleEnsemble, step: u64) -> Result<Self> {
        config.validate()?;
        if ensemble.len() != config.n_particles {
            return Err(Error::config(
                "n_particles",
                format!("config says {} but the ensemble holds {}", config.n_particles, ensemble.len()),
            ));
        }
        let grid = CellGrid::new(config.cells)?;
        ensemble.time = step as f64 * config.dt;
        Ok(Self {
            config,
            ensemble,
            grid,
            step,
            totals: CollisionStats::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ensemble
    }

    pub fn ensemble_mut(&mut self) -> &mut ParticleEnsemble {
        &mut self.ensemble
    }

    pub fn into_ensemble(self) -> ParticleEnsemble {
        self.ensemble
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.ensemble.time
    }

    pub fn grid(&self) -> &CellGrid {
        &self.grid
    }

    /// Collision bookkeeping accumulated since construction.
    pub fn totals(&self) -> &CollisionStats {
        &self.totals
    }

    /// One splitting step: transport, collisions, thermostat.
    pub fn step(&mut self) -> Result<CollisionStats> {
        let c = &self.config;
        if !self.grid.is_homogeneous() {
            transport_step(&mut self.ensemble, c.dt);
        }
        let stats = collision_step(
            &mut self.ensemble,
            &mut self.grid,
            &c.model,
            c.lambda,
            c.dt,
            c.seed,
            self.step,
        )?;
        if c.thermostat {
            thermostat_step(
                &mut self.ensemble,
                c.lambda,
                c.bath_gamma(),
                c.dt,
                c.momentum_projection,
                c.seed,
                self.step,
            );
        }
        self.step += 1;
        self.ensemble.time = self.step as f64 * c.dt;
        self.totals.merge(&stats);
        Ok(stats)
    }

    pub fn advance(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// Observables of the current state, with sampling streams keyed by the step.
    pub fn report(&self, schedule: &ObservableSchedule) -> Result<MomentReport> {
        let mut r = moments(&self.ensemble);
        r.mode_amplitudes = schedule
            .modes
            .iter()
            .map(|k| (*k, spatial_mode(&self.ensemble, *k, ModeField::Density)))
            .collect();
        if let Some(n) = schedule.dissipation_samples {
            let quad = QuadratureSpec::monte_carlo(n, crate::rng::derive_seed(
                self.config.seed,
                crate::rng::Purpose::Sampling,
                self.step,
                0,
            ))?;
            r.dissipation = Some(dissipation(&self.ensemble, &self.config.model, self.config.lambda, &quad)?);
        }
        if let Some((a, p)) = schedule.tail {
            r.log_tail_moment = Some(stretched_tail_moment(&self.ensemble, a, p)?);
        }
        Ok(r)
    }

    /// Steps until `t_end`, reporting at every multiple of `moments_period`
    /// (the start included) and at the final step. A run resumed from a
    /// checkpoint therefore reports at the same steps as an uninterrupted one.
    pub fn run(&mut self, schedule: &ObservableSchedule) -> Result<Vec<MomentReport>> {
        let mut out = Vec::new();
        self.run_with(schedule, |_, r| {
            out.push(r);
            Ok(())
        })?;
        Ok(out)
    }

    /// Like [`Simulation::run`], handing each report and the state it came
    /// from to `sink` as it is produced.
    pub fn run_with<F>(&mut self, schedule: &ObservableSchedule, mut sink: F) -> Result<()>
    where
        F: FnMut(&Simulation, MomentReport) -> Result<()>,
    {
        if !(schedule.moments_period > 0.0) {
            return Err(Error::config("schedule.moments_period", "must be positive"));
        }
        let period = ((schedule.moments_period / self.config.dt).round() as u64).max(1);
        let last = self.config.steps_for(self.config.t_end);
        if self.step > last {
            return Ok(());
        }
        if self.step % period == 0 || self.step == last {
            let r = self.report(schedule)?;
            sink(self, r)?;
        }
        while self.step < last {
            self.step()?;
            if self.step % period == 0 || self.step == last {
                let r = self.report(schedule)?;
                sink(self, r)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(model: RestitutionModel, thermostat: bool, lambda: f64) -> SimConfig {
        SimConfig {
            lambda,
            model,
            n_particles: 20_000,
            cells: [1, 1, 1],
            dt: SimConfig::default_dt(&InitKind::Maxwellian { theta: 1.0 }),
            thermostat,
            momentum_projection: true,
            seed: 7,
            t_end: 0.5,
        }
    }

    #[test]
    fn elastic_equilibrium_is_invariant() {
        let mut c = config(RestitutionModel::constant(1.0).unwrap(), false, 0.0);
        c.dt = 0.01;
        let mut sim = Simulation::from_init(c, &InitKind::Maxwellian { theta: 1.0 }).unwrap();
        let e0 = sim.ensemble().energy();
        let reports = sim.run(&ObservableSchedule::moments_every(0.1)).unwrap();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!((r.energy - e0).abs() < 1e-12 * e0);
        }
        assert!((sim.time() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_restitution_cools_monotonically() {
        let c = config(RestitutionModel::constant(0.9).unwrap(), false, 0.0);
        let mut sim = Simulation::from_init(c, &InitKind::Maxwellian { theta: 1.0 }).unwrap();
        let reports = sim.run(&ObservableSchedule::moments_every(0.02)).unwrap();
        for w in reports.windows(2) {
            assert!(w[1].theta < w[0].theta);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = config(RestitutionModel::viscoelastic(1.0).unwrap(), true, 0.2);
        let init = InitKind::Maxwellian { theta: 0.5 };
        let mut full = Simulation::from_init(c.clone(), &init).unwrap();
        full.advance(40).unwrap();

        let mut first = Simulation::from_init(c.clone(), &init).unwrap();
        first.advance(25).unwrap();
        let mut second = Simulation::resume(c, first.ensemble().clone(), first.step_count()).unwrap();
        second.advance(15).unwrap();
        assert_eq!(full.ensemble(), second.ensemble());
    }

    #[test]
    fn thread_count_does_not_change_trajectory() {
        let mut c = config(RestitutionModel::viscoelastic(1.0).unwrap(), true, 0.2);
        c.cells = [4, 4, 4];
        let init = InitKind::Maxwellian { theta: 0.5 };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut s = Simulation::from_init(c.clone(), &init).unwrap();
                s.advance(10).unwrap();
                s.into_ensemble()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn wrong_particle_count_is_rejected() {
        let c = config(RestitutionModel::constant(0.9).unwrap(), false, 0.0);
        let e = init_ensemble(&InitKind::Maxwellian { theta: 1.0 }, 10, 1).unwrap();
        assert!(matches!(Simulation::new(c, e), Err(Error::Config { .. })));
    }
}
