use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Vec3;
use crate::rng::{self, Purpose};

/// Equal-weight particles on the unit torus `[0,1)³` with total mass 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub time: f64,
}

impl ParticleEnsemble {
    pub fn new(positions: Vec<Vec3>, velocities: Vec<Vec3>) -> Result<Self> {
        if positions.len() != velocities.len() {
            return Err(Error::input("ensemble", "positions and velocities differ in length"));
        }
        if velocities.is_empty() {
            return Err(Error::input("ensemble", "must hold at least one particle"));
        }
        if positions
            .iter()
            .any(|x| x.iter().any(|c| !(0.0..1.0).contains(c)))
        {
            return Err(Error::input("ensemble", "positions must lie in [0,1)^3"));
        }
        if velocities.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::input("ensemble", "velocities must be finite"));
        }
        Ok(Self {
            positions,
            velocities,
            time: 0.0,
        })
    }

    /// Spatially homogeneous ensemble; every particle sits at the origin.
    pub fn from_velocities(velocities: Vec<Vec3>) -> Result<Self> {
        let positions = vec![Vec3::zeros(); velocities.len()];
        Self::new(positions, velocities)
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn particle_weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn mass(&self) -> f64 {
        1.0
    }

    pub fn momentum(&self) -> Vec3 {
        ordered_sum(&self.velocities, |v| *v) * self.particle_weight()
    }

    /// `Σ w |v|²`.
    pub fn energy(&self) -> f64 {
        ordered_sum_scalar(&self.velocities, |v| v.norm_squared()) * self.particle_weight()
    }

    pub fn temperature(&self) -> f64 {
        let p = self.momentum();
        ((self.energy() - p.norm_squared()) / 3.0).max(0.0)
    }

    /// Subtracts the mean velocity from every particle.
    pub fn remove_mean_velocity(&mut self) {
        let mean = self.momentum();
        for v in &mut self.velocities {
            *v -= mean;
        }
    }

    /// Rescales velocities about their mean by `factor`.
    pub fn scale_thermal_velocities(&mut self, factor: f64) {
        let mean = self.momentum();
        for v in &mut self.velocities {
            *v = mean + (*v - mean) * factor;
        }
    }

    /// Exact mean of `|v_i - v_j|` over distinct pairs for small ensembles,
    /// or over `samples` random pairs otherwise.
    pub fn mean_relative_speed(&self, samples: usize, seed: u64) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let v = &self.velocities;
        if n * (n - 1) / 2 <= samples {
            let mut total = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    total += (v[i] - v[j]).norm();
                }
            }
            return total / (n * (n - 1) / 2) as f64;
        }
        let mut rng = rng::stream(seed, Purpose::Sampling, 0, 0);
        let mut total = 0.0;
        for _ in 0..samples {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            total += (v[i] - v[j]).norm();
        }
        total / samples as f64
    }
}

/// Sums in fixed blocks so the rounding does not depend on scheduling.
pub(crate) fn ordered_sum<T, F: Fn(&T) -> Vec3>(items: &[T], f: F) -> Vec3 {
    items
        .chunks(4096)
        .map(|c| c.iter().fold(Vec3::zeros(), |acc, x| acc + f(x)))
        .fold(Vec3::zeros(), |acc, x| acc + x)
}

pub(crate) fn ordered_sum_scalar<T, F: Fn(&T) -> f64>(items: &[T], f: F) -> f64 {
    items
        .chunks(4096)
        .map(|c| c.iter().map(&f).sum::<f64>())
        .sum()
}

/// Initial velocity law and spatial profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitKind {
    Maxwellian {
        theta: f64,
    },
    /// A fraction `fraction` of the particles at `theta1`, the rest at `theta2`.
    TwoTemperature {
        theta1: f64,
        theta2: f64,
        fraction: f64,
    },
    /// Maxwellian velocities with density `1 + epsilon cos(2π k·x)`.
    Modulated {
        theta: f64,
        epsilon: f64,
        k: [i64; 3],
    },
}

impl InitKind {
    pub fn validate(&self) -> Result<()> {
        let positive = |what, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::input(what, format!("must be positive, got {x}")))
            }
        };
        match *self {
            InitKind::Maxwellian { theta } => positive("theta", theta),
            InitKind::TwoTemperature {
                theta1,
                theta2,
                fraction,
            } => {
                positive("theta1", theta1)?;
                positive("theta2", theta2)?;
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(Error::input("fraction", format!("must lie in [0,1], got {fraction}")));
                }
                Ok(())
            }
            InitKind::Modulated { theta, epsilon, k } => {
                positive("theta", theta)?;
                if !(0.0..1.0).contains(&epsilon) {
                    return Err(Error::input("epsilon", format!("must lie in [0,1), got {epsilon}")));
                }
                if epsilon > 0.0 && k == [0, 0, 0] {
                    return Err(Error::input("k", "wave vector must be non-zero"));
                }
                Ok(())
            }
        }
    }

    /// Analytic mean relative speed `E|v - v_*|` of the initial law.
    pub fn mean_relative_speed(&self) -> f64 {
        let pair = |ta: f64, tb: f64| (8.0 * (ta + tb) / PI).sqrt();
        match *self {
            InitKind::Maxwellian { theta } | InitKind::Modulated { theta, .. } => pair(theta, theta),
            InitKind::TwoTemperature {
                theta1,
                theta2,
                fraction,
            } => {
                let f = fraction;
                f * f * pair(theta1, theta1)
                    + 2.0 * f * (1.0 - f) * pair(theta1, theta2)
                    + (1.0 - f) * (1.0 - f) * pair(theta2, theta2)
            }
        }
    }

    /// Kinetic temperature of the law (before mean removal).
    pub fn temperature(&self) -> f64 {
        match *self {
            InitKind::Maxwellian { theta } | InitKind::Modulated { theta, .. } => theta,
            InitKind::TwoTemperature {
                theta1,
                theta2,
                fraction,
            } => fraction * theta1 + (1.0 - fraction) * theta2,
        }
    }
}

/// Samples `n` particles from `kind` and removes the mean velocity.
pub fn init_ensemble(kind: &InitKind, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    kind.validate()?;
    if n == 0 {
        return Err(Error::input("n_particles", "must be positive"));
    }
    let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
    fn gaussian<R: Rng>(rng: &mut R, theta: f64) -> Vec3 {
        let s = theta.sqrt();
        Vec3::new(
            s * rng.sample::<f64, _>(StandardNormal),
            s * rng.sample::<f64, _>(StandardNormal),
            s * rng.sample::<f64, _>(StandardNormal),
        )
    }
    fn uniform_position<R: Rng>(rng: &mut R) -> Vec3 {
        Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>())
    }

    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    match *kind {
        InitKind::Maxwellian { theta } => {
            for _ in 0..n {
                positions.push(uniform_position(&mut rng));
                velocities.push(gaussian(&mut rng, theta));
            }
        }
        InitKind::TwoTemperature {
            theta1,
            theta2,
            fraction,
        } => {
            let cold = (fraction * n as f64).round() as usize;
            for i in 0..n {
                positions.push(uniform_position(&mut rng));
                let theta = if i < cold { theta1 } else { theta2 };
                velocities.push(gaussian(&mut rng, theta));
            }
        }
        InitKind::Modulated { theta, epsilon, k } => {
            let kv = Vec3::new(k[0] as f64, k[1] as f64, k[2] as f64) * (2.0 * PI);
            while positions.len() < n {
                let x = uniform_position(&mut rng);
                let accept = (1.0 + epsilon * kv.dot(&x).cos()) / (1.0 + epsilon);
                if rng.random::<f64>() < accept {
                    positions.push(x);
                }
            }
            for _ in 0..n {
                velocities.push(gaussian(&mut rng, theta));
            }
        }
    }
    let mut ensemble = ParticleEnsemble::new(positions, velocities)?;
    ensemble.remove_mean_velocity();
    Ok(ensemble)
}
