//! Empirical observables of a particle ensemble and decay-rate fitting.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::collision_oracle::DissipationEstimate;
use crate::dsmc::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::stats;

pub const MOMENTS_CSV_HEADER: &str = "t,mass,px,py,pz,E,theta,D,D_err,|rho_k|,tail";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub time: f64,
    pub mass: f64,
    pub momentum: [f64; 3],
    /// `Σ w |v|²`.
    pub energy: f64,
    /// `(E - |p|²)/3`.
    pub theta: f64,
    pub dissipation: Option<DissipationEstimate>,
    pub mode_amplitudes: Vec<([i64; 3], Complex64)>,
    /// Logarithm of the stretched-exponential tail moment.
    pub log_tail_moment: Option<f64>,
}

impl MomentReport {
    /// One row in `MOMENTS_CSV_HEADER` order; absent observables are left empty.
    /// `|rho_k|` carries the first scheduled mode.
    pub fn csv_row(&self) -> String {
        let mut row = String::new();
        let _ = write!(
            row,
            "{},{},{},{},{},{},{}",
            self.time,
            self.mass,
            self.momentum[0],
            self.momentum[1],
            self.momentum[2],
            self.energy,
            self.theta
        );
        match &self.dissipation {
            Some(d) => {
                let _ = write!(row, ",{},{}", d.value, d.std_error);
            }
            None => row.push_str(",,"),
        }
        match self.mode_amplitudes.first() {
            Some((_, a)) => {
                let _ = write!(row, ",{}", a.norm());
            }
            None => row.push(','),
        }
        match self.log_tail_moment {
            Some(t) => {
                let _ = write!(row, ",{}", t.exp());
            }
            None => row.push(','),
        }
        row
    }
}

pub fn moments(ensemble: &ParticleEnsemble) -> MomentReport {
    let p = ensemble.momentum();
    let energy = ensemble.energy();
    MomentReport {
        time: ensemble.time,
        mass: ensemble.mass(),
        momentum: [p[0], p[1], p[2]],
        energy,
        theta: ((energy - p.norm_squared()) / 3.0).max(0.0),
        dissipation: None,
        mode_amplitudes: Vec::new(),
        log_tail_moment: None,
    }
}

/// Log of `Σ w exp(A |v|^p)`, evaluated with a log-sum-exp so it cannot overflow.
pub fn stretched_tail_moment(ensemble: &ParticleEnsemble, a: f64, p: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::input("A", format!("must be positive, got {a}")));
    }
    let exps: Vec<f64> = ensemble
        .velocities
        .iter()
        .map(|v| a * v.norm().powf(p))
        .collect();
    let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exps.iter().map(|x| (x - top).exp()).sum();
    Ok(top + (sum * ensemble.particle_weight()).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeField {
    Density,
    Energy,
}

/// `Σ w e^{-2πi k·x}` (weighted by `|v|²` for the energy field).
pub fn spatial_mode(ensemble: &ParticleEnsemble, k: [i64; 3], field: ModeField) -> Complex64 {
    let kv = [k[0] as f64, k[1] as f64, k[2] as f64];
    let w = ensemble.particle_weight();
    let mut acc = Complex64::new(0.0, 0.0);
    for (x, v) in ensemble.positions.iter().zip(&ensemble.velocities) {
        let phase = -2.0 * PI * (kv[0] * x[0] + kv[1] * x[1] + kv[2] * x[2]);
        let weight = match field {
            ModeField::Density => 1.0,
            ModeField::Energy => v.norm_squared(),
        };
        acc += Complex64::from_polar(weight, phase);
    }
    acc * w
}

/// Maxwell speed distribution function at temperature `theta`.
fn maxwell_speed_cdf(s: f64, theta: f64) -> f64 {
    let x = s / theta.sqrt();
    erf(x / 2f64.sqrt()) - (2.0 / PI).sqrt() * x * (-0.5 * x * x).exp()
}

/// L¹ distance between the 64-bin speed histogram and the Maxwell speed law at
/// the sample temperature. Speeds are measured relative to the mean velocity.
pub fn maxwellian_distance(ensemble: &ParticleEnsemble) -> Result<f64> {
    const BINS: usize = 64;
    if ensemble.len() < 1000 {
        return Err(Error::input("ensemble", "needs at least 1000 particles"));
    }
    let mean = ensemble.momentum();
    let theta = ensemble.temperature();
    let speeds: Vec<f64> = ensemble.velocities.iter().map(|v| (v - mean).norm()).collect();
    let top = speeds.iter().copied().fold(0.0, f64::max);
    if theta == 0.0 || top == 0.0 {
        return Ok(2.0);
    }
    let width = top / BINS as f64;
    let mut counts = [0usize; BINS];
    for s in &speeds {
        counts[((s / width) as usize).min(BINS - 1)] += 1;
    }
    let n = speeds.len() as f64;
    let mut distance = 0.0;
    let mut lower = 0.0;
    for (b, &c) in counts.iter().enumerate() {
        let upper = maxwell_speed_cdf(width * (b + 1) as f64, theta);
        distance += (c as f64 / n - (upper - lower)).abs();
        lower = upper;
    }
    // Model mass beyond the largest sample.
    distance += 1.0 - lower;
    Ok(distance.min(2.0))
}

/// Least-squares fit of `ln y = intercept + rate·t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralFit {
    pub rate: f64,
    pub rate_std_error: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub points: usize,
}

pub fn fit_exponential_rate(series: &[(f64, f64)], window: (f64, f64)) -> Result<SpectralFit> {
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(Error::input("window", format!("needs t_end > t_start, got ({t0}, {t1})")));
    }
    let inside: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, _)| *t >= t0 && *t <= t1)
        .collect();
    if inside.len() < 5 {
        return Err(Error::input(
            "series",
            format!("needs at least 5 points in the window, got {}", inside.len()),
        ));
    }
    if let Some((t, y)) = inside.iter().find(|(_, y)| !(*y > 0.0)) {
        return Err(Error::input(
            "series",
            format!("non-positive value {y} at t = {t}; clip at the noise floor first"),
        ));
    }
    let t: Vec<f64> = inside.iter().map(|p| p.0).collect();
    let ly: Vec<f64> = inside.iter().map(|p| p.1.ln()).collect();
    let line = stats::fit_line(&t, &ly);
    Ok(SpectralFit {
        rate: line.slope,
        rate_std_error: line.slope_std_error,
        intercept: line.intercept,
        r_squared: line.r_squared,
        window,
        points: inside.len(),
    })
}

/// [`fit_exponential_rate`] with each `ln y` weighted by `y²`.
///
/// When `y` carries noise of roughly constant absolute size, `ln y` has
/// variance proportional to `1/y²`, so these are inverse-variance weights
/// and points near the noise floor no longer dominate the slope.
pub fn fit_exponential_rate_weighted(series: &[(f64, f64)], window: (f64, f64)) -> Result<SpectralFit> {
    let plain = fit_exponential_rate(series, window)?;
    let inside: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .collect();
    let t: Vec<f64> = inside.iter().map(|p| p.0).collect();
    let ly: Vec<f64> = inside.iter().map(|p| p.1.ln()).collect();
    let w: Vec<f64> = inside.iter().map(|p| p.1 * p.1).collect();
    let line = stats::fit_line_weighted(&t, &ly, &w);
    Ok(SpectralFit {
        rate: line.slope,
        rate_std_error: line.slope_std_error,
        intercept: line.intercept,
        r_squared: line.r_squared,
        ..plain
    })
}

/// Leading run of points whose value stays above `3 × floor`.
pub fn clip_noise_floor(series: &[(f64, f64)], floor: f64) -> Vec<(f64, f64)> {
    series
        .iter()
        .copied()
        .take_while(|(_, y)| *y > 3.0 * floor)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsmc::{init_ensemble, InitKind};
    use crate::kinematics::Vec3;
    use rand::{Rng, SeedableRng};

    #[test]
    fn two_particle_report() {
        let e = ParticleEnsemble::from_velocities(vec![Vec3::new(1., 0., 0.), Vec3::new(-1., 0., 0.)])
            .unwrap();
        let m = moments(&e);
        assert_eq!(m.energy, 1.0);
        assert!((m.theta - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.mass, 1.0);
    }

    #[test]
    fn single_particle_after_mean_removal() {
        let mut e = ParticleEnsemble::from_velocities(vec![Vec3::new(3., 0., 0.)]).unwrap();
        e.remove_mean_velocity();
        assert_eq!(moments(&e).momentum, [0.0; 3]);
    }

    #[test]
    fn maxwellian_temperature_estimate() {
        let n = 60_000;
        let e = init_ensemble(&InitKind::Maxwellian { theta: 2.0 }, n, 4).unwrap();
        let sd = 2.0 * (2.0 / (3.0 * n as f64)).sqrt();
        assert!((moments(&e).theta - 2.0).abs() < 4.0 * sd);
    }

    #[test]
    fn moments_are_mass_averages_when_merging() {
        let a = init_ensemble(&InitKind::Maxwellian { theta: 1.0 }, 3000, 1).unwrap();
        let b = init_ensemble(&InitKind::Maxwellian { theta: 3.0 }, 1000, 2).unwrap();
        let mut v = a.velocities.clone();
        v.extend(b.velocities.iter().copied());
        let merged = ParticleEnsemble::from_velocities(v).unwrap();
        let expect = 0.75 * a.energy() + 0.25 * b.energy();
        assert!((merged.energy() - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn tail_moment_examples() {
        let zero = ParticleEnsemble::from_velocities(vec![Vec3::zeros(); 4]).unwrap();
        assert_eq!(stretched_tail_moment(&zero, 0.5, 1.5).unwrap().exp(), 1.0);
        let one = ParticleEnsemble::from_velocities(vec![Vec3::new(0., 1., 0.)]).unwrap();
        let t = stretched_tail_moment(&one, 0.5, 1.5).unwrap();
        assert!((t - 0.5).abs() < 1e-15);
        let huge = ParticleEnsemble::from_velocities(vec![Vec3::new(1e4, 0., 0.)]).unwrap();
        assert!(stretched_tail_moment(&huge, 1.0, 1.5).unwrap().is_finite());
        assert!(stretched_tail_moment(&one, 0.0, 1.5).is_err());
    }

    #[test]
    fn mode_amplitudes() {
        let n = 200_000;
        let flat = init_ensemble(&InitKind::Maxwellian { theta: 1.0 }, n, 8).unwrap();
        let noise = 1.0 / (n as f64).sqrt();
        assert!(spatial_mode(&flat, [1, 0, 0], ModeField::Density).norm() < 4.0 * noise);
        assert!((spatial_mode(&flat, [0, 0, 0], ModeField::Density).re - 1.0).abs() < 1e-12);

        let kind = InitKind::Modulated {
            theta: 1.0,
            epsilon: 0.3,
            k: [1, 0, 0],
        };
        let m = init_ensemble(&kind, n, 8).unwrap();
        // ∫(1 + ε cos 2πx) e^{-2πix} dx = ε/2.
        let a = spatial_mode(&m, [1, 0, 0], ModeField::Density);
        assert!((a.norm() - 0.15).abs() < 4.0 * noise, "{}", a.norm());
        assert!(spatial_mode(&m, [0, 1, 0], ModeField::Density).norm() < 4.0 * noise);

        let unmodulated = InitKind::Modulated {
            theta: 1.0,
            epsilon: 0.0,
            k: [1, 0, 0],
        };
        let u = init_ensemble(&unmodulated, n, 8).unwrap();
        assert!(spatial_mode(&u, [1, 0, 0], ModeField::Density).norm() < 4.0 * noise);
    }

    #[test]
    fn maxwellian_distance_calibration() {
        let m = init_ensemble(&InitKind::Maxwellian { theta: 1.0 }, 100_000, 21).unwrap();
        let d = maxwellian_distance(&m).unwrap();
        assert!(d <= 0.03, "{d}");

        let bimodal = InitKind::TwoTemperature {
            theta1: 0.2,
            theta2: 5.0,
            fraction: 0.5,
        };
        let b = init_ensemble(&bimodal, 100_000, 21).unwrap();
        let d = maxwellian_distance(&b).unwrap();
        assert!(d >= 0.3, "{d}");

        let small = init_ensemble(&InitKind::Maxwellian { theta: 1.0 }, 100, 21).unwrap();
        assert!(maxwellian_distance(&small).is_err());
    }

    #[test]
    fn maxwellian_distance_shrinks_with_sample_size() {
        let avg = |n: usize| {
            (0..6)
                .map(|s| {
                    let e = init_ensemble(&InitKind::Maxwellian { theta: 1.0 }, n, 100 + s).unwrap();
                    maxwellian_distance(&e).unwrap()
                })
                .sum::<f64>()
                / 6.0
        };
        let (d3, d4, d5) = (avg(1_000), avg(10_000), avg(100_000));
        assert!(d3 > d4 && d4 > d5, "{d3} {d4} {d5}");
    }

    #[test]
    fn exact_exponential() {
        let s: Vec<(f64, f64)> = (0..20).map(|i| i as f64 * 0.1).map(|t| (t, (-2.0 * t).exp())).collect();
        let f = fit_exponential_rate(&s, (0.0, 2.0)).unwrap();
        assert!((f.rate + 2.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_series_has_zero_rate() {
        let s: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 4.0)).collect();
        let f = fit_exponential_rate(&s, (0.0, 9.0)).unwrap();
        assert_eq!(f.rate, 0.0);
    }

    #[test]
    fn weighted_fit_on_additive_noise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let s: Vec<(f64, f64)> = (0..400)
            .map(|i| i as f64 * 0.01)
            .map(|t| (t, (-1.5 * t).exp() + 0.01 * (2.0 * rng.random::<f64>() - 1.0)))
            .filter(|p| p.1 > 0.03)
            .collect();
        let window = (0.0, s[s.len() - 1].0);
        let f = fit_exponential_rate_weighted(&s, window).unwrap();
        assert!((f.rate + 1.5).abs() < 0.01, "{}", f.rate);
        assert_eq!(f.points, s.len());
        let exact: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.1, 2.0 * (-0.4 * i as f64 * 0.1).exp())).collect();
        assert!((fit_exponential_rate_weighted(&exact, (0.0, 2.0)).unwrap().rate + 0.4).abs() < 1e-12);
    }

    #[test]
    fn noisy_exponential() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<(f64, f64)> = (0..200)
            .map(|i| i as f64 * 0.025)
            .map(|t| (t, 3.0 * (-0.7 * t).exp() * (1.0 + 0.01 * (2.0 * rng.random::<f64>() - 1.0))))
            .collect();
        let f = fit_exponential_rate(&s, (0.0, 5.0)).unwrap();
        assert!((f.rate + 0.7).abs() < 0.02, "{}", f.rate);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let s: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 1.0 - 0.2 * i as f64)).collect();
        assert!(fit_exponential_rate(&s, (0.0, 9.0)).is_err());
        assert!(fit_exponential_rate(&s[..3], (0.0, 9.0)).is_err());
        assert!(fit_exponential_rate(&s, (5.0, 1.0)).is_err());
    }

    #[test]
    fn fit_is_scale_invariant() {
        let s: Vec<(f64, f64)> = (0..30)
            .map(|i| i as f64 * 0.1)
            .map(|t| (t, (-1.3 * t).exp() * (1.0 + 0.1 * (5.0 * t).sin())))
            .collect();
        let scaled: Vec<(f64, f64)> = s.iter().map(|(t, y)| (*t, 7.5 * y)).collect();
        let a = fit_exponential_rate(&s, (0.0, 3.0)).unwrap();
        let b = fit_exponential_rate(&scaled, (0.0, 3.0)).unwrap();
        assert!((a.rate - b.rate).abs() < 1e-12);
        assert!((b.intercept - a.intercept - 7.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn csv_row_leaves_missing_columns_empty() {
        let e = ParticleEnsemble::from_velocities(vec![Vec3::new(1., 0., 0.), Vec3::new(-1., 0., 0.)])
            .unwrap();
        let row = moments(&e).csv_row();
        assert_eq!(row, "0,1,0,0,0,1,0.3333333333333333,,,,");
        assert_eq!(row.split(',').count(), MOMENTS_CSV_HEADER.split(',').count());
    }
}
