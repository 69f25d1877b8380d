//! Energy eigenvalue `μ_λ`: first-order prediction, steady states,
//! linear-response measurement, `λ^γ` scaling and free cooling.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::collision_oracle::{dissipation, Estimate, QuadratureSpec, KAPPA};
use crate::dsmc::{mean_collision_time, InitKind, ParticleEnsemble, SimConfig, Simulation};
use crate::error::{Error, Result};
use crate::kinematics::Vec3;
use crate::observables::{fit_exponential_rate_weighted, MomentReport, SpectralFit};
use crate::quadrature::integrate_split;
use crate::restitution::{ExpansionParams, RestitutionModel};
use crate::rng::{derive_seed, Purpose};
use crate::stats;

/// `E|u|^k` for `u ~ Normal(0, 2θ Id)`.
pub fn relative_speed_moment(theta: f64, k: f64) -> f64 {
    let log = 0.5 * k * (4.0 * theta).ln() + ln_gamma(0.5 * (3.0 + k)) - ln_gamma(1.5);
    log.exp()
}

/// Small-λ limit `ζ_0(r²) = coeff · r^power` of `ψ_{e_λ}(r²)/λ^γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitKernel {
    pub coeff: f64,
    pub power: f64,
}

impl LimitKernel {
    /// `κ a/(4+γ) r^{3+γ}` for laws with `e(r) ≈ 1 - a r^γ`.
    pub fn from_expansion(expansion: &ExpansionParams) -> Self {
        Self {
            coeff: KAPPA * expansion.a / (4.0 + expansion.gamma),
            power: 3.0 + expansion.gamma,
        }
    }

    /// The `e = 1 - λ` family: `π(1 - (1-λ)²) r³ / λ → 2π r³`.
    pub fn constant_family() -> Self {
        Self {
            coeff: 2.0 * PI,
            power: 3.0,
        }
    }

    /// Kernel for `model`, reading a constant law as a member of the `1 - λ` family.
    pub fn for_model(model: &RestitutionModel) -> Self {
        match model {
            RestitutionModel::Constant { .. } => Self::constant_family(),
            _ => Self::from_expansion(&model.expansion_params()),
        }
    }

    pub fn eval(&self, r_squared: f64) -> f64 {
        self.coeff * r_squared.powf(0.5 * self.power)
    }

    /// Root `θ̄` of the balance `½ coeff m_power(θ) = 6`, by bisection in `ln θ`.
    pub fn theta_bar(&self) -> f64 {
        let excess = |theta: f64| 0.5 * self.coeff * relative_speed_moment(theta, self.power) - 6.0;
        let (mut lo, mut hi) = (1e-12f64, 1.0f64);
        while excess(hi) < 0.0 {
            hi *= 4.0;
        }
        while excess(lo) > 0.0 {
            lo /= 4.0;
        }
        for _ in 0..400 {
            let mid = (lo * hi).sqrt();
            if excess(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-13 * hi {
                break;
            }
        }
        (lo * hi).sqrt()
    }
}

/// Limit temperature `θ̄` solving `(κ′ a/(4+γ)) m_{3+γ}(θ) = 6` with `κ′ = κ/2`.
pub fn predict_theta_bar(expansion: &ExpansionParams) -> f64 {
    LimitKernel::from_expansion(expansion).theta_bar()
}

fn maxwellian_density(theta: f64, rho_sq: f64) -> f64 {
    (2.0 * PI * theta).powf(-1.5) * (-0.5 * rho_sq / theta).exp()
}

/// `φ_0(v) = c (|v|² - 3θ̄) M_θ̄(v)` normalised in `L¹(⟨v⟩²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyEigenfunctionSpec {
    pub theta_bar: f64,
    pub c: f64,
}

const RADIAL_TOL: f64 = 1e-13;

impl EnergyEigenfunctionSpec {
    pub fn new(theta_bar: f64) -> Result<Self> {
        if !(theta_bar > 0.0 && theta_bar.is_finite()) {
            return Err(Error::input("theta_bar", format!("must be positive, got {theta_bar}")));
        }
        let unit = Self { theta_bar, c: 1.0 };
        let norm = unit.radial_integral(|rho, phi| phi.abs() * (1.0 + rho * rho));
        Ok(Self {
            theta_bar,
            c: 1.0 / norm,
        })
    }

    /// `φ_0` at speed `rho`.
    pub fn radial(&self, rho: f64) -> f64 {
        let r2 = rho * rho;
        self.c * (r2 - 3.0 * self.theta_bar) * maxwellian_density(self.theta_bar, r2)
    }

    pub fn eval(&self, v: &Vec3) -> f64 {
        self.radial(v.norm())
    }

    fn cutoff(&self) -> f64 {
        14.0 * self.theta_bar.sqrt()
    }

    /// `∫ h(|v|, φ_0(v)) dv` in polar coordinates, split at the sign change of `φ_0`.
    fn radial_integral<H: Fn(f64, f64) -> f64>(&self, h: H) -> f64 {
        let node = (3.0 * self.theta_bar).sqrt();
        integrate_split(
            |rho| 4.0 * PI * rho * rho * h(rho, self.radial(rho)),
            0.0,
            self.cutoff(),
            &[node],
            RADIAL_TOL,
            1e-300,
        )
    }

    /// `∫ φ_0 dv`.
    pub fn mass(&self) -> f64 {
        self.radial_integral(|_, phi| phi)
    }

    /// `E(φ_0) = ∫ φ_0 |v|² dv`.
    pub fn energy(&self) -> f64 {
        self.radial_integral(|rho, phi| phi * rho * rho)
    }

    /// `∫ |φ_0| ⟨v⟩² dv`.
    pub fn weighted_norm(&self) -> f64 {
        self.radial_integral(|rho, phi| phi.abs() * (1.0 + rho * rho))
    }
}

/// `I_0(G_0, φ_0)` by nested radial quadrature.
///
/// For fixed `v` with `|v| = ρ`, `|v - v_*|` under `v_* ~ M_θ̄` has the
/// noncentral-chi density
/// `(s/ρ) (2πθ)^{-1/2} [e^{-(s-ρ)²/2θ} - e^{-(s+ρ)²/2θ}]`; the inner
/// integral averages `ζ_0(s²)` against it and the outer one integrates `φ_0`.
pub fn i0_nested(kernel: &LimitKernel, phi: &EnergyEigenfunctionSpec) -> f64 {
    let theta = phi.theta_bar;
    let sd = theta.sqrt();
    let inner = |rho: f64| {
        let density = |s: f64| {
            let shape = if rho == 0.0 {
                2.0 * s / theta
            } else {
                -(-2.0 * s * rho / theta).exp_m1() / rho
            };
            s * shape * (-(s - rho).powi(2) / (2.0 * theta)).exp() / (2.0 * PI * theta).sqrt()
        };
        let lo = (rho - 14.0 * sd).max(0.0);
        let hi = rho + 14.0 * sd;
        let breaks: Vec<f64> = [rho].into_iter().filter(|b| *b > lo && *b < hi).collect();
        integrate_split(|s| density(s) * kernel.eval(s * s), lo, hi, &breaks, 1e-14, 1e-300)
    };
    let node = (3.0 * theta).sqrt();
    integrate_split(
        |rho| 4.0 * PI * rho * rho * phi.radial(rho) * inner(rho),
        0.0,
        phi.cutoff(),
        &[node],
        1e-13,
        1e-300,
    )
}

/// `I_0(G_0, φ_0)` after the centre-of-mass change of variables:
/// `c ∫ 4πρ² M_{2θ̄}(ρ) ζ_0(ρ²) (ρ²/4 - 3θ̄/2) dρ`.
pub fn i0_centre_of_mass(kernel: &LimitKernel, phi: &EnergyEigenfunctionSpec) -> f64 {
    let theta = phi.theta_bar;
    let node = (6.0 * theta).sqrt();
    integrate_split(
        |rho| {
            let r2 = rho * rho;
            4.0 * PI * r2 * maxwellian_density(2.0 * theta, r2) * kernel.eval(r2) * (0.25 * r2 - 1.5 * theta)
        },
        0.0,
        14.0 * (2.0 * theta).sqrt(),
        &[node],
        1e-14,
        1e-300,
    ) * phi.c
}

/// First-order quantities behind `μ_λ ≈ -λ^γ I_0(G_0, φ_0) / E(φ_0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstOrder {
    pub kernel: LimitKernel,
    pub theta_bar: f64,
    pub phi: EnergyEigenfunctionSpec,
    pub i0: f64,
    pub energy: f64,
    /// `μ_λ / λ^γ` to first order.
    pub slope: f64,
}

impl FirstOrder {
    pub fn new(kernel: LimitKernel) -> Result<Self> {
        let theta_bar = kernel.theta_bar();
        let phi = EnergyEigenfunctionSpec::new(theta_bar)?;
        let i0 = i0_centre_of_mass(&kernel, &phi);
        let energy = phi.energy();
        Ok(Self {
            kernel,
            theta_bar,
            phi,
            i0,
            energy,
            slope: -i0 / energy,
        })
    }

    pub fn mu(&self, lambda: f64, gamma: f64) -> f64 {
        self.slope * lambda.powf(gamma)
    }
}

/// `-λ^γ I_0(G_0, φ_0) / E(φ_0)` with `G_0 = M_θ̄`.
pub fn predict_mu_first_order(expansion: &ExpansionParams, theta_bar: f64, lambda: f64) -> Result<f64> {
    let kernel = LimitKernel::from_expansion(expansion);
    let phi = EnergyEigenfunctionSpec::new(theta_bar)?;
    Ok(-lambda.powf(expansion.gamma) * i0_centre_of_mass(&kernel, &phi) / phi.energy())
}

/// First-order `μ_λ` for a run configuration, when the heat bath is active.
pub fn predicted_mu(config: &SimConfig) -> Option<f64> {
    if !config.thermostat || config.lambda == 0.0 || config.model.is_elastic() {
        return None;
    }
    let first = FirstOrder::new(LimitKernel::for_model(&config.model)).ok()?;
    Some(first.mu(config.lambda, config.bath_gamma()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyOptions {
    /// Length of the stationarity window in mean collision times.
    pub window_collision_times: f64,
    /// Windows allowed before giving up.
    pub max_windows: usize,
    /// Dissipation snapshots over the averaging window; 0 disables them.
    pub dissipation_snapshots: usize,
    pub dissipation_samples: usize,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        Self {
            window_collision_times: 20.0,
            max_windows: 60,
            dissipation_snapshots: 16,
            dissipation_samples: 200_000,
        }
    }
}

/// Time-averaged stationary state.
#[derive(Debug, Clone, Serialize)]
pub struct SteadyState {
    #[serde(skip)]
    pub ensemble: ParticleEnsemble,
    pub report: MomentReport,
    pub theta: Estimate,
    pub energy: Estimate,
    /// `6 λ^γ`, the mean heat-bath energy input per unit time.
    pub injection: f64,
    /// Simulated time at which the averaging window started.
    pub stationary_since: f64,
    pub window: f64,
    pub dt: f64,
}

/// Window length used for stationarity: at least the requested number of
/// collision times and a few relaxation times of the energy mode.
fn stationarity_window(config: &SimConfig, theta: f64, opts: &SteadyOptions) -> f64 {
    let collisions = opts.window_collision_times * mean_collision_time(theta);
    match predicted_mu(config) {
        Some(mu) => collisions.max(3.0 / mu.abs()),
        None => collisions,
    }
}

fn record_energy(sim: &mut Simulation, steps: u64, series: &mut Vec<(f64, f64, f64)>) -> Result<()> {
    for _ in 0..steps {
        sim.step()?;
        let e = sim.ensemble();
        series.push((sim.time(), e.energy(), e.temperature()));
    }
    Ok(())
}

/// Slope of `θ` over the window, from ten batch means.
fn stationarity_slope(series: &[(f64, f64, f64)]) -> (f64, f64) {
    let batches = 10;
    let len = series.len() / batches;
    let (mut t, mut y) = (Vec::new(), Vec::new());
    for b in 0..batches {
        let chunk = &series[b * len..(b + 1) * len];
        t.push(chunk.iter().map(|p| p.0).sum::<f64>() / len as f64);
        y.push(chunk.iter().map(|p| p.2).sum::<f64>() / len as f64);
    }
    let fit = stats::fit_line(&t, &y);
    (fit.slope, fit.slope_std_error)
}

/// Runs from `init` until `θ(t)` is stationary, then averages over one more window.
///
/// Stationarity means the slope of `θ` over the latest window, estimated from
/// batch means, is within two standard errors of zero.
pub fn steady_state(config: &SimConfig, init: &InitKind, opts: &SteadyOptions) -> Result<SteadyState> {
    let mut sim = Simulation::from_init(config.clone(), init)?;
    steady_state_from(&mut sim, opts)
}

pub fn steady_state_from(sim: &mut Simulation, opts: &SteadyOptions) -> Result<SteadyState> {
    let config = sim.config().clone();
    let window = stationarity_window(&config, sim.ensemble().temperature(), opts);
    let window_steps = config.steps_for(window).max(20);
    let mut series = Vec::new();
    record_energy(sim, window_steps, &mut series)?;
    let mut windows = 1;
    loop {
        let tail = &series[series.len() - window_steps as usize..];
        let (slope, se) = stationarity_slope(tail);
        if slope.abs() <= 2.0 * se {
            break;
        }
        if windows >= opts.max_windows * 2 {
            let theta = sim.ensemble().temperature();
            return Err(Error::Convergence(format!(
                "temperature not stationary after t = {:.4}: slope {slope:.3e} ± {se:.3e} over a window of {window:.4}, θ = {theta:.6}",
                sim.time()
            )));
        }
        record_energy(sim, window_steps / 2, &mut series)?;
        windows += 1;
    }

    let start = sim.time();
    let mut avg = Vec::with_capacity(window_steps as usize);
    let snapshots = opts.dissipation_snapshots;
    let mut d_values = Vec::new();
    let mut momentum = Vec3::zeros();
    let stride = if snapshots > 0 {
        (window_steps / snapshots as u64).max(1)
    } else {
        u64::MAX
    };
    for k in 1..=window_steps {
        sim.step()?;
        let e = sim.ensemble();
        avg.push((sim.time(), e.energy(), e.temperature()));
        momentum += e.momentum();
        if k % stride == 0 && d_values.len() < snapshots {
            let quad = QuadratureSpec::monte_carlo(
                opts.dissipation_samples,
                derive_seed(config.seed, Purpose::Sampling, sim.step_count(), 1),
            )?;
            d_values.push(dissipation(e, &config.model, config.lambda, &quad)?.value);
        }
    }
    let energies: Vec<f64> = avg.iter().map(|p| p.1).collect();
    let thetas: Vec<f64> = avg.iter().map(|p| p.2).collect();
    let (e_mean, e_se) = stats::batch_means(&energies, 10);
    let (t_mean, t_se) = stats::batch_means(&thetas, 10);
    let dissipation = (!d_values.is_empty()).then(|| {
        let (value, std_error) = stats::mean_and_std_error(&d_values);
        Estimate { value, std_error }
    });
    let p = momentum / window_steps as f64;
    let report = MomentReport {
        time: sim.time(),
        mass: 1.0,
        momentum: [p[0], p[1], p[2]],
        energy: e_mean,
        theta: t_mean,
        dissipation,
        mode_amplitudes: Vec::new(),
        log_tail_moment: None,
    };
    Ok(SteadyState {
        ensemble: sim.ensemble().clone(),
        report,
        theta: Estimate {
            value: t_mean,
            std_error: t_se,
        },
        energy: Estimate {
            value: e_mean,
            std_error: e_se,
        },
        injection: 6.0 * config.bath_strength(),
        stationary_since: start,
        window: window_steps as f64 * config.dt,
        dt: config.dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuOptions {
    /// Relative energy bump.
    pub delta: f64,
    pub replicas: usize,
    /// Fit window starts this many mean collision times after the bump.
    pub skip_collision_times: f64,
    /// Replica run length; derived from the predicted rate when absent.
    pub duration: Option<f64>,
    /// Stationary time separating the replicas' starting states; three
    /// predicted relaxation times (or the stationarity window) when absent.
    /// Zero starts every replica from the same state.
    pub start_spacing: Option<f64>,
    pub steady: SteadyOptions,
}

impl Default for MuOptions {
    fn default() -> Self {
        Self {
            delta: 0.1,
            replicas: 8,
            skip_collision_times: 2.0,
            duration: None,
            start_spacing: None,
            steady: SteadyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MuEstimate {
    pub lambda: f64,
    pub mu_measured: f64,
    pub mu_std_error: f64,
    pub mu_predicted: Option<f64>,
    pub theta_inf: f64,
    pub theta_bar: Option<f64>,
    pub gamma_used: f64,
    pub n_particles: usize,
    pub duration: f64,
    pub seed: u64,
    pub delta: f64,
    pub replicas: usize,
    /// Correction to the stationary energy fitted jointly with the decay.
    pub e_inf_offset: f64,
    pub fit: SpectralFit,
}

impl MuEstimate {
    pub const CSV_HEADER: &'static str =
        "lambda,mu_measured,mu_err,mu_predicted,theta_inf,theta_bar,gamma_used,n_particles,seed";

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.lambda,
            self.mu_measured,
            self.mu_std_error,
            opt(self.mu_predicted),
            self.theta_inf,
            opt(self.theta_bar),
            self.gamma_used,
            self.n_particles,
            self.seed
        )
    }
}

/// Averages `curves` pointwise, skipping the entry `leave_out`.
fn mean_curve(curves: &[Vec<f64>], leave_out: Option<usize>) -> Vec<f64> {
    let used: Vec<&Vec<f64>> = curves
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != leave_out)
        .map(|(_, c)| c)
        .collect();
    let k = used.len() as f64;
    (0..used[0].len())
        .map(|t| used.iter().map(|c| c[t]).sum::<f64>() / k)
        .collect()
}

/// The stationary ensemble followed by `count - 1` later states of a chain
/// continued from it, `spacing` apart.
fn replica_starts(config: &SimConfig, steady: &SteadyState, count: usize, spacing: f64) -> Result<Vec<ParticleEnsemble>> {
    if !(spacing >= 0.0 && spacing.is_finite()) {
        return Err(Error::input("start_spacing", format!("must be finite and non-negative, got {spacing}")));
    }
    let mut starts = Vec::with_capacity(count);
    starts.push(steady.ensemble.clone());
    let steps = config.steps_for(spacing);
    if steps == 0 {
        starts.resize(count, steady.ensemble.clone());
        return Ok(starts);
    }
    let mut c = config.clone();
    c.seed = derive_seed(config.seed, Purpose::Replica, u64::MAX, 0);
    let mut chain = Simulation::new(c, steady.ensemble.clone())?;
    while starts.len() < count {
        for _ in 0..steps {
            chain.step()?;
        }
        starts.push(chain.ensemble().clone());
    }
    Ok(starts)
}

/// Least-squares plateau `b` of `y ≈ A e^{μt} + b` on the given points.
///
/// For each trial rate the amplitude and plateau are linear, so only `μ` is
/// searched, by golden section on `ln|μ|` between 0.2 and 50 inverse spans.
fn fitted_plateau(times: &[f64], y: &[f64]) -> f64 {
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let ones = vec![1.0; y.len()];
    let solve = |log_rate: f64| {
        let rate = -log_rate.exp();
        let decay: Vec<f64> = times.iter().map(|t| (rate * (t - t0)).exp()).collect();
        stats::least_squares(&[decay, ones.clone()], y).unwrap_or((vec![0.0, 0.0], f64::INFINITY))
    };
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = ((0.2 / span).ln(), (50.0 / span).ln());
    for _ in 0..80 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if solve(c).1 < solve(d).1 {
            b = d;
        } else {
            a = c;
        }
    }
    solve(0.5 * (a + b)).0[1]
}

/// Measures `μ_λ` from the relaxation of a uniform energy bump.
///
/// Replica starting states are snapshots of one stationary chain spaced
/// `start_spacing` apart, so their fluctuations are nearly independent. Each
/// has its thermal velocities scaled by `√(1+δ)` and evolves with its own
/// seed. The replica-mean `E(t) - E_∞` is fitted, with `y²` weights on
/// `ln y`, from `skip_collision_times` after the bump until it first falls
/// below three times its noise level; the error bar is a
/// leave-one-replica-out jackknife. Because `E_∞` comes from a finite
/// stationary window, a residual plateau is first fitted over the whole run
/// and removed from every curve.
pub fn measure_mu(config: &SimConfig, init: &InitKind, opts: &MuOptions) -> Result<MuEstimate> {
    let steady = steady_state(config, init, &opts.steady)?;
    measure_mu_from(config, &steady, opts)
}

pub fn measure_mu_from(config: &SimConfig, steady: &SteadyState, opts: &MuOptions) -> Result<MuEstimate> {
    if !(opts.delta > 0.0 && opts.delta <= 0.2) {
        return Err(Error::input("delta", format!("must lie in (0, 0.2], got {}", opts.delta)));
    }
    if opts.replicas < 2 {
        return Err(Error::input("replicas", "needs at least two replicas"));
    }
    let theta_inf = steady.theta.value;
    let tau = mean_collision_time(theta_inf);
    let predicted = predicted_mu(config);
    let duration = opts.duration.unwrap_or_else(|| match predicted {
        Some(mu) => (6.0 / mu.abs()).max(40.0 * tau),
        None => 40.0 * tau,
    });
    let steps = config.steps_for(duration);
    let e_inf = steady.energy.value;
    let spacing = opts
        .start_spacing
        .unwrap_or_else(|| predicted.map_or(steady.window, |mu| 3.0 / mu.abs()));
    let starts = replica_starts(config, steady, opts.replicas, spacing)?;

    let curves: Vec<Vec<f64>> = (0..opts.replicas)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut c = config.clone();
            c.seed = derive_seed(config.seed, Purpose::Replica, r as u64, 0);
            let mut ensemble = starts[r].clone();
            ensemble.scale_thermal_velocities((1.0 + opts.delta).sqrt());
            let mut sim = Simulation::new(c, ensemble)?;
            let mut y = Vec::with_capacity(steps as usize + 1);
            y.push(sim.ensemble().energy() - e_inf);
            for _ in 0..steps {
                sim.step()?;
                y.push(sim.ensemble().energy() - e_inf);
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * config.dt).collect();
    let t_start = opts.skip_collision_times * tau;
    let first = times.iter().position(|t| *t >= t_start).unwrap_or(times.len());
    if times.len() < first + 5 {
        return Err(Error::input("duration", format!("{duration} leaves fewer than 5 points after the skipped transient")));
    }
    let raw = mean_curve(&curves, None);
    let offset = fitted_plateau(&times[first..], &raw[first..]);
    let curves: Vec<Vec<f64>> = curves.into_iter().map(|c| c.into_iter().map(|y| y - offset).collect()).collect();
    let mean = mean_curve(&curves, None);

    // Noise of the replica mean: typical replica spread plus the error of E_∞.
    let k = opts.replicas as f64;
    let mut spread: Vec<f64> = (0..times.len())
        .map(|t| {
            let m = mean[t];
            (curves.iter().map(|c| (c[t] - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
        })
        .collect();
    spread.sort_by(f64::total_cmp);
    let floor = spread[spread.len() / 2].hypot(steady.energy.std_error);

    let mut last = first;
    while last < times.len() && mean[last] > 3.0 * floor {
        last += 1;
    }
    if last < first + 5 {
        return Err(Error::Quality(format!(
            "energy bump fell below 3x its noise level ({floor:.3e}) before {} points; increase delta, N or replicas",
            5
        )));
    }
    let window = (times[first], times[last - 1]);
    let fit_curve = |y: &[f64]| -> Result<SpectralFit> {
        let pts: Vec<(f64, f64)> = (first..last).filter(|&t| y[t] > 0.0).map(|t| (times[t], y[t])).collect();
        fit_exponential_rate_weighted(&pts, window)
    };
    let fit = fit_curve(&mean)?;
    if fit.r_squared < 0.8 {
        return Err(Error::Quality(format!(
            "exponential fit has r² = {:.3} < 0.8 over t in [{:.4}, {:.4}]; run longer or use more particles",
            fit.r_squared, window.0, window.1
        )));
    }
    let jack: Vec<f64> = (0..opts.replicas)
        .map(|r| fit_curve(&mean_curve(&curves, Some(r))).map(|f| f.rate))
        .collect::<Result<_>>()?;
    let jmean = jack.iter().sum::<f64>() / k;
    let mu_std_error = ((k - 1.0) / k * jack.iter().map(|x| (x - jmean).powi(2)).sum::<f64>()).sqrt();

    let theta_bar = if predicted.is_some() {
        Some(LimitKernel::for_model(&config.model).theta_bar())
    } else {
        None
    };
    Ok(MuEstimate {
        lambda: config.lambda,
        mu_measured: fit.rate,
        mu_std_error,
        mu_predicted: predicted,
        theta_inf,
        theta_bar,
        gamma_used: config.bath_gamma(),
        n_particles: config.n_particles,
        duration,
        seed: config.seed,
        delta: opts.delta,
        replicas: opts.replicas,
        e_inf_offset: offset,
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingFit {
    pub gamma_hat: f64,
    pub gamma_std_error: f64,
    pub c_hat: f64,
    pub r_squared: f64,
}

/// Regression of `ln|μ|` on `ln λ`: `μ ≈ -C λ^γ`.
pub fn scaling_fit(estimates: &[MuEstimate]) -> Result<ScalingFit> {
    let points: Vec<(f64, f64)> = estimates.iter().map(|e| (e.lambda, e.mu_measured)).collect();
    scaling_fit_points(&points)
}

/// [`scaling_fit`] on raw `(λ, μ)` pairs.
pub fn scaling_fit_points(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if let Some((l, mu)) = points.iter().find(|(_, mu)| !(*mu < 0.0)) {
        return Err(Error::input("estimates", format!("mu = {mu} at lambda = {l} is not negative")));
    }
    if let Some((l, _)) = points.iter().find(|(l, _)| !(*l > 0.0)) {
        return Err(Error::input("estimates", format!("lambda = {l} must be positive")));
    }
    let mut lambdas: Vec<f64> = points.iter().map(|p| p.0).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    if lambdas.len() < 4 {
        return Err(Error::input(
            "estimates",
            format!("needs at least 4 distinct lambda values, got {}", lambdas.len()),
        ));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| (-p.1).ln()).collect();
    let fit = stats::fit_line(&x, &y);
    Ok(ScalingFit {
        gamma_hat: fit.slope,
        gamma_std_error: fit.slope_std_error,
        c_hat: fit.intercept.exp(),
        r_squared: fit.r_squared,
    })
}

/// Fit of `T(t) = T_0 (1 + t/t_0)^{-p}` to a free-cooling run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HaffFit {
    pub p: f64,
    pub t0: f64,
    pub initial_temperature: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub strictly_decreasing: bool,
    pub series: Vec<(f64, f64)>,
}

/// Least squares in `ln T` with `t_0` profiled on a log grid and refined by golden section.
pub fn fit_haff(series: &[(f64, f64)]) -> Result<HaffFit> {
    if series.len() < 5 {
        return Err(Error::input("series", "needs at least 5 points"));
    }
    if series.iter().any(|(_, y)| !(*y > 0.0)) {
        return Err(Error::input("series", "temperatures must be positive"));
    }
    let t: Vec<f64> = series.iter().map(|p| p.0).collect();
    let y: Vec<f64> = series.iter().map(|p| p.1.ln()).collect();
    let span = t[t.len() - 1] - t[0];
    if !(span > 0.0) {
        return Err(Error::input("series", "needs a positive time span"));
    }
    let profile = |log_t0: f64| {
        let t0 = log_t0.exp();
        let x: Vec<f64> = t.iter().map(|ti| -(1.0 + (ti - t[0]) / t0).ln()).collect();
        let fit = stats::fit_line(&x, &y);
        let sse: f64 = x
            .iter()
            .zip(&y)
            .map(|(xi, yi)| (yi - fit.intercept - fit.slope * xi).powi(2))
            .sum();
        (sse, fit)
    };
    let (lo, hi) = ((span * 1e-4).ln(), (span * 1e4).ln());
    let grid = 200;
    let mut best = (f64::INFINITY, lo);
    for k in 0..=grid {
        let u = lo + (hi - lo) * k as f64 / grid as f64;
        let sse = profile(u).0;
        if sse < best.0 {
            best = (sse, u);
        }
    }
    let step = (hi - lo) / grid as f64;
    let (mut a, mut b) = (best.1 - step, best.1 + step);
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - golden * (b - a);
        let d = a + golden * (b - a);
        if profile(c).0 < profile(d).0 {
            b = d;
        } else {
            a = c;
        }
    }
    let u = 0.5 * (a + b);
    let (_, fit) = profile(u);
    Ok(HaffFit {
        p: fit.slope,
        t0: u.exp(),
        initial_temperature: fit.intercept.exp(),
        r_squared: fit.r_squared,
        window: (t[0], t[t.len() - 1]),
        strictly_decreasing: series.windows(2).all(|w| w[1].1 < w[0].1),
        series: series.to_vec(),
    })
}

/// Free cooling from `init` until `config.t_end`, sampling `T` every step.
pub fn haff_cooling_probe(config: &SimConfig, init: &InitKind) -> Result<HaffFit> {
    if config.thermostat {
        return Err(Error::config("thermostat", "free cooling needs the thermostat off"));
    }
    let mut sim = Simulation::from_init(config.clone(), init)?;
    let steps = config.steps_for(config.t_end);
    let mut series = vec![(0.0, sim.ensemble().temperature())];
    for _ in 0..steps {
        sim.step()?;
        series.push((sim.time(), sim.ensemble().temperature()));
    }
    fit_haff(&series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speed_moments() {
        // E|u|² = 6θ, E|u|⁴ = 60θ² for u ~ N(0, 2θ I).
        assert!((relative_speed_moment(0.7, 2.0) - 4.2).abs() < 1e-12);
        assert!((relative_speed_moment(0.7, 4.0) - 60.0 * 0.49).abs() < 1e-11);
        assert!((relative_speed_moment(1.0, 1.0) - (16.0 / PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn plateau_of_a_shifted_decay() {
        let t: Vec<f64> = (0..400).map(|k| 0.01 * k as f64).collect();
        for (amp, rate, b) in [(0.3, -2.0, 0.01), (0.05, -0.7, -0.004), (1.0, -9.0, 0.0)] {
            let y: Vec<f64> = t.iter().map(|t| amp * (rate * t).exp() + b).collect();
            assert!((fitted_plateau(&t, &y) - b).abs() < 1e-6, "{amp} {rate} {b}");
        }
    }

    #[test]
    fn theta_bar_values() {
        let v = RestitutionModel::viscoelastic(1.0).unwrap().expansion_params();
        assert!((predict_theta_bar(&v) - 0.218_929_538_165_980_27).abs() < 1e-10);
        let v01 = RestitutionModel::viscoelastic(0.1).unwrap().expansion_params();
        assert!((predict_theta_bar(&v01) - 0.923_218_207_418_282_19).abs() < 1e-10);
        let capped = ExpansionParams::new(1.0, 1.0, 2.0).unwrap();
        assert!((predict_theta_bar(&capped) - 0.199_471_140_200_716_37).abs() < 1e-10);
        assert!((LimitKernel::constant_family().theta_bar() - 0.223_675_057_234_912_37).abs() < 1e-10);
        // Doubling a lowers θ̄.
        let doubled = ExpansionParams::new(2.0, 0.2, 0.4).unwrap();
        assert!(predict_theta_bar(&doubled) < predict_theta_bar(&v));
    }

    #[test]
    fn eigenfunction_normalisation() {
        let phi = EnergyEigenfunctionSpec::new(0.3).unwrap();
        assert!(phi.mass().abs() < 1e-8);
        assert!((phi.weighted_norm() - 1.0).abs() < 1e-8);
        let energy = phi.energy();
        assert!((energy - 6.0 * 0.09 * phi.c).abs() < 1e-8 * energy);
        assert!(EnergyEigenfunctionSpec::new(0.0).is_err());
    }

    #[test]
    fn i0_routes_agree_with_closed_form() {
        for kernel in [
            LimitKernel::constant_family(),
            LimitKernel::from_expansion(&ExpansionParams::new(1.0, 0.2, 0.4).unwrap()),
            LimitKernel::from_expansion(&ExpansionParams::new(0.1, 0.2, 0.4).unwrap()),
        ] {
            let first = FirstOrder::new(kernel).unwrap();
            let nested = i0_nested(&kernel, &first.phi);
            assert!((nested - first.i0).abs() <= 1e-8 * first.i0, "{nested} {}", first.i0);
            let closed = -kernel.power / first.theta_bar;
            assert!((first.slope - closed).abs() <= 1e-8 * closed.abs());
        }
    }

    #[test]
    fn prediction_is_negative_and_scales() {
        let ex = ExpansionParams::new(1.0, 0.2, 0.4).unwrap();
        let tb = predict_theta_bar(&ex);
        let a = predict_mu_first_order(&ex, tb, 0.1).unwrap();
        let b = predict_mu_first_order(&ex, tb, 0.2).unwrap();
        assert!(a < 0.0);
        assert!((b / a - 2f64.powf(0.2)).abs() < 1e-12);
        assert!((a / 0.1f64.powf(0.2) + 14.6166).abs() < 1e-3);
        for (a, g, t) in [(0.5, 0.7, 1.3), (3.0, 1.0, 0.1)] {
            let ex = ExpansionParams::new(a, g, 2.0 * g).unwrap();
            assert!(predict_mu_first_order(&ex, t, 0.05).unwrap() < 0.0);
        }
    }

    #[test]
    fn scaling_fit_exact_power_law() {
        let pts: Vec<(f64, f64)> = [0.02, 0.05, 0.1, 0.2]
            .iter()
            .map(|&l: &f64| (l, -3.0 * l.powf(0.2)))
            .collect();
        let f = scaling_fit_points(&pts).unwrap();
        assert!((f.gamma_hat - 0.2).abs() < 1e-12);
        assert!((f.c_hat - 3.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(scaling_fit_points(&pts[..3]).is_err());
        let mut bad = pts.clone();
        bad[1].1 = 0.1;
        assert!(scaling_fit_points(&bad).is_err());
    }

    #[test]
    fn haff_fit_recovers_closure_ode() {
        // dT/dt = -c T^{3/2} integrated by RK4; the solution is T0 (1 + t/t0)^{-2}.
        let c = 0.8;
        let rhs = |t: f64| -c * t.powf(1.5);
        let (mut temp, h) = (1.0f64, 1e-3);
        let mut series = vec![(0.0, temp)];
        for k in 1..=20_000 {
            let k1 = rhs(temp);
            let k2 = rhs(temp + 0.5 * h * k1);
            let k3 = rhs(temp + 0.5 * h * k2);
            let k4 = rhs(temp + h * k3);
            temp += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if k % 100 == 0 {
                series.push((k as f64 * h, temp));
            }
        }
        let f = fit_haff(&series).unwrap();
        assert!((f.p - 2.0).abs() < 1e-3, "{}", f.p);
        assert!((f.t0 - 2.0 / c).abs() < 1e-2, "{}", f.t0);
        assert!(f.strictly_decreasing);
    }

    #[test]
    fn haff_constant_series() {
        let s: Vec<(f64, f64)> = (0..20).map(|k| (k as f64, 0.5)).collect();
        let f = fit_haff(&s).unwrap();
        assert!(f.p.abs() < 1e-12);
        assert!(!f.strictly_decreasing);
    }
}
