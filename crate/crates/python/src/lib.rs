//! Python bindings for granulite.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use granulite::collision_oracle::{self, QuadratureSpec};
use granulite::dsmc::{init_ensemble, InitKind, ParticleEnsemble, SimConfig, Simulation as CoreSimulation};
use granulite::kinematics::{self, CollisionOutcome, CollisionPair, Vec3};
use granulite::observables;
use granulite::restitution::RestitutionModel as CoreModel;
use granulite::spectral_probe::{self, LimitKernel};
use granulite::Error;

type Triple = [f64; 3];

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidInput { .. } | Error::Config { .. } | Error::DegeneratePair => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn vec3(x: Triple) -> Vec3 {
    Vec3::new(x[0], x[1], x[2])
}

fn triple(v: &Vec3) -> Triple {
    [v[0], v[1], v[2]]
}

/// Restitution law `e(r)`.
#[pyclass(name = "RestitutionModel", module = "granulite", frozen, skip_from_py_object)]
#[derive(Clone)]
struct RestitutionModel {
    inner: CoreModel,
}

#[pymethods]
impl RestitutionModel {
    #[staticmethod]
    fn constant(e0: f64) -> PyResult<Self> {
        CoreModel::constant(e0).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (a = 1.0))]
    fn viscoelastic(a: f64) -> PyResult<Self> {
        CoreModel::viscoelastic(a).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn capped_power_law(a: f64, gamma: f64, e_min: f64) -> PyResult<Self> {
        CoreModel::capped_power_law(a, gamma, e_min)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn eval(&self, r: f64) -> PyResult<f64> {
        self.inner.eval(r).map_err(to_py)
    }

    /// `e(λ r)`.
    fn eval_scaled(&self, lam: f64, r: f64) -> PyResult<f64> {
        self.inner.eval_scaled(lam, r).map_err(to_py)
    }

    fn is_elastic(&self) -> bool {
        self.inner.is_elastic()
    }

    /// `(a, gamma, gamma_bar)` of the small-speed expansion.
    fn expansion_params(&self) -> (f64, f64, f64) {
        let p = self.inner.expansion_params();
        (p.a, p.gamma, p.gamma_bar)
    }

    /// `(non_increasing, r_e_increasing, expansion_holds)` on `r_grid`.
    fn check_assumptions(&self, r_grid: Vec<f64>) -> PyResult<(bool, bool, bool)> {
        let r = self.inner.check_assumptions(&r_grid).map_err(to_py)?;
        Ok((r.non_increasing, r.r_e_increasing, r.expansion.passed()))
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

fn outcome(o: CollisionOutcome) -> (Triple, Triple, f64, f64) {
    (triple(&o.v_prime), triple(&o.v_star_prime), o.e_used, o.delta_energy)
}

/// Collision in the σ-parametrization; returns `(v', v*', e, ΔE)`.
#[pyfunction]
fn post_collision_sigma(
    v: Triple,
    v_star: Triple,
    sigma: Triple,
    model: &RestitutionModel,
    lam: f64,
) -> PyResult<(Triple, Triple, f64, f64)> {
    let pair = CollisionPair::new(vec3(v), vec3(v_star)).map_err(to_py)?;
    kinematics::post_collision_sigma(&pair, &vec3(sigma), &model.inner, lam)
        .map(outcome)
        .map_err(to_py)
}

/// Collision in the impact-direction parametrization; returns `(v', v*', e, ΔE)`.
#[pyfunction]
fn post_collision_n(
    v: Triple,
    v_star: Triple,
    n_hat: Triple,
    model: &RestitutionModel,
    lam: f64,
) -> PyResult<(Triple, Triple, f64, f64)> {
    let pair = CollisionPair::new(vec3(v), vec3(v_star)).map_err(to_py)?;
    kinematics::post_collision_n(&pair, &vec3(n_hat), &model.inner, lam)
        .map(outcome)
        .map_err(to_py)
}

#[pyfunction]
fn sigma_from_n(u_hat: Triple, n_hat: Triple) -> PyResult<Triple> {
    kinematics::sigma_from_n(&vec3(u_hat), &vec3(n_hat))
        .map(|s| triple(&s))
        .map_err(to_py)
}

#[pyfunction]
fn energy_loss(v: Triple, v_star: Triple, sigma: Triple, e_used: f64) -> PyResult<f64> {
    let pair = CollisionPair::new(vec3(v), vec3(v_star)).map_err(to_py)?;
    kinematics::energy_loss(&pair, &vec3(sigma), e_used).map_err(to_py)
}

#[pyfunction]
fn psi_e(model: &RestitutionModel, lam: f64, r: f64) -> PyResult<f64> {
    collision_oracle::psi_e(&model.inner, lam, r).map_err(to_py)
}

#[pyfunction]
fn zeta(model: &RestitutionModel, lam: f64, r_squared: f64) -> PyResult<f64> {
    collision_oracle::zeta(&model.inner, lam, r_squared).map_err(to_py)
}

/// Small-λ limit kernel at `r_squared`; a constant law counts as the `1 - λ` family.
#[pyfunction]
fn zeta_0(model: &RestitutionModel, r_squared: f64) -> PyResult<f64> {
    if !(r_squared >= 0.0) {
        return Err(PyValueError::new_err("r_squared must be non-negative"));
    }
    Ok(LimitKernel::for_model(&model.inner).eval(r_squared))
}

#[pyfunction]
fn predict_theta_bar(model: &RestitutionModel) -> f64 {
    LimitKernel::for_model(&model.inner).theta_bar()
}

/// First-order relaxation rate `μ_λ` with the thermostat on.
#[pyfunction]
fn predict_mu_first_order(model: &RestitutionModel, lam: f64) -> PyResult<f64> {
    let config = SimConfig {
        lambda: lam,
        model: model.inner,
        n_particles: 2,
        cells: [1, 1, 1],
        dt: 1.0,
        thermostat: true,
        momentum_projection: true,
        seed: 0,
        t_end: 0.0,
    };
    config.validate().map_err(to_py)?;
    spectral_probe::predicted_mu(&config).ok_or_else(|| PyValueError::new_err("no prediction for an elastic law or lambda = 0"))
}

/// Particle ensemble on the unit torus with total mass one.
#[pyclass(name = "Ensemble", module = "granulite", skip_from_py_object)]
#[derive(Clone)]
struct Ensemble {
    inner: ParticleEnsemble,
}

#[pymethods]
impl Ensemble {
    #[staticmethod]
    fn from_velocities(velocities: Vec<Triple>) -> PyResult<Self> {
        ParticleEnsemble::from_velocities(velocities.into_iter().map(vec3).collect())
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// `n` Maxwellian particles at temperature `theta` with zero mean velocity.
    #[staticmethod]
    #[pyo3(signature = (n, theta, seed = 0))]
    fn maxwellian(n: usize, theta: f64, seed: u64) -> PyResult<Self> {
        init_ensemble(&InitKind::Maxwellian { theta }, n, seed)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    fn momentum(&self) -> Triple {
        triple(&self.inner.momentum())
    }

    fn velocities(&self) -> Vec<Triple> {
        self.inner.velocities.iter().map(triple).collect()
    }

    fn positions(&self) -> Vec<Triple> {
        self.inner.positions.iter().map(triple).collect()
    }
}

/// Spatially homogeneous or gridded particle simulation from a Maxwellian start.
#[pyclass(name = "Simulation", module = "granulite")]
struct Simulation {
    inner: CoreSimulation,
}

#[pymethods]
impl Simulation {
    #[new]
    #[pyo3(signature = (model, lam, n_particles, theta = 1.0, cells = [1, 1, 1], dt = None, thermostat = true, momentum_projection = true, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &RestitutionModel,
        lam: f64,
        n_particles: usize,
        theta: f64,
        cells: [usize; 3],
        dt: Option<f64>,
        thermostat: bool,
        momentum_projection: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let init = InitKind::Maxwellian { theta };
        let config = SimConfig {
            lambda: lam,
            model: model.inner,
            n_particles,
            cells,
            dt: dt.unwrap_or_else(|| SimConfig::default_dt(&init)),
            thermostat,
            momentum_projection,
            seed,
            t_end: 0.0,
        };
        CoreSimulation::from_init(config, &init)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Advances `steps` time steps, releasing the interpreter meanwhile.
    #[pyo3(signature = (steps = 1))]
    fn advance(&mut self, py: Python<'_>, steps: u64) -> PyResult<()> {
        let sim = &mut self.inner;
        py.detach(|| sim.advance(steps)).map_err(to_py)
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.config().dt
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step_count()
    }

    fn ensemble(&self) -> Ensemble {
        Ensemble {
            inner: self.inner.ensemble().clone(),
        }
    }

    fn energy(&self) -> f64 {
        self.inner.ensemble().energy()
    }

    fn temperature(&self) -> f64 {
        self.inner.ensemble().temperature()
    }
}

/// Monte Carlo estimate of the energy dissipation rate; returns `(value, std_error)`.
#[pyfunction]
#[pyo3(signature = (ensemble, model, lam, n_samples = 1_000_000, seed = 0))]
fn dissipation(ensemble: &Ensemble, model: &RestitutionModel, lam: f64, n_samples: usize, seed: u64) -> PyResult<(f64, f64)> {
    let quad = QuadratureSpec::monte_carlo(n_samples, seed).map_err(to_py)?;
    let d = collision_oracle::dissipation(&ensemble.inner, &model.inner, lam, &quad).map_err(to_py)?;
    Ok((d.value, d.std_error))
}

#[pyfunction]
fn maxwellian_distance(ensemble: &Ensemble) -> PyResult<f64> {
    observables::maxwellian_distance(&ensemble.inner).map_err(to_py)
}

/// Log-linear fit of `(t, y)` on `window`; returns `(rate, std_error, r_squared)`.
#[pyfunction]
fn fit_exponential_rate(series: Vec<(f64, f64)>, window: (f64, f64)) -> PyResult<(f64, f64, f64)> {
    let f = observables::fit_exponential_rate(&series, window).map_err(to_py)?;
    Ok((f.rate, f.rate_std_error, f.r_squared))
}

#[pymodule]
#[pyo3(name = "granulite")]
fn granulite_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RestitutionModel>()?;
    m.add_class::<Ensemble>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(post_collision_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(post_collision_n, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_from_n, m)?)?;
    m.add_function(wrap_pyfunction!(energy_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psi_e, m)?)?;
    m.add_function(wrap_pyfunction!(zeta, m)?)?;
    m.add_function(wrap_pyfunction!(zeta_0, m)?)?;
    m.add_function(wrap_pyfunction!(predict_theta_bar, m)?)?;
    m.add_function(wrap_pyfunction!(predict_mu_first_order, m)?)?;
    m.add_function(wrap_pyfunction!(dissipation, m)?)?;
    m.add_function(wrap_pyfunction!(maxwellian_distance, m)?)?;
    m.add_function(wrap_pyfunction!(fit_exponential_rate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
