//! Quadrature and Monte-Carlo evaluation of the weak collision operator, the
//! loss operator and the dissipation functionals `ψ_e`, `ζ_λ`, `ζ_0`, `I`.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsmc::{uniform_sphere, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::kinematics::{sigma_collision, Vec3};
use crate::quadrature;
use crate::restitution::{check_lambda, ExpansionParams, RestitutionModel};
use crate::rng::{self, Purpose};

/// Prefactor of the small-λ limit `ζ_0(r²) = κ a/(4+γ) r^{3+γ}`.
pub const KAPPA: f64 = 8.0 * PI;

/// Samples drawn from one random stream.
const SHARD: usize = 1 << 16;

/// Particle groups used by the dissipation jackknife.
const JACKKNIFE_GROUPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadMethod {
    MonteCarlo,
    /// Deterministic rule, used only for the one-dimensional `ψ_e` integral.
    Gauss1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub method: QuadMethod,
}

impl QuadratureSpec {
    pub fn monte_carlo(n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::input("n_samples", "must be at least 1"));
        }
        Ok(Self {
            n_samples,
            seed,
            method: QuadMethod::MonteCarlo,
        })
    }
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            n_samples: 1_000_000,
            seed: 0,
            method: QuadMethod::MonteCarlo,
        }
    }
}

/// A Monte-Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Estimate of `D(f) = ½ ∫∫ f f_* ψ_{e_λ}(|u|²)`, the energy lost per unit time.
pub type DissipationEstimate = Estimate;

#[derive(Default, Clone, Copy)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(self, o: Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            sum: self.sum + o.sum,
            sum_sq: self.sum_sq + o.sum_sq,
        }
    }

    fn estimate(&self) -> Estimate {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            value: mean,
            std_error: (var / n).sqrt(),
        }
    }
}

/// Runs `per_sample` over `n` draws split into fixed shards with their own streams.
fn sharded<F>(n: usize, seed: u64, tag: u64, per_sample: F) -> Moments
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
{
    let shards = n.div_ceil(SHARD);
    let parts: Vec<Moments> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng::stream(seed, Purpose::Sampling, s as u64, tag);
            let len = SHARD.min(n - s * SHARD);
            let mut m = Moments::default();
            for _ in 0..len {
                m.push(per_sample(&mut rng));
            }
            m
        })
        .collect();
    parts.into_iter().fold(Moments::default(), Moments::merge)
}

fn require_particles(e: &ParticleEnsemble, what: &'static str) -> Result<()> {
    if e.is_empty() {
        Err(Error::input(what, "ensemble is empty"))
    } else {
        Ok(())
    }
}

/// Monte-Carlo estimate of `∫ Q_{e_λ}(g, f) ψ dv` in weak form.
///
/// Each sample draws `v_*` from `g`, `v` from `f` and `σ` uniform on the
/// sphere, and scores `4π |v - v_*| [ψ(v') - ψ(v)]`.
pub fn weak_q(
    g: &ParticleEnsemble,
    f: &ParticleEnsemble,
    psi: &(dyn Fn(&Vec3) -> f64 + Sync),
    model: &RestitutionModel,
    lambda: f64,
    quad: &QuadratureSpec,
) -> Result<Estimate> {
    require_particles(g, "g")?;
    require_particles(f, "f")?;
    check_lambda(lambda)?;
    let m = sharded(quad.n_samples, quad.seed, 1, |rng| {
        let v_star = g.velocities[rng.random_range(0..g.len())];
        let v = f.velocities[rng.random_range(0..f.len())];
        let sigma = uniform_sphere(rng);
        let u = v - v_star;
        let speed = u.norm();
        if speed == 0.0 {
            return 0.0;
        }
        let out = sigma_collision(v, v_star, u, speed, &sigma, model, lambda);
        4.0 * PI * speed * (psi(&out.v_prime) - psi(&v))
    });
    Ok(m.estimate())
}

/// `L(g)(v) = 4π (|·| ∗ g)(v)`, summed exactly over the ensemble.
pub fn loss_operator(g: &ParticleEnsemble, v: &Vec3) -> Result<f64> {
    require_particles(g, "g")?;
    let total: f64 = g.velocities.iter().map(|w| (v - w).norm()).sum();
    Ok(4.0 * PI * total * g.particle_weight())
}

/// Bracket `ν_0 ⟨v⟩ ≤ L(g)(v) ≤ ν_1 ⟨v⟩` fitted over probe speeds along `e_x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyBounds {
    pub nu0: f64,
    pub nu1: f64,
    /// `(|v|, L(g)(v))` at each probe.
    pub samples: Vec<(f64, f64)>,
}

pub fn collision_frequency_bounds(g: &ParticleEnsemble, speeds: &[f64]) -> Result<FrequencyBounds> {
    if speeds.is_empty() {
        return Err(Error::input("speeds", "needs at least one probe speed"));
    }
    let mut samples = Vec::with_capacity(speeds.len());
    let (mut nu0, mut nu1) = (f64::INFINITY, 0.0f64);
    for &s in speeds {
        let value = loss_operator(g, &Vec3::new(s, 0.0, 0.0))?;
        let ratio = value / (1.0 + s * s).sqrt();
        nu0 = nu0.min(ratio);
        nu1 = nu1.max(ratio);
        samples.push((s, value));
    }
    Ok(FrequencyBounds { nu0, nu1, samples })
}

/// `ψ_{e_λ}(r) = 4π r^{3/2} ∫_0^1 (1 - e_λ²(√r z)) z³ dz` by adaptive quadrature.
pub fn psi_e(model: &RestitutionModel, lambda: f64, r: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::input("r", format!("must be finite and non-negative, got {r}")));
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    let x = r.sqrt();
    let integrand = |z: f64| {
        let e = model.eval_unchecked(lambda * x * z);
        (1.0 - e * e) * z * z * z
    };
    let integral = quadrature::integrate(integrand, 0.0, 1.0, 1e-10, 1e-300);
    Ok(4.0 * PI * r * x * integral.value)
}

/// `ζ_λ(r²) = ψ_e(λ² r²) / λ^{3+γ}` with `γ` the bath exponent of the law.
pub fn zeta(model: &RestitutionModel, lambda: f64, r_squared: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::input("lambda", format!("must be positive, got {lambda}")));
    }
    check_lambda(lambda)?;
    let gamma = model.bath_exponent();
    Ok(psi_e(model, 1.0, lambda * lambda * r_squared)? / lambda.powf(3.0 + gamma))
}

/// `ζ_0(r²) = κ a/(4+γ) r^{3+γ}`.
pub fn zeta_0(expansion: &ExpansionParams, r_squared: f64) -> Result<f64> {
    if !(r_squared >= 0.0 && r_squared.is_finite()) {
        return Err(Error::input("r_squared", format!("must be finite and non-negative, got {r_squared}")));
    }
    let g = expansion.gamma;
    Ok(KAPPA * expansion.a / (4.0 + g) * r_squared.powf(0.5 * (3.0 + g)))
}

/// Worst deviation between `ζ_λ` and `ζ_0` on a grid of `r²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZetaConvergenceRow {
    pub lambda: f64,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

pub fn zeta_convergence(
    model: &RestitutionModel,
    lambdas: &[f64],
    r_squared: &[f64],
) -> Result<Vec<ZetaConvergenceRow>> {
    let expansion = model.expansion_params();
    lambdas
        .iter()
        .map(|&lambda| {
            let mut row = ZetaConvergenceRow {
                lambda,
                max_abs_error: 0.0,
                max_rel_error: 0.0,
            };
            for &r2 in r_squared {
                let limit = zeta_0(&expansion, r2)?;
                let err = (zeta(model, lambda, r2)? - limit).abs();
                row.max_abs_error = row.max_abs_error.max(err);
                if limit > 0.0 {
                    row.max_rel_error = row.max_rel_error.max(err / limit);
                }
            }
            Ok(row)
        })
        .collect()
}

/// `½ ψ_{e_λ}(x²)` for every `x` in `speeds`.
///
/// Uses `ψ_{e_λ}(x²) = (4π/x) ∫_0^x (1 - e_λ²(s)) s³ ds` and accumulates the
/// integral along the sorted speeds, so each sample costs one short
/// three-point rule instead of a full adaptive quadrature.
fn half_psi_values(model: &RestitutionModel, lambda: f64, speeds: &[f64]) -> Vec<f64> {
    if let RestitutionModel::Constant { e0 } = *model {
        let c = 0.5 * PI * (1.0 - e0 * e0);
        return speeds.iter().map(|x| c * x * x * x).collect();
    }
    let h = |s: f64| {
        let e = model.eval_unchecked(lambda * s);
        (1.0 - e * e) * s * s * s
    };
    let mut order: Vec<usize> = (0..speeds.len()).collect();
    order.par_sort_unstable_by(|&i, &j| speeds[i].total_cmp(&speeds[j]).then(i.cmp(&j)));
    let node = (0.6f64).sqrt();
    let mut out = vec![0.0; speeds.len()];
    let (mut prev, mut cumulative) = (0.0f64, 0.0f64);
    for &k in &order {
        let x = speeds[k];
        let width = x - prev;
        if width > 0.0 {
            cumulative += if width <= 1e-3 * x {
                let (c, half) = (0.5 * (x + prev), 0.5 * width);
                half * (8.0 * h(c) + 5.0 * (h(c - half * node) + h(c + half * node))) / 9.0
            } else {
                quadrature::integrate(h, prev, x, 1e-13, 1e-300).value
            };
            prev = x;
        }
        out[k] = if x > 0.0 { 2.0 * PI * cumulative / x } else { 0.0 };
    }
    out
}

/// U-statistic estimate of `D(f)` with a jackknife error over particle groups.
///
/// All unordered pairs are used when there are at most `quad.n_samples` of
/// them; otherwise `n_samples` distinct-index pairs are drawn with replacement.
pub fn dissipation(
    f: &ParticleEnsemble,
    model: &RestitutionModel,
    lambda: f64,
    quad: &QuadratureSpec,
) -> Result<DissipationEstimate> {
    check_lambda(lambda)?;
    let n = f.len();
    if n < 2 {
        return Err(Error::input("f", "dissipation needs at least two particles"));
    }
    let v = &f.velocities;
    let total_pairs = (n as u128) * (n as u128 - 1) / 2;
    let pairs: Vec<(u32, u32)> = if total_pairs <= quad.n_samples as u128 {
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i as u32, j as u32)))
            .collect()
    } else {
        let shards = quad.n_samples.div_ceil(SHARD);
        (0..shards)
            .into_par_iter()
            .flat_map_iter(|s| {
                let mut rng = rng::stream(quad.seed, Purpose::Sampling, s as u64, 2);
                let len = SHARD.min(quad.n_samples - s * SHARD);
                (0..len)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        let mut j = rng.random_range(0..n - 1);
                        if j >= i {
                            j += 1;
                        }
                        (i as u32, j as u32)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let speeds: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| (v[i as usize] - v[j as usize]).norm())
        .collect();
    let values = half_psi_values(model, lambda, &speeds);

    let groups = JACKKNIFE_GROUPS.min(n);
    let mut touch_sum = vec![0.0; groups];
    let mut touch_count = vec![0u64; groups];
    let mut total = 0.0;
    for (&(i, j), &x) in pairs.iter().zip(&values) {
        total += x;
        let (gi, gj) = (i as usize % groups, j as usize % groups);
        touch_sum[gi] += x;
        touch_count[gi] += 1;
        if gj != gi {
            touch_sum[gj] += x;
            touch_count[gj] += 1;
        }
    }
    let count = pairs.len() as u64;
    let value = total / count as f64;
    let leave_out: Vec<f64> = (0..groups)
        .filter(|&g| count > touch_count[g])
        .map(|g| (total - touch_sum[g]) / (count - touch_count[g]) as f64)
        .collect();
    let std_error = if leave_out.len() < 2 || leave_out.len() < groups {
        0.0
    } else {
        let k = leave_out.len() as f64;
        let mean = leave_out.iter().sum::<f64>() / k;
        ((k - 1.0) / k * leave_out.iter().map(|x| (x - mean).powi(2)).sum::<f64>()).sqrt()
    };
    Ok(DissipationEstimate { value, std_error })
}

/// Cubic velocity grid `[-L, L]³` with `points` midpoint nodes per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityGrid {
    pub half_width: f64,
    pub points: usize,
}

impl VelocityGrid {
    fn nodes(&self) -> (Vec<f64>, f64) {
        let h = 2.0 * self.half_width / self.points as f64;
        let axis = (0..self.points)
            .map(|k| -self.half_width + (k as f64 + 0.5) * h)
            .collect();
        (axis, h * h * h)
    }
}

/// Estimate of `I(f, g) = ∫∫ f_* g ζ(|v - v_*|²) dv_* dv`.
///
/// `v_*` is sampled from the ensemble (all particles when there are at most
/// `quad.n_samples`); the `v` integral runs over `grid`. `g` may be signed.
pub fn i_functional(
    f: &ParticleEnsemble,
    g: &(dyn Fn(&Vec3) -> f64 + Sync),
    zeta_fn: &(dyn Fn(f64) -> f64 + Sync),
    grid: &VelocityGrid,
    quad: &QuadratureSpec,
) -> Result<Estimate> {
    require_particles(f, "f")?;
    if grid.points == 0 || !(grid.half_width > 0.0) {
        return Err(Error::input("grid", "needs positive width and at least one point"));
    }
    let (axis, cell) = grid.nodes();
    let mut weighted: Vec<(Vec3, f64)> = Vec::with_capacity(axis.len().pow(3));
    for &x in &axis {
        for &y in &axis {
            for &z in &axis {
                let v = Vec3::new(x, y, z);
                let w = g(&v) * cell;
                if w != 0.0 {
                    weighted.push((v, w));
                }
            }
        }
    }
    let inner = |v_star: &Vec3| -> f64 {
        weighted
            .iter()
            .map(|(v, w)| w * zeta_fn((v - v_star).norm_squared()))
            .sum()
    };
    let m = if f.len() <= quad.n_samples {
        let values: Vec<f64> = f.velocities.par_iter().map(inner).collect();
        values.iter().fold(Moments::default(), |mut m, x| {
            m.push(*x);
            m
        })
    } else {
        sharded(quad.n_samples, quad.seed, 3, |rng| {
            inner(&f.velocities[rng.random_range(0..f.len())])
        })
    };
    Ok(m.estimate())
}
