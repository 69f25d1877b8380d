//! Normal restitution laws `e(r)` and their rescaled family `e_λ(r) = e(λ r)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Restitution law selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RestitutionModel {
    /// Velocity-independent coefficient `e0`.
    Constant { e0: f64 },
    /// Viscoelastic spheres: `e` solves `e + a r^{1/5} e^{3/5} = 1`.
    Viscoelastic { a: f64 },
    /// `max(1 - a r^gamma, e_min)`.
    CappedPowerLaw { a: f64, gamma: f64, e_min: f64 },
}

/// Small-impact-speed expansion `|e(r) - 1 + a r^γ| ≤ b r^γ̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionParams {
    pub a: f64,
    pub gamma: f64,
    pub gamma_bar: f64,
}

impl ExpansionParams {
    pub fn new(a: f64, gamma: f64, gamma_bar: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::input("a", format!("must be positive, got {a}")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::input("gamma", format!("must lie in (0,1], got {gamma}")));
        }
        if !(gamma_bar > gamma) {
            return Err(Error::input(
                "gamma_bar",
                format!("must exceed gamma={gamma}, got {gamma_bar}"),
            ));
        }
        Ok(Self { a, gamma, gamma_bar })
    }
}

/// Outcome of the expansion clause of the assumption checker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExpansionCheck {
    /// The constant law has no impact-speed expansion.
    NotApplicable,
    Fitted {
        a: f64,
        gamma: f64,
        gamma_bar: f64,
        b: f64,
        holds: bool,
    },
}

impl ExpansionCheck {
    pub fn passed(&self) -> bool {
        match self {
            ExpansionCheck::NotApplicable => true,
            ExpansionCheck::Fitted { holds, .. } => *holds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// `e` is non-increasing on the grid.
    pub non_increasing: bool,
    /// `r e(r)` is strictly increasing on the grid.
    pub r_e_increasing: bool,
    pub expansion: ExpansionCheck,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.non_increasing && self.r_e_increasing && self.expansion.passed()
    }
}

const MAX_ROOT_ITERATIONS: usize = 200;

impl RestitutionModel {
    pub fn constant(e0: f64) -> Result<Self> {
        let m = RestitutionModel::Constant { e0 };
        m.validate()?;
        Ok(m)
    }

    pub fn viscoelastic(a: f64) -> Result<Self> {
        let m = RestitutionModel::Viscoelastic { a };
        m.validate()?;
        Ok(m)
    }

    pub fn capped_power_law(a: f64, gamma: f64, e_min: f64) -> Result<Self> {
        let m = RestitutionModel::CappedPowerLaw { a, gamma, e_min };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RestitutionModel::Constant { e0 } => {
                if !(e0 > 0.0 && e0 <= 1.0) {
                    return Err(Error::input("e0", format!("must lie in (0,1], got {e0}")));
                }
            }
            RestitutionModel::Viscoelastic { a } => {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::input("a", format!("must be positive, got {a}")));
                }
            }
            RestitutionModel::CappedPowerLaw { a, gamma, e_min } => {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::input("a", format!("must be positive, got {a}")));
                }
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return Err(Error::input("gamma", format!("must lie in (0,1], got {gamma}")));
                }
                if !(e_min > 0.0 && e_min < 1.0) {
                    return Err(Error::input("e_min", format!("must lie in (0,1), got {e_min}")));
                }
            }
        }
        Ok(())
    }

    /// True when every collision is elastic.
    pub fn is_elastic(&self) -> bool {
        matches!(*self, RestitutionModel::Constant { e0 } if e0 == 1.0)
    }

    pub fn eval(&self, r: f64) -> Result<f64> {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::input("r", format!("impact speed must be finite and >= 0, got {r}")));
        }
        Ok(self.eval_unchecked(r))
    }

    /// `e_λ(r) = e(λ r)`.
    pub fn eval_scaled(&self, lambda: f64, r: f64) -> Result<f64> {
        check_lambda(lambda)?;
        self.eval(lambda * r)
    }

    /// Hot-path evaluation; callers guarantee `r >= 0` and finite.
    #[inline]
    pub(crate) fn eval_unchecked(&self, r: f64) -> f64 {
        match *self {
            RestitutionModel::Constant { e0 } => e0,
            RestitutionModel::Viscoelastic { a } => viscoelastic_root(a * r.powf(0.2)),
            RestitutionModel::CappedPowerLaw { a, gamma, e_min } => {
                (1.0 - a * r.powf(gamma)).max(e_min)
            }
        }
    }

    /// Expansion exponents of the law. The constant law is reported with
    /// the `γ = 1` convention of the `e = 1 - λ` family.
    pub fn expansion_params(&self) -> ExpansionParams {
        match *self {
            RestitutionModel::Constant { .. } => ExpansionParams {
                a: 1.0,
                gamma: 1.0,
                gamma_bar: 2.0,
            },
            RestitutionModel::Viscoelastic { a } => ExpansionParams {
                a,
                gamma: 0.2,
                gamma_bar: 0.4,
            },
            RestitutionModel::CappedPowerLaw { a, gamma, .. } => ExpansionParams {
                a,
                gamma,
                gamma_bar: (2.0 * gamma).min(1.0),
            },
        }
    }

    /// Exponent of the heat-bath strength `λ^γ`.
    pub fn bath_exponent(&self) -> f64 {
        self.expansion_params().gamma
    }

    /// Largest impact speed at which the uncapped expansion is still in force.
    fn expansion_window_upper(&self) -> f64 {
        match *self {
            RestitutionModel::CappedPowerLaw { a, gamma, e_min } => {
                let onset = ((1.0 - e_min) / a).powf(1.0 / gamma);
                (0.5 * onset).min(1.0)
            }
            _ => 1.0,
        }
    }

    /// Checks the monotonicity clauses on `r_grid` and fits the small-r expansion.
    ///
    /// The expansion is asymptotic at 0, so its fit uses log-spaced probe speeds
    /// spanning twelve decades below the upper end of the grid's `r <= 1`
    /// portion. The model `ln(1-e) = ln a + γ ln r + c r^δ` is fitted by a
    /// profile over `δ`, giving `γ̄ = γ + δ`; `b` is the smallest constant
    /// making the bound hold on both the probe and grid points.
    pub fn check_assumptions(&self, r_grid: &[f64]) -> Result<AssumptionReport> {
        if r_grid.len() < 2 {
            return Err(Error::input("r_grid", "needs at least two points"));
        }
        if r_grid.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::input("r_grid", "points must be finite and non-negative"));
        }
        if r_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::input("r_grid", "must be strictly ascending"));
        }
        let e: Vec<f64> = r_grid.iter().map(|&r| self.eval_unchecked(r)).collect();
        let non_increasing = e.windows(2).all(|w| w[1] <= w[0]);
        let r_e_increasing = r_grid
            .windows(2)
            .zip(e.windows(2))
            .all(|(r, e)| r[1] * e[1] > r[0] * e[0]);

        let expansion = match self {
            RestitutionModel::Constant { .. } => ExpansionCheck::NotApplicable,
            _ => self.fit_expansion(r_grid),
        };
        Ok(AssumptionReport {
            non_increasing,
            r_e_increasing,
            expansion,
        })
    }

    fn fit_expansion(&self, r_grid: &[f64]) -> ExpansionCheck {
        let small: Vec<f64> = r_grid
            .iter()
            .copied()
            .filter(|&r| r > 0.0 && r <= 1.0)
            .collect();
        let upper = small
            .last()
            .copied()
            .unwrap_or(1.0)
            .min(self.expansion_window_upper());
        const PROBES: usize = 49;
        let probes: Vec<f64> = (0..PROBES)
            .map(|k| upper * 10f64.powf(-12.0 * k as f64 / (PROBES - 1) as f64))
            .collect();
        let log_r: Vec<f64> = probes.iter().map(|r| r.ln()).collect();
        let log_y: Vec<f64> = probes
            .iter()
            .map(|&r| (1.0 - self.eval_unchecked(r)).ln())
            .collect();

        // Profile the correction exponent δ; the remaining coefficients are linear.
        let fit_at = |delta: f64| {
            let cols = vec![
                vec![1.0; log_r.len()],
                log_r.clone(),
                log_r.iter().map(|l| (delta * l).exp()).collect(),
            ];
            stats::least_squares(&cols, &log_y)
        };
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for i in 1..=400 {
            let delta = 2.0 * i as f64 / 400.0;
            if let Some((coef, sse)) = fit_at(delta) {
                if best.as_ref().map_or(true, |b| sse < b.2) {
                    best = Some((delta, coef, sse));
                }
            }
        }
        let Some((delta, coef, _)) = best else {
            return ExpansionCheck::Fitted {
                a: f64::NAN,
                gamma: f64::NAN,
                gamma_bar: f64::NAN,
                b: f64::NAN,
                holds: false,
            };
        };
        let a = coef[0].exp();
        let gamma = coef[1];
        let gamma_bar = gamma + delta;

        let b = probes
            .iter()
            .chain(small.iter().filter(|&&r| r <= upper))
            .map(|&r| (self.eval_unchecked(r) - 1.0 + a * r.powf(gamma)).abs() / r.powf(gamma_bar))
            .fold(0.0, f64::max);
        let holds = a > 0.0 && gamma > 0.0 && gamma <= 1.0 && gamma_bar > gamma && b.is_finite();
        ExpansionCheck::Fitted {
            a,
            gamma,
            gamma_bar,
            b,
            holds,
        }
    }
}

/// Restitution law as written in a scenario, possibly depending on `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RestitutionSpec {
    /// Without `e0` the coefficient is `1 - λ` at each run or sweep point.
    Constant {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        e0: Option<f64>,
    },
    Viscoelastic {
        #[serde(default = "default_viscoelastic_a")]
        a: f64,
    },
    Capped { a: f64, gamma: f64, e_min: f64 },
}

fn default_viscoelastic_a() -> f64 {
    1.0
}

impl RestitutionSpec {
    pub fn resolve(&self, lambda: f64) -> Result<RestitutionModel> {
        match *self {
            RestitutionSpec::Constant { e0: Some(e0) } => RestitutionModel::constant(e0),
            RestitutionSpec::Constant { e0: None } => {
                check_lambda(lambda)?;
                if lambda >= 1.0 {
                    return Err(Error::input("lambda", "e0 = 1 - lambda needs lambda < 1"));
                }
                RestitutionModel::constant(1.0 - lambda)
            }
            RestitutionSpec::Viscoelastic { a } => RestitutionModel::viscoelastic(a),
            RestitutionSpec::Capped { a, gamma, e_min } => RestitutionModel::capped_power_law(a, gamma, e_min),
        }
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input("lambda", format!("must lie in [0,1], got {lambda}")));
    }
    Ok(())
}

/// Root of `e + c e^{3/5} = 1` for `c >= 0`.
///
/// With `t = e^{1/5}` this is `p(t) = t^5 + c t^3 - 1 = 0`, where `p` is
/// increasing and convex on `[0,1]`. Newton's method started at `t = 1`
/// therefore decreases monotonically onto the unique root; the iteration
/// stops once rounding prevents further descent.
fn viscoelastic_root(c: f64) -> f64 {
    if c == 0.0 {
        return 1.0;
    }
    let mut t = 1.0f64;
    for _ in 0..MAX_ROOT_ITERATIONS {
        let t2 = t * t;
        let t3 = t2 * t;
        let p = t3 * t2 + c * t3 - 1.0;
        if p <= 0.0 {
            break;
        }
        let dp = 5.0 * t2 * t2 + 3.0 * c * t2;
        let next = t - p / dp;
        if !(next < t) || next <= 0.0 {
            break;
        }
        t = next;
    }
    let t2 = t * t;
    t2 * t2 * t
}
