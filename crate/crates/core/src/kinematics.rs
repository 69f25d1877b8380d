//! Post-collision velocities for inelastic smooth hard spheres.
//!
//! Two equivalent parametrizations are provided: by the impact direction
//! `n̂` and by the post-collision relative direction `σ`. Both conserve
//! momentum exactly and dissipate kinetic energy according to the normal
//! restitution coefficient evaluated at the impact speed `|u·n̂|`.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::restitution::{check_lambda, RestitutionModel};

pub type Vec3 = Vector3<f64>;

const UNIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionPair {
    pub v: Vec3,
    pub v_star: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionOutcome {
    pub v_prime: Vec3,
    pub v_star_prime: Vec3,
    pub impact_speed: f64,
    pub e_used: f64,
    /// `|v'|² + |v'_*|² - |v|² - |v_*|²`, computed from the loss formula.
    pub delta_energy: f64,
}

impl CollisionPair {
    pub fn new(v: Vec3, v_star: Vec3) -> Result<Self> {
        if v.iter().chain(v_star.iter()).any(|c| !c.is_finite()) {
            return Err(Error::input("pair", "velocity components must be finite"));
        }
        Ok(Self { v, v_star })
    }

    #[inline]
    pub fn relative(&self) -> Vec3 {
        self.v - self.v_star
    }
}

fn check_unit(what: &'static str, x: &Vec3) -> Result<()> {
    let n = x.norm();
    if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::input(what, format!("must be a unit vector, |x| = {n}")));
    }
    Ok(())
}

/// Impact-direction form: `v' = v - (1+e)/2 (u·n̂) n̂`.
pub fn post_collision_n(
    pair: &CollisionPair,
    n_hat: &Vec3,
    model: &RestitutionModel,
    lambda: f64,
) -> Result<CollisionOutcome> {
    check_unit("n_hat", n_hat)?;
    check_lambda(lambda)?;
    let u = pair.relative();
    let u_n = u.dot(n_hat);
    let impact_speed = u_n.abs();
    let e = model.eval_unchecked(lambda * impact_speed);
    let kick = n_hat * (0.5 * (1.0 + e) * u_n);
    Ok(CollisionOutcome {
        v_prime: pair.v - kick,
        v_star_prime: pair.v_star + kick,
        impact_speed,
        e_used: e,
        delta_energy: -0.5 * impact_speed * impact_speed * (1.0 - e * e),
    })
}

/// Scattering-direction form: `v' = v - (1+e)/2 (u - |u|σ)/2`.
pub fn post_collision_sigma(
    pair: &CollisionPair,
    sigma: &Vec3,
    model: &RestitutionModel,
    lambda: f64,
) -> Result<CollisionOutcome> {
    check_unit("sigma", sigma)?;
    check_lambda(lambda)?;
    let u = pair.relative();
    let u_norm = u.norm();
    if u_norm == 0.0 {
        return Err(Error::DegeneratePair);
    }
    Ok(sigma_collision(pair.v, pair.v_star, u, u_norm, sigma, model, lambda))
}

/// Unchecked σ-form used by the particle solver. `u = v - v_star`, `u_norm = |u| > 0`.
#[inline]
pub(crate) fn sigma_collision(
    v: Vec3,
    v_star: Vec3,
    u: Vec3,
    u_norm: f64,
    sigma: &Vec3,
    model: &RestitutionModel,
    lambda: f64,
) -> CollisionOutcome {
    // |u - |u|σ| = 2|u·n̂|; the vector form avoids cancellation near grazing.
    let normal = u - sigma * u_norm;
    let impact_speed = 0.5 * normal.norm();
    let e = model.eval_unchecked(lambda * impact_speed);
    let kick = normal * (0.25 * (1.0 + e));
    CollisionOutcome {
        v_prime: v - kick,
        v_star_prime: v_star + kick,
        impact_speed,
        e_used: e,
        delta_energy: -0.5 * impact_speed * impact_speed * (1.0 - e * e),
    }
}

/// `-|u|² (1 - û·σ)/4 (1 - e²)`.
pub fn energy_loss(pair: &CollisionPair, sigma: &Vec3, e_used: f64) -> Result<f64> {
    if !(e_used > 0.0 && e_used <= 1.0) {
        return Err(Error::input("e_used", format!("must lie in (0,1], got {e_used}")));
    }
    let u = pair.relative();
    let u_norm = u.norm();
    if u_norm == 0.0 {
        return Ok(0.0);
    }
    let cos = (u.dot(sigma) / u_norm).clamp(-1.0, 1.0);
    Ok(-u_norm * u_norm * (1.0 - cos) / 4.0 * (1.0 - e_used * e_used))
}

/// `σ = û - 2(û·n̂)n̂`, renormalized against rounding.
pub fn sigma_from_n(u_hat: &Vec3, n_hat: &Vec3) -> Result<Vec3> {
    check_unit("u_hat", u_hat)?;
    check_unit("n_hat", n_hat)?;
    let s = u_hat - n_hat * (2.0 * u_hat.dot(n_hat));
    Ok(s / s.norm())
}
