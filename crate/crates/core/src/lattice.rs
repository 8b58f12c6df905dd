//! Lattice parameters: the period lattice Z + Z*eta, series truncation, and
//! seeded sampling in the fundamental domain.

use crate::{C64, Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative pole guard applied to theta ratios: a denominator smaller than
/// `POLE_GUARD` times the local scale aborts the evaluation.
pub const POLE_GUARD: f64 = 1e-10;

/// Period lattice and evaluation controls.
#[derive(Debug, Clone, Copy)]
pub struct LatticeParams {
    /// Second period; the first is 1. Im(eta) must be positive.
    pub eta: C64,
    /// Series truncation tolerance.
    pub tol: f64,
    /// Optional explicit truncation radius; `None` derives it from `tol`.
    pub radius: Option<usize>,
}

impl LatticeParams {
    pub fn new(eta: C64, tol: f64) -> Result<Self> {
        if eta.im <= 0.0 {
            return Err(Error::InvalidParam(format!("Im(eta) = {} must be > 0", eta.im)));
        }
        if tol <= 0.0 || tol.is_nan() {
            return Err(Error::InvalidParam(format!("tol = {tol} must be > 0")));
        }
        Ok(Self { eta, tol, radius: None })
    }

    /// Default parameters: eta = 0.3 + 0.8i, tol = 1e-14.
    pub fn standard() -> Self {
        Self { eta: C64::new(0.3, 0.8), tol: 1e-14, radius: None }
    }

    /// Truncation radius: the smallest R with exp(-2*pi*Im(eta)*R^2/4) < tol.
    /// The quadratic phase alpha(alpha-1)/2 * eta decays like exp(-pi*Im(eta)*a^2),
    /// so R terms on each side of the origin suffice.
    pub fn radius(&self) -> usize {
        if let Some(r) = self.radius {
            return r;
        }
        let im = self.eta.im;
        let mut r = 1usize;
        while (-2.0 * std::f64::consts::PI * im * (r as f64) * (r as f64) / 4.0).exp() >= self.tol {
            r += 1;
            if r > 512 {
                break;
            }
        }
        r + 2
    }

    /// Seeded sampler over the fundamental domain.
    pub fn sampler(&self, seed: u64) -> DomainSampler {
        DomainSampler { eta: self.eta, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// Draws points z = a + b*eta with a, b in the open unit square, bounded away
/// from the lattice (where every theta kernel degenerates).
pub struct DomainSampler {
    eta: C64,
    rng: ChaCha8Rng,
}

impl DomainSampler {
    /// One point in the fundamental domain, margin away from the boundary.
    pub fn point(&mut self) -> C64 {
        let a = 0.05 + 0.9 * self.rng.gen::<f64>();
        let b = 0.05 + 0.9 * self.rng.gen::<f64>();
        C64::new(a, 0.0) + self.eta * b
    }

    /// A vector of `k` points.
    pub fn points(&mut self, k: usize) -> Vec<C64> {
        (0..k).map(|_| self.point()).collect()
    }

    /// A point whose pairwise differences with `others` stay `min_sep` away
    /// from the lattice directions; retries until the guard holds.
    pub fn point_separated(&mut self, others: &[C64], min_sep: f64) -> C64 {
        for _ in 0..200 {
            let z = self.point();
            let ok = others.iter().all(|w| frac_dist(z - w, self.eta) > min_sep);
            if ok {
                return z;
            }
        }
        self.point()
    }

    /// Uniform complex scalar in the unit box (used for tau draws).
    pub fn unit_box(&mut self) -> C64 {
        C64::new(self.rng.gen::<f64>(), self.rng.gen::<f64>())
    }
}

/// Distance from z to the lattice Z + Z*eta measured in lattice coordinates.
pub fn frac_dist(z: C64, eta: C64) -> f64 {
    // invert z = a + b*eta for real a, b
    let b = z.im / eta.im;
    let a = z.re - b * eta.re;
    let da = (a - a.round()).abs();
    let db = (b - b.round()).abs();
    da.hypot(db)
}
