//! Theta series on C/(Z + Z*eta) and the finite-dimensional spaces of
//! quasi-periodic sections they span, in one and several variables.
//!
//! The base function is
//!   theta(z) = sum_a (-1)^a exp(2 pi i (a z + a(a-1)/2 * eta)),
//! entire, with simple zeros exactly on the lattice, and
//!   theta(z+1) = theta(z),   theta(z+eta) = -exp(-2 pi i z) theta(z).

use crate::lattice::{LatticeParams, POLE_GUARD};
use crate::snf::Snf;
use crate::{C64, Error, Result};

const TAU_2PI: f64 = 2.0 * std::f64::consts::PI;

fn cis(x: C64) -> C64 {
    // exp(2 pi i x)
    (C64::i() * TAU_2PI * x).exp()
}

/// theta(z) by truncated series; the radius comes from `lat`.
pub fn theta_eval(z: C64, lat: &LatticeParams) -> C64 {
    let r = lat.radius() as i64;
    let mut acc = C64::new(0.0, 0.0);
    for a in -r..=r {
        let af = a as f64;
        let sign = if a & 1 == 0 { 1.0 } else { -1.0 };
        acc += sign * cis(z * af + lat.eta * (af * (af - 1.0) / 2.0));
    }
    acc
}

/// theta'(z), term-wise derivative of the series.
pub fn theta_deriv(z: C64, lat: &LatticeParams) -> C64 {
    let r = lat.radius() as i64;
    let mut acc = C64::new(0.0, 0.0);
    for a in -r..=r {
        let af = a as f64;
        let sign = if a & 1 == 0 { 1.0 } else { -1.0 };
        acc += sign * C64::i() * TAU_2PI * af * cis(z * af + lat.eta * (af * (af - 1.0) / 2.0));
    }
    acc
}

/// k-th derivative of theta, term-wise: each Fourier term picks up (2 pi i a)^k.
pub fn theta_deriv_k(z: C64, k: u32, lat: &LatticeParams) -> C64 {
    let r = lat.radius() as i64;
    let mut acc = C64::new(0.0, 0.0);
    for a in -r..=r {
        let af = a as f64;
        let sign = if a & 1 == 0 { 1.0 } else { -1.0 };
        let rate = (C64::i() * TAU_2PI * af).powu(k);
        acc += sign * rate * cis(z * af + lat.eta * (af * (af - 1.0) / 2.0));
    }
    acc
}

/// Logarithmic derivative theta'/theta with a pole guard on the denominator.
pub fn theta_logd(z: C64, lat: &LatticeParams) -> Result<C64> {
    let t = theta_eval(z, lat);
    let d = theta_deriv(z, lat);
    // scale reference: |theta'|, which stays O(1) near the zeros of theta
    if t.norm() < POLE_GUARD * d.norm().max(1.0) {
        return Err(Error::PoleProximity { site: format!("theta({z})"), value: t.norm() });
    }
    Ok(d / t)
}

/// Guarded ratio theta(num)/theta(den).
pub fn theta_ratio(num: C64, den: C64, lat: &LatticeParams) -> Result<C64> {
    let d = theta_eval(den, lat);
    let n = theta_eval(num, lat);
    let scale = n.norm().max(1.0);
    if d.norm() < POLE_GUARD * scale {
        return Err(Error::PoleProximity { site: format!("theta({den})"), value: d.norm() });
    }
    Ok(n / d)
}

/// Order-m space with characteristic c: functions with
///   f(z+1) = f(z),   f(z+eta) = exp(-2 pi i (m z + c)) f(z).
/// One basis element per residue class of the Fourier index mod m; the
/// coefficients obey the walk c_{k+m} = exp(2 pi i (k eta + c)) c_k.
#[derive(Debug, Clone)]
pub struct ThetaBasis {
    pub m: u32,
    pub c: C64,
    /// coeffs[j] lists (fourier index k, coefficient) for residue class j.
    coeffs: Vec<Vec<(i64, C64)>>,
}

/// Build the order-m basis. Truncation: a term is kept while
/// |c_k| * exp(2 pi |k| Im eta) >= tol, which dominates |e^{2 pi i k z}| on
/// the fundamental domain.
pub fn theta_basis(m: u32, c: C64, lat: &LatticeParams) -> Result<ThetaBasis> {
    if m == 0 {
        return Err(Error::InvalidParam("theta_basis needs m >= 1".into()));
    }
    let im = lat.eta.im;
    let keep = |k: i64, v: C64| v.norm() * (TAU_2PI * k.unsigned_abs() as f64 * im).exp() >= lat.tol;
    let mut coeffs = Vec::with_capacity(m as usize);
    for j in 0..m as i64 {
        let mut chain = vec![(j, C64::new(1.0, 0.0))];
        // upward: c_{k+m} = e^{2 pi i (k eta + c)} c_k
        let (mut k, mut v) = (j, C64::new(1.0, 0.0));
        loop {
            let nv = v * cis(lat.eta * k as f64 + c);
            let nk = k + m as i64;
            if !keep(nk, nv) && nk > j + (m as i64) * 4 {
                break;
            }
            chain.push((nk, nv));
            k = nk;
            v = nv;
            if chain.len() > 4096 {
                break;
            }
        }
        // downward: c_{k-m} = e^{-2 pi i ((k-m) eta + c)} c_k
        let (mut k, mut v) = (j, C64::new(1.0, 0.0));
        loop {
            let nk = k - m as i64;
            let nv = v * cis(-(lat.eta * nk as f64 + c));
            if !keep(nk, nv) && nk < j - (m as i64) * 4 {
                break;
            }
            chain.push((nk, nv));
            k = nk;
            v = nv;
            if chain.len() > 8192 {
                break;
            }
        }
        chain.sort_by_key(|&(k, _)| k);
        coeffs.push(chain);
    }
    Ok(ThetaBasis { m, c, coeffs })
}

impl ThetaBasis {
    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    /// Evaluate basis element `j` at `z`.
    pub fn eval(&self, j: usize, z: C64) -> C64 {
        self.coeffs[j].iter().map(|&(k, v)| v * cis(z * k as f64)).sum()
    }

    /// Evaluate the derivative of basis element `j` at `z`.
    pub fn eval_deriv(&self, j: usize, z: C64) -> C64 {
        self.coeffs[j]
            .iter()
            .map(|&(k, v)| v * C64::i() * TAU_2PI * k as f64 * cis(z * k as f64))
            .sum()
    }

    /// Evaluate the second derivative of basis element `j` at `z`.
    pub fn eval_deriv2(&self, j: usize, z: C64) -> C64 {
        self.coeffs[j]
            .iter()
            .map(|&(k, v)| {
                let rate = C64::i() * TAU_2PI * k as f64;
                v * rate * rate * cis(z * k as f64)
            })
            .sum()
    }
}

/// Multi-variable space for a sequence (n_1, ..., n_p): functions on C^p with
///   f(z + e_a) = f(z),
///   f(z + eta e_a) = exp(-2 pi i (n_a z_a - z_{a-1} - z_{a+1})) f(z),
/// missing neighbors dropped at the ends. Fourier support translates by the
/// rows of the tridiagonal matrix V (diagonal n_a, off-diagonal -1); the
/// dimension is det V.
#[derive(Debug, Clone)]
pub struct MultiThetaBasis {
    pub seq: Vec<u32>,
    pub dim: usize,
    /// One (fourier index vector, coefficient) list per basis element.
    coeffs: Vec<Vec<(Vec<i64>, C64)>>,
}

/// Tridiagonal coupling matrix for the sequence.
pub fn coupling_matrix(seq: &[u32]) -> Vec<Vec<i64>> {
    let p = seq.len();
    let mut v = vec![vec![0i64; p]; p];
    for i in 0..p {
        v[i][i] = seq[i] as i64;
        if i + 1 < p {
            v[i][i + 1] = -1;
            v[i + 1][i] = -1;
        }
    }
    v
}

pub fn multi_theta_basis(seq: &[u32], lat: &LatticeParams) -> Result<MultiThetaBasis> {
    if seq.is_empty() || seq.iter().any(|&n| n < 2) {
        return Err(Error::InvalidSeq(format!("{seq:?}: entries must be >= 2")));
    }
    let p = seq.len();
    let v = coupling_matrix(seq);
    let snf = Snf::compute(&v)?;
    let d = snf.group_order();
    let reps = snf.coset_reps_reduced(&v);
    debug_assert_eq!(reps.len(), d);

    // closed-form walk: c_{r + V m} = exp(2 pi i eta Q(m)),
    // Q(m) = r.m + (m^T V m - sum n_a m_a) / 2, exact over the integers.
    let q_of = |r: &[i64], m: &[i64]| -> i64 {
        let mut rm = 0i64;
        let mut quad = 0i64;
        for a in 0..p {
            rm += r[a] * m[a];
            for b in 0..p {
                quad += m[a] * v[a][b] * m[b];
            }
            quad -= seq[a] as i64 * m[a];
        }
        debug_assert!(quad % 2 == 0);
        rm + quad / 2
    };

    let im = lat.eta.im;
    let term_bound = |k: &[i64], q: i64| -> f64 {
        // |c| * sup of |e^{2 pi i k.z}| over points up to one eta shift
        // outside the fundamental domain (shift laws evaluate there)
        let kabs: f64 = k.iter().map(|&x| x.unsigned_abs() as f64).sum();
        (-TAU_2PI * im * q as f64).exp() * (TAU_2PI * im * 2.2 * kabs).exp()
    };

    let mut coeffs = Vec::with_capacity(d);
    for r in &reps {
        // First pass keeps (k, q) pairs; the exponent minimum is recentred to
        // zero afterwards so every element peaks at magnitude one. Without the
        // recentring, cosets whose walk exponent dips negative blow up to
        // exp(-2 pi Im(eta) q_min) and swamp the rest of the basis.
        let mut raw: Vec<(Vec<i64>, i64)> = Vec::new();
        let mut qmin = i64::MAX;
        let mut radius = 1i64;
        loop {
            let mut shell_ok = true;
            let mut idx = vec![-radius; p];
            loop {
                let on_shell = idx.iter().any(|&x| x.abs() == radius);
                if on_shell || radius == 1 {
                    let m: Vec<i64> = idx.clone();
                    let q = q_of(r, &m);
                    let mut k = r.clone();
                    for a in 0..p {
                        for b in 0..p {
                            k[a] += v[a][b] * m[b];
                        }
                    }
                    // cut relative to the running peak; qmin only decreases,
                    // so nothing kept so far can retroactively be needed less
                    let bound = term_bound(&k, q - qmin.min(q));
                    if bound >= lat.tol {
                        qmin = qmin.min(q);
                        raw.push((k, q));
                        if on_shell {
                            shell_ok = false;
                        }
                    }
                }
                // odometer over [-radius, radius]^p
                let mut a = 0;
                loop {
                    if a == p {
                        break;
                    }
                    idx[a] += 1;
                    if idx[a] <= radius {
                        break;
                    }
                    idx[a] = -radius;
                    a += 1;
                }
                if a == p {
                    break;
                }
            }
            if shell_ok || radius > 24 {
                break;
            }
            radius += 1;
        }
        let terms: Vec<(Vec<i64>, C64)> = raw
            .into_iter()
            .filter(|(k, q)| term_bound(k, q - qmin) >= lat.tol)
            .map(|(k, q)| (k, cis(lat.eta * (q - qmin) as f64)))
            .collect();
        coeffs.push(terms);
    }
    Ok(MultiThetaBasis { seq: seq.to_vec(), dim: d, coeffs })
}

impl MultiThetaBasis {
    /// Evaluate basis element `j` at the point `z` in C^p.
    pub fn eval(&self, j: usize, z: &[C64]) -> C64 {
        self.coeffs[j]
            .iter()
            .map(|(k, c)| {
                let dot: C64 = k.iter().zip(z).map(|(&ki, &zi)| zi * ki as f64).sum();
                *c * cis(dot)
            })
            .sum()
    }

    /// Partial derivative of element `j` in coordinate `axis`.
    pub fn eval_deriv(&self, j: usize, z: &[C64], axis: usize) -> C64 {
        self.coeffs[j]
            .iter()
            .map(|(k, c)| {
                let dot: C64 = k.iter().zip(z).map(|(&ki, &zi)| zi * ki as f64).sum();
                *c * C64::i() * TAU_2PI * k[axis] as f64 * cis(dot)
            })
            .sum()
    }

    /// Mixed partial derivative of element `j`: `orders[a]` derivatives in
    /// coordinate `a`. Each Fourier term contributes prod_a (2 pi i k_a)^orders[a].
    pub fn eval_deriv_multi(&self, j: usize, z: &[C64], orders: &[u32]) -> C64 {
        self.coeffs[j]
            .iter()
            .map(|(k, c)| {
                let dot: C64 = k.iter().zip(z).map(|(&ki, &zi)| zi * ki as f64).sum();
                let mut rate = C64::new(1.0, 0.0);
                for (a, &ord) in orders.iter().enumerate() {
                    if ord > 0 {
                        rate *= (C64::i() * TAU_2PI * k[a] as f64).powu(ord);
                    }
                }
                *c * rate * cis(dot)
            })
            .sum()
    }
}

/// Numerical rank of the sample matrix of a multi-variable basis: rows are
/// basis elements, columns are random domain points. Relative SVD cutoff.
pub fn gram_rank(basis: &MultiThetaBasis, lat: &LatticeParams, seed: u64, cutoff: f64) -> usize {
    let p = basis.seq.len();
    let d = basis.dim;
    let cols = (2 * d).max(8);
    let mut sampler = lat.sampler(seed);
    let mut data = Vec::with_capacity(d * cols);
    let pts: Vec<Vec<C64>> = (0..cols).map(|_| sampler.points(p)).collect();
    for j in 0..d {
        for pt in &pts {
            data.push(basis.eval(j, pt));
        }
    }
    let mut mat = nalgebra::DMatrix::from_row_slice(d, cols, &data);
    // normalize rows so the rank decision reflects linear dependence between
    // the functions, not disparities in their overall scale
    for j in 0..d {
        let norm = mat.row(j).iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        if norm > 0.0 {
            let inv = C64::new(1.0 / norm, 0.0);
            for c in 0..cols {
                mat[(j, c)] *= inv;
            }
        }
    }
    let svd = mat.svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    svd.singular_values.iter().filter(|&&s| s > cutoff * smax).count()
}
