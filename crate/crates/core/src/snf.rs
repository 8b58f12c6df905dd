//! Integer Smith normal form with unimodular transform tracking, and
//! enumeration of the finite group Z^p / A Z^p it diagonalizes.

use crate::{Error, Result};

/// D = U A W with U, W unimodular and D = diag(d_1 | d_2 | ... ).
#[derive(Debug, Clone)]
pub struct Snf {
    pub diag: Vec<i64>,
    pub u: Vec<Vec<i64>>,
    pub u_inv: Vec<Vec<i64>>,
    pub w: Vec<Vec<i64>>,
}

fn identity(p: usize) -> Vec<Vec<i64>> {
    let mut m = vec![vec![0i64; p]; p];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1;
    }
    m
}

impl Snf {
    pub fn compute(a: &[Vec<i64>]) -> Result<Self> {
        let p = a.len();
        if p == 0 || a.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidParam("SNF needs a square nonempty matrix".into()));
        }
        let mut m: Vec<Vec<i64>> = a.to_vec();
        let mut u = identity(p);
        let mut u_inv = identity(p);
        let mut w = identity(p);

        // row ops keep U A W invariant: m <- E m means u <- E u, u_inv <- u_inv E^-1
        let row_swap = |m: &mut Vec<Vec<i64>>, u: &mut Vec<Vec<i64>>, ui: &mut Vec<Vec<i64>>, i: usize, j: usize| {
            m.swap(i, j);
            u.swap(i, j);
            for r in ui.iter_mut() {
                r.swap(i, j);
            }
        };
        let row_add = |m: &mut Vec<Vec<i64>>, u: &mut Vec<Vec<i64>>, ui: &mut Vec<Vec<i64>>, i: usize, j: usize, c: i64| {
            // row_i += c * row_j
            for k in 0..p {
                m[i][k] += c * m[j][k];
                u[i][k] += c * u[j][k];
            }
            for r in ui.iter_mut() {
                r[j] -= c * r[i];
            }
        };
        let col_swap = |m: &mut Vec<Vec<i64>>, w: &mut Vec<Vec<i64>>, i: usize, j: usize| {
            for r in m.iter_mut() {
                r.swap(i, j);
            }
            for r in w.iter_mut() {
                r.swap(i, j);
            }
        };
        let col_add = |m: &mut Vec<Vec<i64>>, w: &mut Vec<Vec<i64>>, i: usize, j: usize, c: i64| {
            // col_i += c * col_j
            for r in m.iter_mut() {
                r[i] += c * r[j];
            }
            for r in w.iter_mut() {
                r[i] += c * r[j];
            }
        };

        for t in 0..p {
            // find a nonzero pivot in the trailing block, smallest |value|
            let mut best: Option<(usize, usize)> = None;
            for i in t..p {
                for j in t..p {
                    if m[i][j] != 0
                        && best.is_none_or(|(bi, bj)| m[i][j].abs() < m[bi][bj].abs())
                    {
                        best = Some((i, j));
                    }
                }
            }
            let Some((bi, bj)) = best else { break };
            row_swap(&mut m, &mut u, &mut u_inv, t, bi);
            col_swap(&mut m, &mut w, t, bj);

            loop {
                // clear column t below, row t right, by division steps
                let mut clean = true;
                for i in t + 1..p {
                    if m[i][t] != 0 {
                        let q = m[i][t].div_euclid(m[t][t]);
                        row_add(&mut m, &mut u, &mut u_inv, i, t, -q);
                        if m[i][t] != 0 {
                            row_swap(&mut m, &mut u, &mut u_inv, t, i);
                            clean = false;
                        }
                    }
                }
                for j in t + 1..p {
                    if m[t][j] != 0 {
                        let q = m[t][j].div_euclid(m[t][t]);
                        col_add(&mut m, &mut w, j, t, -q);
                        if m[t][j] != 0 {
                            col_swap(&mut m, &mut w, t, j);
                            clean = false;
                        }
                    }
                }
                if clean {
                    break;
                }
            }
            // divisibility: fold any non-multiple into the pivot
            loop {
                let mut fixed = true;
                'outer: for i in t + 1..p {
                    for j in t + 1..p {
                        if m[i][j] % m[t][t] != 0 {
                            row_add(&mut m, &mut u, &mut u_inv, t, i, 1);
                            fixed = false;
                            break 'outer;
                        }
                    }
                }
                if fixed {
                    break;
                }
                loop {
                    let mut clean = true;
                    for j in t + 1..p {
                        if m[t][j] != 0 {
                            let q = m[t][j].div_euclid(m[t][t]);
                            col_add(&mut m, &mut w, j, t, -q);
                            if m[t][j] != 0 {
                                col_swap(&mut m, &mut w, t, j);
                                clean = false;
                            }
                        }
                    }
                    for i in t + 1..p {
                        if m[i][t] != 0 {
                            let q = m[i][t].div_euclid(m[t][t]);
                            row_add(&mut m, &mut u, &mut u_inv, i, t, -q);
                            if m[i][t] != 0 {
                                row_swap(&mut m, &mut u, &mut u_inv, t, i);
                                clean = false;
                            }
                        }
                    }
                    if clean {
                        break;
                    }
                }
            }
            if m[t][t] < 0 {
                for k in 0..p {
                    m[t][k] = -m[t][k];
                    u[t][k] = -u[t][k];
                }
                for r in u_inv.iter_mut() {
                    r[t] = -r[t];
                }
            }
        }
        let diag = (0..p).map(|i| m[i][i]).collect();
        Ok(Snf { diag, u, u_inv, w })
    }

    /// |Z^p / A Z^p| when finite (no zero invariant factors).
    pub fn group_order(&self) -> usize {
        self.diag.iter().map(|&d| d.unsigned_abs() as usize).product()
    }

    /// Raw coset representatives: U^-1 t over the invariant-factor box.
    pub fn coset_reps(&self) -> Vec<Vec<i64>> {
        let p = self.diag.len();
        let mut reps = Vec::with_capacity(self.group_order());
        let mut t = vec![0i64; p];
        loop {
            let mut r = vec![0i64; p];
            for i in 0..p {
                for j in 0..p {
                    r[i] += self.u_inv[i][j] * t[j];
                }
            }
            reps.push(r);
            let mut a = 0;
            loop {
                if a == p {
                    return reps;
                }
                t[a] += 1;
                if t[a] < self.diag[a].abs().max(1) {
                    break;
                }
                t[a] = 0;
                a += 1;
            }
        }
    }

    /// Coset representatives reduced against the lattice A Z^p: each raw rep
    /// is shifted by the nearest-plane (Babai) lattice point, then the
    /// canonical member is chosen by (max-norm, lexicographic) order over a
    /// unit neighborhood of lattice translates.
    pub fn coset_reps_reduced(&self, a: &[Vec<i64>]) -> Vec<Vec<i64>> {
        let p = a.len();
        let ainv = invert_f64(a);
        self.coset_reps()
            .into_iter()
            .map(|r| {
                let mut best: Option<Vec<i64>> = None;
                let base = babai_shift(&r, a, &ainv);
                let mut delta = vec![-1i64; p];
                loop {
                    let mut cand = base.clone();
                    for i in 0..p {
                        for j in 0..p {
                            cand[i] += a[i][j] * delta[j];
                        }
                    }
                    let better = match &best {
                        None => true,
                        Some(b) => {
                            let (cn, bn) = (max_norm(&cand), max_norm(b));
                            cn < bn || (cn == bn && cand < *b)
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                    let mut ax = 0;
                    loop {
                        if ax == p {
                            return best.unwrap();
                        }
                        delta[ax] += 1;
                        if delta[ax] <= 1 {
                            break;
                        }
                        delta[ax] = -1;
                        ax += 1;
                    }
                }
            })
            .collect()
    }
}

fn max_norm(v: &[i64]) -> i64 {
    v.iter().map(|x| x.abs()).max().unwrap_or(0)
}

fn invert_f64(a: &[Vec<i64>]) -> Vec<Vec<f64>> {
    let p = a.len();
    let m = nalgebra::DMatrix::from_fn(p, p, |i, j| a[i][j] as f64);
    let inv = m.try_inverse().expect("coupling matrix is invertible");
    (0..p).map(|i| (0..p).map(|j| inv[(i, j)]).collect()).collect()
}

fn babai_shift(r: &[i64], a: &[Vec<i64>], ainv: &[Vec<f64>]) -> Vec<i64> {
    let p = r.len();
    let mut m = vec![0i64; p];
    for i in 0..p {
        let mut acc = 0.0;
        for j in 0..p {
            acc += ainv[i][j] * r[j] as f64;
        }
        m[i] = acc.round() as i64;
    }
    let mut out = r.to_vec();
    for i in 0..p {
        for j in 0..p {
            out[i] -= a[i][j] * m[j];
        }
    }
    out
}
