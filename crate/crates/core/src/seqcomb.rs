//! Integer combinatorics of admissible sequences: the continuant d, the
//! negative continued-fraction expansion it inverts, the end-to-end merge of
//! two sequences, and the graded dimension series of chained factors.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};
use std::collections::HashMap;

use crate::{Error, Result};

/// Continuant d: d() = 1, d(n1) = n1, d(n1..np) = np d(n1..n_{p-1}) - d(n1..n_{p-2}).
/// Equals det of the tridiagonal coupling matrix (diag n_a, off-diag -1).
pub fn d_seq(seq: &[u32]) -> Result<i64> {
    let mut prev: i128 = 0;
    let mut cur: i128 = 1;
    for &n in seq {
        let next = (n as i128)
            .checked_mul(cur)
            .and_then(|x| x.checked_sub(prev))
            .ok_or_else(|| Error::InvalidSeq(format!("{seq:?}: continuant overflow")))?;
        prev = cur;
        cur = next;
    }
    i64::try_from(cur).map_err(|_| Error::InvalidSeq(format!("{seq:?}: continuant overflow")))
}

/// Exact integer determinant by fraction-free (Bareiss) elimination.
/// Independent of the continuant recursion; used to cross-check it.
pub fn det_bareiss(m: &[Vec<i64>]) -> i128 {
    let n = m.len();
    if n == 0 {
        return 1;
    }
    let mut a: Vec<Vec<i128>> = m.iter().map(|r| r.iter().map(|&x| x as i128).collect()).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n - 1 {
        if a[k][k] == 0 {
            let Some(swap) = (k + 1..n).find(|&i| a[i][k] != 0) else {
                return 0;
            };
            a.swap(k, swap);
            sign = -sign;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
            }
            a[i][k] = 0;
        }
        prev = a[k][k];
    }
    sign * a[n - 1][n - 1]
}

/// Negative continued-fraction digits of n/k for coprime 0 < k < n:
/// n/k = a1 - 1/(a2 - 1/(... - 1/ap)), all digits >= 2. The expansion is the
/// unique sequence with d(seq) = n and d(seq[1..]) = k.
pub fn cont_frac(n: u32, k: u32) -> Result<Vec<u32>> {
    if !(0 < k && k < n) {
        return Err(Error::InvalidParam(format!("cont_frac needs 0 < k < n, got ({n}, {k})")));
    }
    if n.gcd(&k) != 1 {
        return Err(Error::InvalidParam(format!("cont_frac needs gcd(n, k) = 1, got ({n}, {k})")));
    }
    let (mut n, mut k) = (n as u64, k as u64);
    let mut digits = Vec::new();
    while k > 0 {
        let a = n.div_ceil(k);
        digits.push(a as u32);
        let next = a * k - n;
        n = k;
        k = next;
    }
    Ok(digits)
}

/// End-to-end merge: (a1..ap) merged with (b1..bq) is (a1.., ap+b1, ..bq).
pub fn delta_merge(a: &[u32], b: &[u32]) -> Vec<u32> {
    match (a.last(), b.first()) {
        (None, _) => b.to_vec(),
        (_, None) => a.to_vec(),
        (Some(&ap), Some(&b1)) => {
            let mut out = a[..a.len() - 1].to_vec();
            out.push(ap + b1);
            out.extend_from_slice(&b[1..]);
            out
        }
    }
}

/// Binomial coefficient as a big integer.
pub fn binomial_big(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Dimension of the degree-alpha slice of a free commutative algebra on n
/// degree-one generators: C(n + alpha - 1, alpha).
pub fn dim_f(n: u32, alpha: u32) -> BigInt {
    binomial_big(n as u64 + alpha as u64 - 1, alpha as u64)
}

/// One factor of the chained dimension series: the contiguous range of
/// factors it spans, the merged sequence over that range, and the exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HilbertFactor {
    pub range: (usize, usize),
    pub merged: Vec<u32>,
    pub exponent: i64,
}

/// The factor list of prod_{lam <= nu} (1 - t_lam ... t_nu)^(-d(merged range)).
pub fn hilbert_factors(seqs: &[Vec<u32>]) -> Result<Vec<HilbertFactor>> {
    let h = seqs.len();
    let mut out = Vec::new();
    for lam in 0..h {
        let mut merged = seqs[lam].clone();
        out.push(HilbertFactor { range: (lam, lam), merged: merged.clone(), exponent: d_seq(&merged)? });
        for nu in lam + 1..h {
            merged = delta_merge(&merged, &seqs[nu]);
            out.push(HilbertFactor { range: (lam, nu), merged: merged.clone(), exponent: d_seq(&merged)? });
        }
    }
    Ok(out)
}

/// Multigraded dimension series of h chained factors, truncated to the caps.
#[derive(Debug, Clone)]
pub struct HilbertSeries {
    pub caps: Vec<u32>,
    coeffs: HashMap<Vec<u32>, BigInt>,
}

impl HilbertSeries {
    pub fn coeff(&self, deg: &[u32]) -> BigInt {
        self.coeffs.get(deg).cloned().unwrap_or_else(BigInt::zero)
    }
}

/// Expand prod_{lam <= nu} (1 - t_lam...t_nu)^(-d(N_lam merged ... merged N_nu))
/// exactly as a truncated power series with big-integer coefficients.
pub fn hilbert_tensor(seqs: &[Vec<u32>], caps: &[u32]) -> Result<HilbertSeries> {
    let h = seqs.len();
    if h == 0 || caps.len() != h {
        return Err(Error::InvalidParam("hilbert_tensor needs one cap per factor".into()));
    }
    let mut series: HashMap<Vec<u32>, BigInt> = HashMap::new();
    series.insert(vec![0; h], BigInt::one());
    for f in hilbert_factors(seqs)? {
        let (lam, nu) = f.range;
        let e = f.exponent as u64;
        let jmax = (lam..=nu).map(|i| caps[i]).min().unwrap_or(0);
        // (1 - m)^(-e) = sum_j C(e-1+j, j) m^j with m = t_lam ... t_nu
        let mut next: HashMap<Vec<u32>, BigInt> = HashMap::new();
        for (deg, c) in &series {
            for j in 0..=jmax {
                let mut nd = deg.clone();
                let mut ok = true;
                for slot in nd.iter_mut().take(nu + 1).skip(lam) {
                    *slot += j;
                }
                for (i, &v) in nd.iter().enumerate() {
                    if v > caps[i] {
                        ok = false;
                        break;
                    }
                }
                if !ok {
                    continue;
                }
                let term = c * binomial_big(e - 1 + j as u64, j as u64);
                *next.entry(nd).or_insert_with(BigInt::zero) += term;
            }
        }
        series = next;
    }
    Ok(HilbertSeries { caps: caps.to_vec(), coeffs: series })
}
