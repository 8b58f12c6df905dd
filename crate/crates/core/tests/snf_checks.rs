//! Smith normal form checks: the factorization identity, determinant
//! preservation, and pairwise inequivalence of the produced coset
//! representatives.

#![allow(clippy::needless_range_loop)]

use ellipq_core::seqcomb::det_bareiss;
use ellipq_core::snf::Snf;
use ellipq_core::theta::coupling_matrix;

fn mat_mul(a: &[Vec<i64>], b: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let n = a.len();
    let m = b[0].len();
    let k = b.len();
    let mut out = vec![vec![0i64; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn diag_mat(d: &[i64]) -> Vec<Vec<i64>> {
    let n = d.len();
    let mut out = vec![vec![0i64; n]; n];
    for i in 0..n {
        out[i][i] = d[i];
    }
    out
}

#[test]
fn factorization_identity_holds() {
    let cases: Vec<Vec<Vec<i64>>> = vec![
        coupling_matrix(&[2]),
        coupling_matrix(&[3, 2]),
        coupling_matrix(&[2, 2, 2]),
        vec![vec![4, 1], vec![2, 3]],
        vec![vec![6, 4, 2], vec![0, 3, 1], vec![2, 0, 5]],
    ];
    for a in cases {
        let s = Snf::compute(&a).unwrap();
        let uaw = mat_mul(&mat_mul(&s.u, &a), &s.w);
        assert_eq!(uaw, diag_mat(&s.diag), "U*A*W != D for {a:?}");
        let det_a = det_bareiss(&a).unsigned_abs();
        let det_d: u128 = s.diag.iter().map(|&x| x.unsigned_abs() as u128).product();
        assert_eq!(det_a, det_d, "determinant changed for {a:?}");
        assert_eq!(s.group_order() as u128, det_d);
        for i in 1..s.diag.len() {
            if s.diag[i - 1] != 0 {
                assert_eq!(s.diag[i] % s.diag[i - 1], 0, "divisibility chain broke");
            }
        }
    }
}

#[test]
fn inverse_transform_is_inverse() {
    let a = coupling_matrix(&[3, 4, 2]);
    let s = Snf::compute(&a).unwrap();
    let id = mat_mul(&s.u, &s.u_inv);
    let n = a.len();
    for i in 0..n {
        for j in 0..n {
            assert_eq!(id[i][j], i64::from(i == j));
        }
    }
}

#[test]
fn coset_representatives_are_distinct() {
    for seq in [vec![2u32], vec![3], vec![2, 2], vec![3, 2], vec![2, 2, 2], vec![3, 4, 2]] {
        let a = coupling_matrix(&seq);
        let s = Snf::compute(&a).unwrap();
        let reps = s.coset_reps_reduced(&a);
        assert_eq!(reps.len(), s.group_order(), "count for {seq:?}");
        // r1 - r2 lies in the column lattice of A iff U*(r1-r2) is divisible
        // by the diagonal entries coordinate-wise.
        for i in 0..reps.len() {
            for j in 0..i {
                let diff: Vec<i64> =
                    reps[i].iter().zip(&reps[j]).map(|(x, y)| x - y).collect();
                let img: Vec<i64> = s
                    .u
                    .iter()
                    .map(|row| row.iter().zip(&diff).map(|(a, b)| a * b).sum())
                    .collect();
                let equivalent = img
                    .iter()
                    .zip(&s.diag)
                    .all(|(&x, &d)| if d == 0 { x == 0 } else { x % d == 0 });
                assert!(!equivalent, "cosets {i} and {j} coincide for {seq:?}");
            }
        }
    }
}
