//! Checks for the site-generator algebras. The shift table is pinned against
//! hand-computed continuant ratios and cross-checked entry by entry against
//! the classical bracket constants; the exchange kernels are checked through
//! the double-exchange involution, the undeformed degeneration, and the
//! transfer-matrix parametrization of the undeformed relations. Normal
//! ordering is checked for strategy independence on short tuples and for the
//! relation-span property of the strategy gap on longer ones, and the
//! embeddings against the deformed scalar product and the classical bracket
//! in the small-parameter limit.

use std::collections::BTreeMap;
use std::rc::Rc;

use ellipq_core::boson::{
    eval_word_coeffs, exchange, exchange_run, nc_mul, normal_order, normal_order_bounded,
    semiclassical_commutator_check, semiclassical_shift_check, shift_past, x_embed, x_embed2,
    CoeffExpr, GenSym, NCMonomial, SiteArg, SiteConfig, SitePoint, Strategy, YVar,
};
use ellipq_core::graded::{star_product, SymElement};
use ellipq_core::lattice::LatticeParams;
use ellipq_core::theta::{multi_theta_basis, theta_basis};
use ellipq_core::{C64, Error};
use nalgebra::{DMatrix, DVector};
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rat(n: i64, d: i64) -> Rational64 {
    Rational64::new(n, d)
}

fn gen(factor: u8, tuple: &[u8]) -> GenSym {
    GenSym { factor, tuple: tuple.to_vec() }
}

fn yv(factor: u8, pos: u8, site: u8) -> YVar {
    YVar { factor, pos, site }
}

fn one_word(word: Vec<GenSym>) -> NCMonomial {
    NCMonomial::new(CoeffExpr::one(), word)
}

// product of pairwise transfer weights over consecutive tuple positions; the
// undeformed relations preserve it, so it separates ordered words that the
// undeformed algebra genuinely distinguishes
fn transfer_value(word: &[GenSym], e0: &[[f64; 2]; 2], e1: &[[f64; 2]; 2]) -> f64 {
    word.iter()
        .map(|g| {
            e0[g.tuple[0] as usize][g.tuple[1] as usize]
                * e1[g.tuple[1] as usize][g.tuple[2] as usize]
        })
        .product()
}

fn random_weights(seed: u64) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e0 = [[0.0f64; 2]; 2];
    let mut e1 = [[0.0f64; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            e0[a][b] = rng.gen_range(0.2..2.0);
            e1[a][b] = rng.gen_range(0.2..2.0);
        }
    }
    (e0, e1)
}

fn random_scalar(n: u32, tau: C64, lat: LatticeParams, seed: u64) -> SymElement {
    let tag = -tau * n as f64;
    let basis = Rc::new(theta_basis(n, tag, &lat).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<C64> = (0..basis.dim())
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    SymElement::from_scalar_basis(&basis, coeffs, n, tag, lat).unwrap()
}

fn random_multi(seq: &[u32], lat: LatticeParams, seed: u64) -> SymElement {
    let basis = Rc::new(multi_theta_basis(seq, &lat).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<C64> = (0..basis.dim)
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    SymElement::from_multi_basis(&basis, coeffs, lat).unwrap()
}

#[test]
fn shift_rules_match_printed_constants() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.01, 0.005);

    // ratio convention, one factor with sequence (3,2): continuants
    // d(3,2) = 5, d(3) = 3, d(2) = 2, d() = 1
    let c32 = SiteConfig::chain(vec![(vec![3, 2], vec![2, 2])], tau, lat).unwrap();
    let g = gen(0, &[0, 0]);
    assert_eq!(c32.y_shift_ratio(&g, yv(0, 0, 1)), rat(-3, 5));
    assert_eq!(c32.y_shift_ratio(&g, yv(0, 0, 0)), rat(2, 5));
    assert_eq!(c32.y_shift_ratio(&g, yv(0, 1, 1)), rat(-4, 5));
    assert_eq!(c32.y_shift_ratio(&g, yv(0, 1, 0)), rat(1, 5));

    // two factors (2) and (2): a generator shifts the next factor's
    // variables by the suffix ratio and the previous factor's by the prefix
    let c22 = SiteConfig::chain(
        vec![(vec![2], vec![2]), (vec![2], vec![2])],
        tau,
        lat,
    )
    .unwrap();
    let g0 = gen(0, &[0]);
    let g1 = gen(1, &[0]);
    assert_eq!(c22.y_shift_ratio(&g0, yv(1, 0, 0)), rat(1, 2));
    assert_eq!(c22.y_shift_ratio(&g1, yv(0, 0, 0)), rat(1, 2));
    assert_eq!(c22.z_shift_ratio(&g0, 0), rat(3, 2));
    assert_eq!(c22.z_shift_ratio(&g1, 0), rat(-3, 2));

    // chain parameter one step outside its link picks up the reciprocal
    // continuant; two or more steps away it is untouched
    let c3 = SiteConfig::chain(
        vec![(vec![2], vec![2]), (vec![2], vec![2]), (vec![2], vec![2])],
        tau,
        lat,
    )
    .unwrap();
    assert_eq!(c3.z_shift_ratio(&gen(0, &[0]), 1), rat(-1, 2));
    assert_eq!(c3.z_shift_ratio(&gen(2, &[0]), 0), rat(1, 2));
    let c4 = SiteConfig::chain(
        vec![
            (vec![2], vec![2]),
            (vec![2], vec![2]),
            (vec![2], vec![2]),
            (vec![2], vec![2]),
        ],
        tau,
        lat,
    )
    .unwrap();
    assert_eq!(c4.z_shift_ratio(&gen(0, &[0]), 2), rat(0, 1));
    assert_eq!(c4.z_shift_ratio(&gen(3, &[0]), 0), rat(0, 1));

    // absolute convention: nonmatching sites shift by -2, the matching one
    // by the order minus two
    for n in [2u32, 3, 4] {
        let cfg = SiteConfig::single(vec![n], vec![3], tau, lat).unwrap();
        let g = gen(0, &[0]);
        assert_eq!(cfg.y_shift(&g, yv(0, 0, 1)), rat(-2, 1));
        assert_eq!(cfg.y_shift(&g, yv(0, 0, 0)), rat(n as i64 - 2, 1));
    }

    // a variable on a distant factor passes through unchanged
    let expr = CoeffExpr::Theta(SiteArg::var(yv(2, 0, 1)));
    let moved = shift_past(&gen(0, &[0]), &expr, &c3).unwrap();
    let mut sampler = lat.sampler(11);
    let pt = SitePoint::random(&c3, &mut sampler, 0.1);
    let a = expr.eval(&pt, tau, &lat).unwrap();
    let b = moved.eval(&pt, tau, &lat).unwrap();
    assert!((a - b).norm() < 1e-14);

    // shifts accumulate additively when moving past a word
    let e2 = CoeffExpr::Theta(SiteArg::var(yv(0, 0, 1)));
    let twice = e2
        .shifted_word(&[gen(0, &[0]), gen(0, &[0])], &c3);
    let direct = CoeffExpr::Theta(SiteArg::var(yv(0, 0, 1)).plus_tau(rat(-2, 1)));
    let a = twice.eval(&pt, tau, &lat).unwrap();
    let b = direct.eval(&pt, tau, &lat).unwrap();
    assert!((a - b).norm() < 1e-14);

    // with the deformation switched off every shift is invisible
    let shifted = shift_past(&gen(0, &[0]), &e2, &c3).unwrap();
    let a = e2.eval(&pt, C64::new(0.0, 0.0), &lat).unwrap();
    let b = shifted.eval(&pt, C64::new(0.0, 0.0), &lat).unwrap();
    assert!((a - b).norm() < 1e-14);

    // an undeclared variable is rejected up front
    let bad = CoeffExpr::Theta(SiteArg::var(yv(5, 0, 0)));
    assert!(matches!(
        shift_past(&gen(0, &[0]), &bad, &c3),
        Err(Error::UndeclaredVariable(_))
    ));
}

fn double_exchange_residual(cfg: &SiteConfig, w: Vec<GenSym>, tau: C64, seed: u64) -> f64 {
    let m = one_word(w.clone());
    let once = exchange(&m, 0, cfg).unwrap();
    let mut twice = Vec::new();
    for t in &once {
        twice.extend(exchange(t, 0, cfg).unwrap());
    }
    let mut sampler = cfg.lattice.sampler(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let pt = SitePoint::random(cfg, &mut sampler, 0.1);
        let vals = eval_word_coeffs(&twice, &pt, tau, &cfg.lattice).unwrap();
        assert!(vals.contains_key(&w), "original word missing after double exchange");
        for (word, v) in &vals {
            let target =
                if *word == w { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
            worst = worst.max((v - target).norm());
        }
    }
    worst
}

#[test]
fn exchange_twice_returns_the_original_word() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.002, 0.0012);

    // single position, three sites
    let a3 = SiteConfig::single(vec![3], vec![3], tau, lat).unwrap();
    let r = double_exchange_residual(&a3, vec![gen(0, &[0]), gen(0, &[1])], tau, 21);
    assert!(r < 1e-10, "single-position pair: {r:.3e}");

    // three positions: tuples differing everywhere, a single interior run,
    // and two separated runs
    let a222 = SiteConfig::single(vec![2, 2, 2], vec![2, 2, 2], tau, lat).unwrap();
    let full =
        double_exchange_residual(&a222, vec![gen(0, &[0, 0, 0]), gen(0, &[1, 1, 1])], tau, 22);
    assert!(full < 1e-10, "full-span run: {full:.3e}");
    let inner =
        double_exchange_residual(&a222, vec![gen(0, &[0, 0, 0]), gen(0, &[0, 1, 0])], tau, 23);
    assert!(inner < 1e-10, "interior run: {inner:.3e}");
    let split =
        double_exchange_residual(&a222, vec![gen(0, &[0, 0, 0]), gen(0, &[1, 0, 1])], tau, 24);
    assert!(split < 1e-10, "two separated runs, leading fired: {split:.3e}");

    // the second run of a separated pair, fired explicitly twice
    let m = one_word(vec![gen(0, &[0, 0, 0]), gen(0, &[1, 0, 1])]);
    let once = exchange_run(&m, 0, 1, &a222).unwrap();
    let mut twice = Vec::new();
    for t in &once {
        twice.extend(exchange_run(t, 0, 1, &a222).unwrap());
    }
    let mut sampler = lat.sampler(25);
    let pt = SitePoint::random(&a222, &mut sampler, 0.1);
    let vals = eval_word_coeffs(&twice, &pt, tau, &lat).unwrap();
    for (word, v) in &vals {
        let target =
            if *word == m.word { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
        assert!((v - target).norm() < 1e-10, "second run twice: {v}");
    }

    // ratio convention, two-position factor
    let r22 = SiteConfig::chain(vec![(vec![2, 2], vec![2, 2])], tau, lat).unwrap();
    let rr =
        double_exchange_residual(&r22, vec![gen(0, &[0, 0]), gen(0, &[1, 1])], tau, 26);
    assert!(rr < 1e-10, "ratio full-span: {rr:.3e}");

    // adjacent factors through the half-shift kernel, then distant factors
    let ch2 = SiteConfig::chain(
        vec![(vec![2], vec![2]), (vec![2], vec![2])],
        tau,
        lat,
    )
    .unwrap();
    let rc = double_exchange_residual(&ch2, vec![gen(0, &[0]), gen(1, &[1])], tau, 27);
    assert!(rc < 1e-10, "adjacent factors: {rc:.3e}");
    let ch3 = SiteConfig::chain(
        vec![(vec![2], vec![2]), (vec![2], vec![2]), (vec![2], vec![2])],
        tau,
        lat,
    )
    .unwrap();
    let rd = double_exchange_residual(&ch3, vec![gen(0, &[0]), gen(2, &[1])], tau, 28);
    assert!(rd < 1e-10, "distant factors: {rd:.3e}");

    // identical tuples commute on the nose
    let m = one_word(vec![gen(0, &[1]), gen(0, &[1])]);
    let out = exchange(&m, 0, &a3).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].word, m.word);
}

#[test]
fn exchange_rejects_bad_input() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.01, 0.005);
    let cfg = SiteConfig::single(vec![2, 2], vec![2, 2], tau, lat).unwrap();

    let m = one_word(vec![gen(0, &[0, 0]), gen(0, &[1, 1])]);
    assert!(matches!(exchange(&m, 1, &cfg), Err(Error::NonAdjacent(1, 2, 2))));

    let short = one_word(vec![gen(0, &[0]), gen(0, &[1, 1])]);
    assert!(matches!(exchange(&short, 0, &cfg), Err(Error::MalformedPattern(_))));

    let big = one_word(vec![gen(0, &[0, 3]), gen(0, &[1, 1])]);
    assert!(matches!(exchange(&big, 0, &cfg), Err(Error::MalformedPattern(_))));

    assert!(matches!(
        exchange_run(&m, 0, 5, &cfg),
        Err(Error::MalformedPattern(_))
    ));
    let ch2 = SiteConfig::chain(
        vec![(vec![2], vec![2]), (vec![2], vec![2])],
        tau,
        lat,
    )
    .unwrap();
    let cross = one_word(vec![gen(0, &[0]), gen(1, &[0])]);
    assert!(matches!(
        exchange_run(&cross, 0, 0, &ch2),
        Err(Error::MalformedPattern(_))
    ));

    assert!(matches!(
        SiteConfig::single(vec![1], vec![2], tau, lat),
        Err(Error::InvalidSeq(_))
    ));
    assert!(matches!(
        SiteConfig::new(
            vec![(vec![2], vec![2]), (vec![2], vec![2])],
            ellipq_core::boson::TauConvention::Absolute,
            tau,
            lat,
        ),
        Err(Error::InvalidParam(_))
    ));
    assert!(matches!(
        SiteConfig::single(vec![2, 2], vec![2], tau, lat),
        Err(Error::InvalidParam(_))
    ));
}

#[test]
fn undeformed_products_commute() {
    let lat = LatticeParams::standard();
    let zero = C64::new(0.0, 0.0);
    let cfg = SiteConfig::single(vec![2, 2, 2], vec![2, 2, 2], zero, lat).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    for trial in 0..6 {
        let word: Vec<GenSym> = (0..3)
            .map(|_| {
                let tuple: Vec<u8> = (0..3).map(|_| rng.gen_range(0..2u8)).collect();
                GenSym { factor: 0, tuple }
            })
            .collect();
        let m = one_word(word.clone());
        let l = normal_order(&[m.clone()], &cfg, Strategy::Leftmost).unwrap();
        let r = normal_order(&[m], &cfg, Strategy::Rightmost).unwrap();

        let mut sampler = lat.sampler(42 + trial);
        let pt = SitePoint::random(&cfg, &mut sampler, 0.12);
        let lv = eval_word_coeffs(&l, &pt, zero, &lat).unwrap();
        let rv = eval_word_coeffs(&r, &pt, zero, &lat).unwrap();

        // with the deformation off exactly one word survives, with unit
        // coefficient; the strategies may park on different ordered words,
        // but those carry the same transfer value, so they are the same
        // element of the undeformed algebra
        let live_l: Vec<_> = lv.iter().filter(|(_, v)| v.norm() > 1e-10).collect();
        let live_r: Vec<_> = rv.iter().filter(|(_, v)| v.norm() > 1e-10).collect();
        assert_eq!(live_l.len(), 1, "several words survive: {live_l:?}");
        assert_eq!(live_r.len(), 1);
        assert!((live_l[0].1 - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((live_r[0].1 - C64::new(1.0, 0.0)).norm() < 1e-12);
        let (e0, e1) = random_weights(40);
        let a = transfer_value(live_l[0].0, &e0, &e1);
        let b = transfer_value(live_r[0].0, &e0, &e1);
        assert!(
            (a - b).abs() < 1e-12 * a.abs(),
            "survivors are different elements: {a} vs {b}"
        );
    }

    // an already ordered word passes through untouched
    let sorted = one_word(vec![gen(0, &[0, 0, 0]), gen(0, &[0, 1, 1])]);
    let out = normal_order(&[sorted.clone()], &cfg, Strategy::Leftmost).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].word, sorted.word);
}

#[test]
fn transfer_matrix_parametrization_satisfies_undeformed_relations() {
    // assign each generator the product of pairwise transfer weights over
    // consecutive positions; every undeformed relation instance then holds
    // identically, because a run swap only regroups the same weight multiset
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let mut e0 = [[0.0f64; 2]; 2];
    let mut e1 = [[0.0f64; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            e0[a][b] = rng.gen_range(0.2..2.0);
            e1[a][b] = rng.gen_range(0.2..2.0);
        }
    }
    let value = |w: &[Vec<usize>]| -> f64 {
        w.iter()
            .map(|t| e0[t[0]][t[1]] * e1[t[1]][t[2]])
            .product()
    };
    let swap_run = |a: &[usize], b: &[usize], s: usize, e: usize| -> (Vec<usize>, Vec<usize>) {
        let mut x = a.to_vec();
        let mut y = b.to_vec();
        for i in s..e {
            x[i] = b[i];
            y[i] = a[i];
        }
        (x, y)
    };

    // fully distinct tuples, a shared middle position (both separated runs),
    // and shared flanking positions
    let cases: Vec<(Vec<usize>, Vec<usize>, usize, usize)> = vec![
        (vec![0, 0, 0], vec![1, 1, 1], 0, 3),
        (vec![0, 0, 0], vec![1, 0, 1], 0, 1),
        (vec![0, 0, 0], vec![1, 0, 1], 2, 3),
        (vec![0, 0, 0], vec![0, 1, 0], 1, 2),
        (vec![0, 1, 1], vec![0, 0, 1], 1, 2),
    ];
    for (a, b, s, e) in cases {
        let lhs = value(&[a.clone(), b.clone()]);
        let (x, y) = swap_run(&a, &b, s, e);
        let rhs = value(&[x, y]);
        assert!(
            (lhs - rhs).abs() < 1e-12 * lhs.abs(),
            "run swap changes the transfer product: {lhs} vs {rhs}"
        );
    }

    // the engine's relation degenerates to exactly that run swap: the main
    // coefficient goes to one and the mixed coefficients vanish
    let lat = LatticeParams::standard();
    let zero = C64::new(0.0, 0.0);
    let cfg = SiteConfig::single(vec![2, 2, 2], vec![2, 2, 2], zero, lat).unwrap();
    let m = one_word(vec![gen(0, &[0, 0, 0]), gen(0, &[1, 1, 1])]);
    let terms = exchange(&m, 0, &cfg).unwrap();
    let mut sampler = lat.sampler(58);
    let pt = SitePoint::random(&cfg, &mut sampler, 0.12);
    let vals = eval_word_coeffs(&terms, &pt, zero, &lat).unwrap();
    let swapped = vec![gen(0, &[1, 1, 1]), gen(0, &[0, 0, 0])];
    for (word, v) in &vals {
        let target =
            if *word == swapped { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
        assert!((v - target).norm() < 1e-12, "undeformed exchange: {v}");
    }
}

#[test]
fn normal_order_is_strategy_independent_for_short_tuples() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.0015, 0.001);
    let fams: Vec<SiteConfig> = vec![
        SiteConfig::single(vec![3], vec![3], tau, lat).unwrap(),
        SiteConfig::single(vec![3, 2], vec![2, 2], tau, lat).unwrap(),
        SiteConfig::chain(
            vec![(vec![2, 2], vec![2, 2]), (vec![2], vec![2])],
            tau,
            lat,
        )
        .unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for (fi, cfg) in fams.iter().enumerate() {
        for trial in 0..20 {
            let len = rng.gen_range(2..=4usize);
            let word: Vec<GenSym> = (0..len)
                .map(|_| {
                    let f = rng.gen_range(0..cfg.h());
                    let tuple: Vec<u8> = cfg.factors()[f]
                        .sites
                        .iter()
                        .map(|&l| rng.gen_range(0..l as u8))
                        .collect();
                    GenSym { factor: f as u8, tuple }
                })
                .collect();
            let m = one_word(word);
            let l = normal_order(&[m.clone()], cfg, Strategy::Leftmost).unwrap();
            let r = normal_order(&[m], cfg, Strategy::Rightmost).unwrap();
            let mut sampler = lat.sampler(62 + 100 * fi as u64 + trial);
            for _ in 0..2 {
                let pt = SitePoint::random(cfg, &mut sampler, 0.12);
                let lv = eval_word_coeffs(&l, &pt, tau, &lat).unwrap();
                let rv = eval_word_coeffs(&r, &pt, tau, &lat).unwrap();
                let zero = C64::new(0.0, 0.0);
                let mut keys: Vec<&Vec<GenSym>> = lv.keys().collect();
                keys.extend(rv.keys());
                for k in keys {
                    let a = lv.get(k).copied().unwrap_or(zero);
                    let b = rv.get(k).copied().unwrap_or(zero);
                    let scale = 1.0 + a.norm().max(b.norm());
                    assert!(
                        (a - b).norm() / scale < 1e-9,
                        "family {fi} trial {trial}: {a} vs {b}"
                    );
                }
            }
        }
    }
}

#[test]
fn strategy_gap_for_longer_tuples_lies_in_the_relation_span() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.005, 0.003);
    let cfg = SiteConfig::single(vec![2, 2, 2], vec![2, 2, 2], tau, lat).unwrap();

    // the closure class of the probe word: each position spreads the site
    // multiset {0, 0, 1} over the three slots independently
    let mut class: Vec<Vec<GenSym>> = Vec::new();
    for s0 in 0..3usize {
        for s1 in 0..3usize {
            for s2 in 0..3usize {
                let mut word =
                    vec![gen(0, &[0, 0, 0]), gen(0, &[0, 0, 0]), gen(0, &[0, 0, 0])];
                word[s0].tuple[0] = 1;
                word[s1].tuple[1] = 1;
                word[s2].tuple[2] = 1;
                class.push(word);
            }
        }
    }
    class.sort();
    class.dedup();
    assert_eq!(class.len(), 27);
    let index: BTreeMap<Vec<GenSym>, usize> =
        class.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();

    let mut sampler = lat.sampler(731);
    let pt = SitePoint::random(&cfg, &mut sampler, 0.1);

    // every relation instance supported inside the class, one vector each
    let mut rel_vecs: Vec<Vec<C64>> = Vec::new();
    for w in &class {
        for pos in 0..2 {
            if w[pos].tuple == w[pos + 1].tuple {
                continue;
            }
            let m = one_word(w.clone());
            for run_idx in 0.. {
                let terms = match exchange_run(&m, pos, run_idx, &cfg) {
                    Ok(t) => t,
                    Err(_) => break,
                };
                let mut v = vec![C64::new(0.0, 0.0); 27];
                v[index[w]] += C64::new(1.0, 0.0);
                for (word, c) in eval_word_coeffs(&terms, &pt, tau, &lat).unwrap() {
                    v[index[&word]] -= c;
                }
                rel_vecs.push(v);
            }
        }
    }
    assert!(rel_vecs.len() > 27);

    // probes with overlapping fireable pairs, where the strategies genuinely
    // disagree: the gap must be a combination of relation vectors, so the
    // normal forms are equal in the algebra even where they differ as
    // coefficient tables
    let m = DMatrix::from_fn(27, rel_vecs.len(), |i, j| rel_vecs[j][i]);
    let svd = m.clone().svd(true, true);
    let probes = vec![
        vec![gen(0, &[1, 0, 0]), gen(0, &[0, 1, 0]), gen(0, &[0, 0, 1])],
        vec![gen(0, &[0, 1, 0]), gen(0, &[1, 0, 1]), gen(0, &[0, 0, 0])],
        vec![gen(0, &[0, 0, 1]), gen(0, &[1, 1, 0]), gen(0, &[0, 0, 0])],
    ];
    let mut max_gap = 0.0f64;
    for probe in probes {
        let start = one_word(probe);
        let l = normal_order(&[start.clone()], &cfg, Strategy::Leftmost).unwrap();
        let r = normal_order(&[start], &cfg, Strategy::Rightmost).unwrap();
        let lv = eval_word_coeffs(&l, &pt, tau, &lat).unwrap();
        let rv = eval_word_coeffs(&r, &pt, tau, &lat).unwrap();
        let mut gap = vec![C64::new(0.0, 0.0); 27];
        for (wd, c) in &lv {
            gap[index[wd]] += c;
        }
        for (wd, c) in &rv {
            gap[index[wd]] -= c;
        }
        let g = DVector::from_vec(gap);
        let gnorm = g.norm();
        if gnorm < 1e-12 {
            continue;
        }
        max_gap = max_gap.max(gnorm);
        let x = svd.solve(&g, 1e-13).unwrap();
        let resid = (&m * &x - &g).norm() / gnorm;
        assert!(resid < 1e-9, "gap escapes the relation span: {resid:.3e}");
    }
    assert!(max_gap > 1e-8, "no probe separates the strategies");
}

#[test]
fn degree_one_embedding_is_linear_and_graded() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.004, 0.002);
    let cfg = SiteConfig::single(vec![3], vec![3], tau, lat).unwrap();
    let f1 = random_scalar(3, tau, lat, 71);
    let f2 = random_scalar(3, tau, lat, 72);
    let w = C64::new(0.3, -1.1);
    let combo = SymElement::linear_combination(
        &[f1.clone(), f2.clone()],
        &[C64::new(1.0, 0.0), w],
    )
    .unwrap();

    let xa = x_embed(&f1, 0, &cfg).unwrap();
    let xb = x_embed(&f2, 0, &cfg).unwrap();
    let xc = x_embed(&combo, 0, &cfg).unwrap();
    assert_eq!(xc.len(), 3);
    let mut sampler = lat.sampler(73);
    let pt = SitePoint::random(&cfg, &mut sampler, 0.1);
    let va = eval_word_coeffs(&xa, &pt, tau, &lat).unwrap();
    let vb = eval_word_coeffs(&xb, &pt, tau, &lat).unwrap();
    let vc = eval_word_coeffs(&xc, &pt, tau, &lat).unwrap();
    for (word, c) in &vc {
        let lin = va[word] + w * vb[word];
        assert!((c - lin).norm() < 1e-12, "embedding is not linear: {c} vs {lin}");
    }

    // a product of two embedded elements normal-orders to length-two words
    let prod = nc_mul(&xa, &xb, &cfg).unwrap();
    let no = normal_order(&prod, &cfg, Strategy::Leftmost).unwrap();
    assert!(!no.is_empty());
    for m in &no {
        assert_eq!(m.word.len(), 2);
    }

    // mismatched inputs are rejected
    let wrong = random_scalar(2, tau, lat, 74);
    assert!(matches!(x_embed(&wrong, 0, &cfg), Err(Error::TagMismatch { .. })));
    assert!(matches!(x_embed(&f1, 1, &cfg), Err(Error::InvalidParam(_))));
    let deg2 = star_product(&f1, &f2, tau).unwrap();
    assert!(matches!(x_embed(&deg2, 0, &cfg), Err(Error::InvalidParam(_))));
}

#[test]
fn product_of_embeddings_matches_embedded_deformed_product() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.004, 0.002);
    for n in [2u32, 3] {
        let cfg = SiteConfig::single(vec![n], vec![3], tau, lat).unwrap();
        let f = random_scalar(n, tau, lat, 81 + n as u64);
        let g = random_scalar(n, tau, lat, 91 + n as u64);
        let star = star_product(&f, &g, tau).unwrap();

        let lhs = normal_order(
            &nc_mul(&x_embed(&f, 0, &cfg).unwrap(), &x_embed(&g, 0, &cfg).unwrap(), &cfg)
                .unwrap(),
            &cfg,
            Strategy::Leftmost,
        )
        .unwrap();
        let rhs = normal_order(&x_embed2(&star, &cfg).unwrap(), &cfg, Strategy::Leftmost)
            .unwrap();

        let mut sampler = lat.sampler(101 + n as u64);
        for _ in 0..3 {
            let pt = SitePoint::random(&cfg, &mut sampler, 0.1);
            let lv = eval_word_coeffs(&lhs, &pt, tau, &lat).unwrap();
            let rv = eval_word_coeffs(&rhs, &pt, tau, &lat).unwrap();
            let zero = C64::new(0.0, 0.0);
            let mut keys: Vec<&Vec<GenSym>> = lv.keys().collect();
            keys.extend(rv.keys());
            for k in keys {
                let a = lv.get(k).copied().unwrap_or(zero);
                let b = rv.get(k).copied().unwrap_or(zero);
                let scale = 1.0 + a.norm().max(b.norm());
                assert!(
                    (a - b).norm() / scale < 1e-8,
                    "order {n}, word {k:?}: {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn commutator_limit_matches_chain_bracket() {
    let lat = LatticeParams::standard();
    let tau0 = C64::new(0.002, 0.0012);

    // adjacent factors: the limit of the commutator over the parameter fits
    // the classical bracket with a single scalar
    let cfg = SiteConfig::chain(
        vec![(vec![2], vec![2]), (vec![3], vec![2])],
        tau0,
        lat,
    )
    .unwrap();
    let f = random_multi(&[2], lat, 111);
    let g = random_multi(&[3], lat, 112);
    let rep = semiclassical_commutator_check(&f, 0, &g, 1, &cfg, tau0, 113).unwrap();
    assert!(
        rep.pass,
        "adjacent commutator fit fails: max residual {:.3e}",
        rep.max_residual
    );
    let lambda = C64::new(rep.scalars["lambda"], rep.scalars["lambda_im"]);
    assert!(
        (lambda - C64::new(1.0, 0.0)).norm() < 0.05,
        "fitted scalar drifted from one: {lambda}"
    );

    // distant factors commute exactly
    let ch3 = SiteConfig::chain(
        vec![(vec![2], vec![2]), (vec![2], vec![2]), (vec![2], vec![2])],
        tau0,
        lat,
    )
    .unwrap();
    let a = random_multi(&[2], lat, 114);
    let b = random_multi(&[2], lat, 115);
    let rep2 = semiclassical_commutator_check(&a, 0, &b, 2, &ch3, tau0, 116).unwrap();
    assert!(rep2.pass, "distant commutator: {:.3e}", rep2.max_residual);
    assert_eq!(rep2.scalars["lambda"], 0.0);

    // an element against itself on one factor cancels exactly
    let rep3 = semiclassical_commutator_check(&a, 0, &a, 0, &ch3, tau0, 117).unwrap();
    assert!(rep3.pass, "self commutator: {:.3e}", rep3.max_residual);
}

#[test]
fn shift_table_mirrors_classical_constants() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.01, 0.005);
    let cfgs = vec![
        SiteConfig::chain(
            vec![(vec![3, 2], vec![2, 2]), (vec![2, 2], vec![2, 2])],
            tau,
            lat,
        )
        .unwrap(),
        SiteConfig::chain(
            vec![(vec![2], vec![2]), (vec![2], vec![2]), (vec![2], vec![2])],
            tau,
            lat,
        )
        .unwrap(),
        SiteConfig::single(vec![3], vec![3], tau, lat).unwrap(),
    ];
    let expect_scale = [5.0, 2.0, 3.0];
    for (cfg, scale) in cfgs.iter().zip(expect_scale) {
        let rep = semiclassical_shift_check(cfg).unwrap();
        assert!(rep.pass, "shift mirror fails: {:?}", rep.max_residual);
        assert_eq!(rep.max_residual, 0.0);
        assert_eq!(rep.scalars["tau_scaling"], scale);
    }
}

#[test]
fn normal_order_reports_exhausted_budget() {
    let lat = LatticeParams::standard();
    let tau = C64::new(0.01, 0.005);
    let cfg = SiteConfig::single(vec![2], vec![2], tau, lat).unwrap();
    let m = one_word(vec![gen(0, &[1]), gen(0, &[0]), gen(0, &[0])]);
    let err = normal_order_bounded(&[m.clone()], &cfg, Strategy::Leftmost, 1);
    assert!(matches!(err, Err(Error::DepthExceeded { bound: 1, .. })));
    let ok = normal_order_bounded(&[m], &cfg, Strategy::Leftmost, 2).unwrap();
    assert_eq!(ok.len(), 1);
    assert_eq!(
        ok[0].word,
        vec![gen(0, &[0]), gen(0, &[0]), gen(0, &[1])]
    );
}
