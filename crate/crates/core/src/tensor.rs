//! Chained multi-factor function spaces: block-symmetric meromorphic elements
//! over a list of factor sequences, the split-symmetrized product, the
//! encoding into generator words, and the Poisson bracket assembled from the
//! generator kernel table.
//!
//! An element of multidegree (a_1, ..., a_h) is a function of the variables
//! x_{mu,lam,t} (factor t, block lam, coordinate mu) and the chain parameters
//! z_0, ..., z_{h-2}; it is symmetric in each factor's blocks and obeys the
//! factor's lattice shift law in every variable. Brackets are computed by
//! expanding the bracket of two encoded word sums through the kernel table
//! and reading the coefficient of the diagonal word back off as a function.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use num_rational::Rational64;

use crate::error::Error;
use crate::graded::SymElement;
use crate::lattice::{frac_dist, DomainSampler, LatticeParams};
use crate::seqcomb::d_seq;
use crate::theta::{theta_deriv_k, theta_eval};
use crate::verify::VerifyReport;
use crate::{C64, Result};

/// Combined-degree cap for word encodings and brackets.
pub const TENSOR_DEGREE_CAP: u32 = 4;

const FD_STEP: f64 = 1e-4;
const TAU: f64 = std::f64::consts::TAU;
const PI: f64 = std::f64::consts::PI;

/// Evaluator over (x variables, z parameters).
pub type TensorEvalFn = Rc<dyn Fn(&[C64], &[C64]) -> C64>;
/// Mixed partial derivative: per-x orders and per-z orders.
pub type TensorDerivFn = Rc<dyn Fn(&[C64], &[C64], &[u32], &[u32]) -> C64>;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

fn fact(n: u32) -> i64 {
    (1..=n as i64).product::<i64>().max(1)
}

fn binom(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Sorted k-subsets of {0, .., n-1}.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k > n {
        return Vec::new();
    }
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Ordered k-tuples of distinct values from {0, .., d-1}.
fn injections(d: u8, k: usize) -> Vec<Vec<u8>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in injections(d, k - 1) {
        for v in 0..d {
            if !rest.contains(&v) {
                let mut next = rest.clone();
                next.push(v);
                out.push(next);
            }
        }
    }
    out
}

fn cartesian<T: Clone>(lists: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new()];
    for list in lists {
        let mut next = Vec::with_capacity(out.len() * list.len());
        for prefix in &out {
            for item in list {
                let mut row = prefix.clone();
                row.push(item.clone());
                next.push(row);
            }
        }
        out = next;
    }
    out
}

fn validate_seqs(seqs: &[Vec<u32>]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::InvalidSeq("no factor sequences".into()));
    }
    for s in seqs {
        if s.is_empty() || s.iter().any(|&n| n < 2) {
            return Err(Error::InvalidSeq(format!("{s:?}: entries must be >= 2, nonempty")));
        }
    }
    Ok(())
}

fn rat_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

// ---------------------------------------------------------------------------
// elements

/// A multigraded element: factor sequences, per-factor block counts, and an
/// evaluator over the flattened x variables (factor-major, block-next,
/// coordinate-last) plus the h-1 chain parameters.
#[derive(Clone)]
pub struct TensorElement {
    seqs: Vec<Vec<u32>>,
    degrees: Vec<u32>,
    lattice: LatticeParams,
    eval_fn: TensorEvalFn,
    deriv_fn: Option<TensorDerivFn>,
    deriv_cap: u32,
}

fn x_offsets(seqs: &[Vec<u32>], degrees: &[u32]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(seqs.len() + 1);
    let mut acc = 0usize;
    for (t, s) in seqs.iter().enumerate() {
        offs.push(acc);
        acc += degrees[t] as usize * s.len();
    }
    offs.push(acc);
    offs
}

impl TensorElement {
    /// Wrap explicit closures. `deriv_cap` bounds the total derivative order
    /// the closure supports; higher orders fall back to finite differences.
    pub fn from_raw(
        seqs: Vec<Vec<u32>>,
        degrees: Vec<u32>,
        lattice: LatticeParams,
        eval_fn: TensorEvalFn,
        deriv_fn: Option<TensorDerivFn>,
        deriv_cap: u32,
    ) -> Result<Self> {
        validate_seqs(&seqs)?;
        if degrees.len() != seqs.len() {
            return Err(Error::InvalidParam("one block count per factor required".into()));
        }
        Ok(TensorElement { seqs, degrees, lattice, eval_fn, deriv_fn, deriv_cap })
    }

    /// Lift a single-factor element into factor `t` of the chain; every other
    /// factor gets degree zero and the result ignores the chain parameters.
    pub fn from_factor(seqs: Vec<Vec<u32>>, t: usize, elem: &SymElement) -> Result<Self> {
        validate_seqs(&seqs)?;
        if t >= seqs.len() {
            return Err(Error::InvalidParam(format!("factor index {t} out of range")));
        }
        if elem.seq != seqs[t] {
            return Err(Error::InvalidParam(format!(
                "element sequence {:?} does not match factor {t} sequence {:?}",
                elem.seq, seqs[t]
            )));
        }
        if elem.tau_tag != zero() {
            return Err(Error::TagMismatch {
                expected: "tau = 0".into(),
                found: format!("tau = {}", elem.tau_tag),
            });
        }
        let mut degrees = vec![0u32; seqs.len()];
        degrees[t] = elem.grade;
        let lattice = elem.lattice;
        let e1 = elem.clone();
        let eval_fn: TensorEvalFn = Rc::new(move |xs, _zs| e1.eval(xs));
        let e2 = elem.clone();
        let deriv_fn: TensorDerivFn = Rc::new(move |xs, _zs, ox, oz| {
            if oz.iter().any(|&o| o > 0) {
                return zero();
            }
            let total: u32 = ox.iter().sum();
            match total {
                0 => e2.eval(xs),
                1 => {
                    let v = ox.iter().position(|&o| o > 0).unwrap();
                    e2.partial(xs, v)
                }
                2 => {
                    let mut vs = Vec::with_capacity(2);
                    for (i, &o) in ox.iter().enumerate() {
                        for _ in 0..o {
                            vs.push(i);
                        }
                    }
                    e2.partial2(xs, vs[0], vs[1])
                }
                _ => C64::new(f64::NAN, f64::NAN),
            }
        });
        Ok(TensorElement { seqs, degrees, lattice, eval_fn, deriv_fn: Some(deriv_fn), deriv_cap: 2 })
    }

    /// The `nu`-th chain parameter as a degree-zero element.
    pub fn from_z_coordinate(seqs: Vec<Vec<u32>>, lattice: LatticeParams, nu: usize) -> Result<Self> {
        validate_seqs(&seqs)?;
        if nu + 1 >= seqs.len() {
            return Err(Error::InvalidParam(format!("chain parameter index {nu} out of range")));
        }
        let degrees = vec![0u32; seqs.len()];
        let eval_fn: TensorEvalFn = Rc::new(move |_xs, zs| zs[nu]);
        let deriv_fn: TensorDerivFn = Rc::new(move |_xs, zs, ox, oz| {
            let total: u32 = ox.iter().sum::<u32>() + oz.iter().sum::<u32>();
            match total {
                0 => zs[nu],
                1 if oz[nu] == 1 => C64::new(1.0, 0.0),
                _ => zero(),
            }
        });
        Ok(TensorElement { seqs, degrees, lattice, eval_fn, deriv_fn: Some(deriv_fn), deriv_cap: u32::MAX })
    }

    /// Constant multiple with forwarded derivatives.
    pub fn scaled(&self, c: C64) -> Self {
        let e = self.eval_fn.clone();
        let eval_fn: TensorEvalFn = Rc::new(move |xs, zs| c * e(xs, zs));
        let deriv_fn = self.deriv_fn.clone().map(|d| {
            let df: TensorDerivFn = Rc::new(move |xs: &[C64], zs: &[C64], ox: &[u32], oz: &[u32]| c * d(xs, zs, ox, oz));
            df
        });
        TensorElement {
            seqs: self.seqs.clone(),
            degrees: self.degrees.clone(),
            lattice: self.lattice,
            eval_fn,
            deriv_fn,
            deriv_cap: self.deriv_cap,
        }
    }

    pub fn seqs(&self) -> &[Vec<u32>] {
        &self.seqs
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn lattice(&self) -> &LatticeParams {
        &self.lattice
    }

    /// Number of flattened x variables.
    pub fn x_len(&self) -> usize {
        *x_offsets(&self.seqs, &self.degrees).last().unwrap()
    }

    /// Flat index of x_{mu,lam,t}.
    pub fn slot(&self, t: usize, lam: usize, mu: usize) -> usize {
        x_offsets(&self.seqs, &self.degrees)[t] + lam * self.seqs[t].len() + mu
    }

    pub fn eval(&self, xs: &[C64], zs: &[C64]) -> C64 {
        debug_assert_eq!(xs.len(), self.x_len());
        debug_assert_eq!(zs.len(), self.seqs.len() - 1);
        (self.eval_fn)(xs, zs)
    }

    pub fn has_analytic_deriv(&self) -> bool {
        self.deriv_fn.is_some()
    }

    /// Mixed partial of the given per-variable orders; analytic up to the
    /// element's supported order, finite differences beyond it.
    pub fn partial_multi(&self, xs: &[C64], zs: &[C64], ox: &[u32], oz: &[u32]) -> C64 {
        let total: u32 = ox.iter().sum::<u32>() + oz.iter().sum::<u32>();
        if total == 0 {
            return self.eval(xs, zs);
        }
        if let Some(d) = &self.deriv_fn {
            if total <= self.deriv_cap {
                return d(xs, zs, ox, oz);
            }
        }
        // reduce the first outstanding order by a five-point stencil
        let h = FD_STEP;
        if let Some(i) = ox.iter().position(|&o| o > 0) {
            let mut ox2 = ox.to_vec();
            ox2[i] -= 1;
            let mut w = xs.to_vec();
            let mut probe = |s: f64| {
                w[i] = xs[i] + C64::new(s * h, 0.0);
                self.partial_multi(&w, zs, &ox2, oz)
            };
            let (f2p, f1p, f1m, f2m) = (probe(2.0), probe(1.0), probe(-1.0), probe(-2.0));
            return (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / C64::new(12.0 * h, 0.0);
        }
        let i = oz.iter().position(|&o| o > 0).unwrap();
        let mut oz2 = oz.to_vec();
        oz2[i] -= 1;
        let mut w = zs.to_vec();
        let mut probe = |s: f64| {
            w[i] = zs[i] + C64::new(s * h, 0.0);
            self.partial_multi(xs, &w, ox, &oz2)
        };
        let (f2p, f1p, f1m, f2m) = (probe(2.0), probe(1.0), probe(-1.0), probe(-2.0));
        (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / C64::new(12.0 * h, 0.0)
    }
}

fn check_compatible(f: &TensorElement, g: &TensorElement) -> Result<()> {
    if f.seqs != g.seqs {
        return Err(Error::InvalidParam("mismatched factor sequences".into()));
    }
    if f.lattice.eta != g.lattice.eta {
        return Err(Error::InvalidParam("mismatched lattice parameters".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// product

/// Split-symmetrized product: blocks of the result are distributed between
/// the factors in every way, matching the permutation-sum normalization
/// 1/(a! a'! ...) for block-symmetric inputs.
pub fn tensor_product(f: &TensorElement, g: &TensorElement) -> Result<TensorElement> {
    check_compatible(f, g)?;
    let seqs = f.seqs.clone();
    let h = seqs.len();
    let degrees: Vec<u32> = (0..h).map(|t| f.degrees[t] + g.degrees[t]).collect();
    let offs = x_offsets(&seqs, &degrees);

    // per split: result-slot indices in f-slot order and in g-slot order
    let per_factor: Vec<Vec<Vec<usize>>> = (0..h)
        .map(|t| combinations(degrees[t] as usize, f.degrees[t] as usize))
        .collect();
    let mut splits: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for choice in cartesian(&per_factor) {
        let mut fidx = Vec::new();
        let mut gidx = Vec::new();
        for t in 0..h {
            let p = seqs[t].len();
            let total = degrees[t] as usize;
            let fblocks = &choice[t];
            for &lam in fblocks {
                for mu in 0..p {
                    fidx.push(offs[t] + lam * p + mu);
                }
            }
            for lam in 0..total {
                if !fblocks.contains(&lam) {
                    for mu in 0..p {
                        gidx.push(offs[t] + lam * p + mu);
                    }
                }
            }
        }
        splits.push((fidx, gidx));
    }

    let (f1, g1, s1) = (f.clone(), g.clone(), splits.clone());
    let eval_fn: TensorEvalFn = Rc::new(move |xs, zs| {
        let mut acc = zero();
        for (fidx, gidx) in &s1 {
            let xf: Vec<C64> = fidx.iter().map(|&i| xs[i]).collect();
            let xg: Vec<C64> = gidx.iter().map(|&i| xs[i]).collect();
            acc += f1.eval(&xf, zs) * g1.eval(&xg, zs);
        }
        acc
    });

    let (f2, g2) = (f.clone(), g.clone());
    let zdim = h - 1;
    let deriv_fn: TensorDerivFn = Rc::new(move |xs, zs, ox, oz| {
        let mut acc = zero();
        for (fidx, gidx) in &splits {
            let xf: Vec<C64> = fidx.iter().map(|&i| xs[i]).collect();
            let xg: Vec<C64> = gidx.iter().map(|&i| xs[i]).collect();
            let oxf: Vec<u32> = fidx.iter().map(|&i| ox[i]).collect();
            let oxg: Vec<u32> = gidx.iter().map(|&i| ox[i]).collect();
            // distribute each z order between the two factors
            let ranges: Vec<Vec<u32>> = (0..zdim).map(|nu| (0..=oz[nu]).collect()).collect();
            for dist in cartesian(&ranges) {
                let mut coeff = 1.0f64;
                let mut ozf = vec![0u32; zdim];
                let mut ozg = vec![0u32; zdim];
                for nu in 0..zdim {
                    coeff *= binom(oz[nu], dist[nu]);
                    ozf[nu] = dist[nu];
                    ozg[nu] = oz[nu] - dist[nu];
                }
                acc += coeff
                    * f2.partial_multi(&xf, zs, &oxf, &ozf)
                    * g2.partial_multi(&xg, zs, &oxg, &ozg);
            }
        }
        acc
    });

    TensorElement::from_raw(seqs, degrees, f.lattice, eval_fn, Some(deriv_fn), u32::MAX)
}

// ---------------------------------------------------------------------------
// labels, words, coefficient expressions

/// One formal variable label: factor, coordinate position, copy index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct VarLabel {
    pub factor: u8,
    pub pos: u8,
    pub copy: u8,
}

/// One generator symbol: a factor index and the copy label at each coordinate.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct GenSymbol {
    pub factor: u8,
    pub copies: Vec<u8>,
}

impl GenSymbol {
    pub fn arg(&self, mu: usize) -> VarLabel {
        VarLabel { factor: self.factor, pos: mu as u8, copy: self.copies[mu] }
    }
}

/// A product of generator symbols in canonical (sorted) order.
pub type GeneratorWord = Vec<GenSymbol>;

/// Sort a symbol list; None when two symbols of one factor share a copy label
/// at the same coordinate (the word is zero by the nilpotency rule).
fn word_normalize(mut syms: Vec<GenSymbol>) -> Option<GeneratorWord> {
    syms.sort();
    for i in 0..syms.len() {
        for j in i + 1..syms.len() {
            if syms[i].factor == syms[j].factor
                && syms[i].copies.iter().zip(&syms[j].copies).any(|(a, b)| a == b)
            {
                return None;
            }
        }
    }
    Some(syms)
}

fn word_without(word: &[GenSymbol], idx: usize) -> Vec<GenSymbol> {
    let mut out = word.to_vec();
    out.remove(idx);
    out
}

/// Integer combination of labeled variables and chain parameters, used as a
/// theta argument.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
struct LinComb {
    xs: Vec<(VarLabel, i64)>,
    zs: Vec<(usize, i64)>,
}

impl LinComb {
    fn x(mut self, l: VarLabel, c: i64) -> Self {
        self.xs.push((l, c));
        self
    }

    fn z(mut self, nu: usize, c: i64) -> Self {
        self.zs.push((nu, c));
        self
    }

    fn done(mut self) -> Self {
        fn merge<K: Ord + Copy>(mut pairs: Vec<(K, i64)>) -> Vec<(K, i64)> {
            pairs.sort_by_key(|&(k, _)| k);
            let mut out: Vec<(K, i64)> = Vec::new();
            for (k, c) in pairs {
                if let Some(last) = out.last_mut() {
                    if last.0 == k {
                        last.1 += c;
                        continue;
                    }
                }
                out.push((k, c));
            }
            out.retain(|&(_, c)| c != 0);
            out
        }
        self.xs = merge(self.xs);
        self.zs = merge(self.zs);
        self
    }

    fn value(&self, a: &LabelAssign) -> C64 {
        let mut acc = zero();
        for &(l, c) in &self.xs {
            acc += a.get(l) * c as f64;
        }
        for &(nu, c) in &self.zs {
            acc += a.zs[nu] * c as f64;
        }
        acc
    }

    fn slope_x(&self, l: VarLabel) -> i64 {
        self.xs.iter().find(|&&(m, _)| m == l).map_or(0, |&(_, c)| c)
    }

    fn slope_z(&self, nu: usize) -> i64 {
        self.zs.iter().find(|&&(m, _)| m == nu).map_or(0, |&(_, c)| c)
    }
}

/// Point assignment for labeled variables and chain parameters.
#[derive(Clone, Debug, Default)]
pub struct LabelAssign {
    pub xs: BTreeMap<VarLabel, C64>,
    pub zs: Vec<C64>,
}

impl LabelAssign {
    fn get(&self, l: VarLabel) -> C64 {
        *self.xs.get(&l).expect("label without an assigned value")
    }
}

struct ElemNode {
    elem: TensorElement,
    map: Vec<VarLabel>,
}

/// Coefficient expression over labeled variables: exact rational and complex
/// constants, theta derivatives of integer label combinations, element
/// evaluations under a label map, and sums/products/reciprocals.
#[derive(Clone)]
enum Expr {
    Rat(Rational64),
    Const(C64),
    Theta { arg: LinComb, order: u32 },
    Elem { node: Rc<ElemNode>, ox: Vec<u32>, oz: Vec<u32> },
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
    Recip(Box<Expr>),
}

enum DVar {
    X(VarLabel),
    Z(usize),
}

fn rat_int(n: i64) -> Expr {
    Expr::Rat(Rational64::from_integer(n))
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Rat(r) if *r.numer() == 0)
}

fn sum_expr(terms: Vec<Expr>) -> Expr {
    let mut flat = Vec::with_capacity(terms.len());
    for t in terms {
        match t {
            Expr::Sum(inner) => flat.extend(inner),
            other => {
                if !is_zero(&other) {
                    flat.push(other);
                }
            }
        }
    }
    match flat.len() {
        0 => rat_int(0),
        1 => flat.pop().unwrap(),
        _ => Expr::Sum(flat),
    }
}

fn prod_expr(factors: Vec<Expr>) -> Expr {
    let mut flat = Vec::with_capacity(factors.len());
    let mut rat = Rational64::from_integer(1);
    let mut cst = C64::new(1.0, 0.0);
    let mut has_cst = false;
    for ftr in factors {
        match ftr {
            Expr::Prod(inner) => {
                for e in inner {
                    match e {
                        Expr::Rat(r) => rat *= r,
                        Expr::Const(c) => {
                            cst *= c;
                            has_cst = true;
                        }
                        other => flat.push(other),
                    }
                }
            }
            Expr::Rat(r) => rat *= r,
            Expr::Const(c) => {
                cst *= c;
                has_cst = true;
            }
            other => flat.push(other),
        }
    }
    if *rat.numer() == 0 {
        return rat_int(0);
    }
    let mut out = Vec::with_capacity(flat.len() + 2);
    if rat != Rational64::from_integer(1) {
        out.push(Expr::Rat(rat));
    }
    if has_cst {
        out.push(Expr::Const(cst));
    }
    out.extend(flat);
    match out.len() {
        0 => rat_int(1),
        1 => out.pop().unwrap(),
        _ => Expr::Prod(out),
    }
}

impl Expr {
    fn eval(&self, a: &LabelAssign, lat: &LatticeParams) -> C64 {
        match self {
            Expr::Rat(r) => C64::new(rat_f64(*r), 0.0),
            Expr::Const(c) => *c,
            Expr::Theta { arg, order } => theta_deriv_k(arg.value(a), *order, lat),
            Expr::Elem { node, ox, oz } => {
                let xs: Vec<C64> = node.map.iter().map(|&l| a.get(l)).collect();
                node.elem.partial_multi(&xs, &a.zs, ox, oz)
            }
            Expr::Sum(ts) => ts.iter().map(|t| t.eval(a, lat)).sum(),
            Expr::Prod(fs) => fs.iter().fold(C64::new(1.0, 0.0), |acc, f| acc * f.eval(a, lat)),
            Expr::Recip(e) => {
                let v = e.eval(a, lat);
                if v.norm() < 1e-12 {
                    // pole guard: poison the sample rather than blowing up
                    return C64::new(f64::NAN, f64::NAN);
                }
                1.0 / v
            }
        }
    }

    fn diff(&self, v: &DVar) -> Expr {
        match self {
            Expr::Rat(_) | Expr::Const(_) => rat_int(0),
            Expr::Theta { arg, order } => {
                let slope = match v {
                    DVar::X(l) => arg.slope_x(*l),
                    DVar::Z(nu) => arg.slope_z(*nu),
                };
                if slope == 0 {
                    rat_int(0)
                } else {
                    prod_expr(vec![rat_int(slope), Expr::Theta { arg: arg.clone(), order: order + 1 }])
                }
            }
            Expr::Elem { node, ox, oz } => match v {
                DVar::X(l) => match node.map.iter().position(|m| m == l) {
                    Some(i) => {
                        let mut ox2 = ox.clone();
                        ox2[i] += 1;
                        Expr::Elem { node: Rc::clone(node), ox: ox2, oz: oz.clone() }
                    }
                    None => rat_int(0),
                },
                DVar::Z(nu) => {
                    let mut oz2 = oz.clone();
                    oz2[*nu] += 1;
                    Expr::Elem { node: Rc::clone(node), ox: ox.clone(), oz: oz2 }
                }
            },
            Expr::Sum(ts) => sum_expr(ts.iter().map(|t| t.diff(v)).collect()),
            Expr::Prod(fs) => {
                let mut terms = Vec::new();
                for i in 0..fs.len() {
                    let d = fs[i].diff(v);
                    if is_zero(&d) {
                        continue;
                    }
                    let mut row = Vec::with_capacity(fs.len());
                    for (j, f) in fs.iter().enumerate() {
                        if j == i {
                            row.push(d.clone());
                        } else {
                            row.push(f.clone());
                        }
                    }
                    terms.push(prod_expr(row));
                }
                sum_expr(terms)
            }
            Expr::Recip(e) => {
                let d = e.diff(v);
                if is_zero(&d) {
                    return rat_int(0);
                }
                prod_expr(vec![
                    rat_int(-1),
                    d,
                    Expr::Recip(Box::new(prod_expr(vec![(**e).clone(), (**e).clone()]))),
                ])
            }
        }
    }
}

fn logd_expr(arg: LinComb) -> Expr {
    prod_expr(vec![
        Expr::Theta { arg: arg.clone(), order: 1 },
        Expr::Recip(Box::new(Expr::Theta { arg, order: 0 })),
    ])
}

// ---------------------------------------------------------------------------
// kernel table

/// The generator-pair kernel constants: continuant ratios for brackets of a
/// generator with a coordinate or chain parameter. Same-factor and adjacent-
/// factor generator pairs carry theta kernels assembled in [`tensor_bracket`];
/// pairs more than one factor apart commute.
pub struct GeneratorBracketTable {
    d_full: Vec<i64>,
    d_pre: Vec<Vec<i64>>,
    d_suf: Vec<Vec<i64>>,
}

impl GeneratorBracketTable {
    pub fn new(seqs: &[Vec<u32>]) -> Result<Self> {
        validate_seqs(seqs)?;
        let mut d_full = Vec::new();
        let mut d_pre = Vec::new();
        let mut d_suf = Vec::new();
        for s in seqs {
            let p = s.len();
            d_full.push(d_seq(s)?);
            d_pre.push((0..p).map(|mu| d_seq(&s[..mu])).collect::<Result<Vec<_>>>()?);
            d_suf.push((0..p).map(|mu| d_seq(&s[mu + 1..])).collect::<Result<Vec<_>>>()?);
        }
        Ok(GeneratorBracketTable { d_full, d_pre, d_suf })
    }

    /// Scalar in {e_t(u), x_{mu,lam,t'}} = c * e_t(u); zero when |t - t'| > 1.
    pub fn x_constant(&self, sym_factor: usize, var_factor: usize, var_pos: usize) -> Rational64 {
        if sym_factor == var_factor {
            -Rational64::new(
                self.d_pre[var_factor][var_pos] + self.d_suf[var_factor][var_pos],
                self.d_full[var_factor],
            )
        } else if var_factor == sym_factor + 1 {
            Rational64::new(self.d_suf[var_factor][var_pos], self.d_full[var_factor])
        } else if var_factor + 1 == sym_factor {
            Rational64::new(self.d_pre[var_factor][var_pos], self.d_full[var_factor])
        } else {
            Rational64::from_integer(0)
        }
    }

    /// Scalar in {e_t(u), z_nu} = c * e_t(u); zero when t is more than one
    /// step away from the ends of the chain link nu. The two far-side entries
    /// (one step below the link and one step above it) are forced by the
    /// Jacobi identity: the cyclic sum over three consecutive factors leaves
    /// an uncancelled derivative of each adjacent kernel unless the factor
    /// beyond a link end brackets with that link's parameter by exactly the
    /// reciprocal of the in-between continuant.
    pub fn z_constant(&self, sym_factor: usize, nu: usize) -> Rational64 {
        let (lo, up) = (nu, nu + 1);
        if sym_factor + 1 == lo {
            return -Rational64::new(1, self.d_full[lo]);
        }
        if sym_factor == up + 1 {
            return Rational64::new(1, self.d_full[up]);
        }
        if sym_factor != lo && sym_factor != up {
            return Rational64::from_integer(0);
        }
        let p_lo = self.d_pre[lo].len();
        let suf2 = self.d_suf[up][0];
        let pre2 = self.d_pre[lo][p_lo - 1];
        if sym_factor == lo {
            Rational64::new(suf2, self.d_full[up]) + Rational64::new(pre2 + 1, self.d_full[lo])
        } else {
            -(Rational64::new(suf2 + 1, self.d_full[up]) + Rational64::new(pre2, self.d_full[lo]))
        }
    }
}

// ---------------------------------------------------------------------------
// word encoding

fn canonical_map(seqs: &[Vec<u32>], degrees: &[u32]) -> Vec<VarLabel> {
    let mut map = Vec::new();
    for (t, s) in seqs.iter().enumerate() {
        for lam in 0..degrees[t] {
            for mu in 0..s.len() {
                map.push(VarLabel { factor: t as u8, pos: mu as u8, copy: lam as u8 });
            }
        }
    }
    map
}

fn canonical_assign(map: &[VarLabel], xs: &[C64], zs: &[C64]) -> LabelAssign {
    let mut a = LabelAssign { xs: BTreeMap::new(), zs: zs.to_vec() };
    for (i, &l) in map.iter().enumerate() {
        a.xs.insert(l, xs[i]);
    }
    a
}

/// All nonzero label assignments of an element's blocks: per factor and per
/// coordinate position an injective choice of copy labels for the blocks.
/// Returns (word, slot-to-label map) pairs.
fn enumerate_assignments(
    f: &TensorElement,
    labels: &[u32],
) -> Result<Vec<(GeneratorWord, Rc<Vec<VarLabel>>)>> {
    let h = f.seqs.len();
    let mut per_factor: Vec<Vec<Vec<Vec<u8>>>> = Vec::new(); // [t][choice][mu][lam]
    for t in 0..h {
        let alpha = f.degrees[t] as usize;
        let d = labels[t];
        if (alpha as u32) > d {
            return Err(Error::InvalidParam(format!(
                "factor {t}: {alpha} blocks need at least {alpha} labels, got {d}"
            )));
        }
        let p = f.seqs[t].len();
        let arrangements = injections(d as u8, alpha);
        let per_pos: Vec<Vec<Vec<u8>>> = vec![arrangements; p];
        per_factor.push(cartesian(&per_pos));
    }
    let mut out = Vec::new();
    for combo in cartesian(&per_factor) {
        let mut syms = Vec::new();
        let mut map = Vec::new();
        for t in 0..h {
            let p = f.seqs[t].len();
            let alpha = f.degrees[t] as usize;
            for lam in 0..alpha {
                let copies: Vec<u8> = (0..p).map(|mu| combo[t][mu][lam]).collect();
                for (mu, &c) in copies.iter().enumerate() {
                    map.push(VarLabel { factor: t as u8, pos: mu as u8, copy: c });
                }
                syms.push(GenSymbol { factor: t as u8, copies });
            }
        }
        let word = word_normalize(syms).expect("per-position injective labels cannot collide");
        out.push((word, Rc::new(map)));
    }
    Ok(out)
}

/// A finite word sum: canonical words with coefficient expressions over the
/// labeled variables.
pub struct WordSum {
    terms: BTreeMap<GeneratorWord, Expr>,
    labels: Vec<u32>,
    lattice: LatticeParams,
}

impl WordSum {
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn words(&self) -> impl Iterator<Item = &GeneratorWord> {
        self.terms.keys()
    }

    /// Coefficient of `word` at a point assignment (zero when absent).
    pub fn coeff_eval(&self, word: &GeneratorWord, a: &LabelAssign) -> C64 {
        self.terms.get(word).map_or(zero(), |e| e.eval(a, &self.lattice))
    }

    /// Word product with the nilpotency rule.
    pub fn mul(&self, other: &WordSum) -> Result<WordSum> {
        if self.labels != other.labels {
            return Err(Error::InvalidParam("mismatched label sets".into()));
        }
        let mut terms: BTreeMap<GeneratorWord, Expr> = BTreeMap::new();
        for (wa, ea) in &self.terms {
            for (wb, eb) in &other.terms {
                let mut syms = wa.clone();
                syms.extend(wb.iter().cloned());
                if let Some(w) = word_normalize(syms) {
                    let add = prod_expr(vec![ea.clone(), eb.clone()]);
                    let entry = terms.remove(&w).unwrap_or_else(|| rat_int(0));
                    terms.insert(w, sum_expr(vec![entry, add]));
                }
            }
        }
        Ok(WordSum { terms, labels: self.labels.clone(), lattice: self.lattice })
    }
}

/// Encode an element as its word sum over the given per-factor label sets:
/// the sum over all copy assignments of (element coefficient) x (one symbol
/// per block), normalized so the coefficient of each fully distinct word is
/// the element itself under the label map.
pub fn encode_x(f: &TensorElement, labels: &[u32]) -> Result<WordSum> {
    let h = f.seqs.len();
    if labels.len() != h {
        return Err(Error::InvalidParam("one label count per factor required".into()));
    }
    let total: u32 = f.degrees.iter().sum();
    if total > TENSOR_DEGREE_CAP {
        return Err(Error::GradeCap(total, TENSOR_DEGREE_CAP));
    }
    let norm: i64 = f.degrees.iter().map(|&a| fact(a)).product();
    let zlen = h - 1;
    let mut terms: BTreeMap<GeneratorWord, Expr> = BTreeMap::new();
    for (word, map) in enumerate_assignments(f, labels)? {
        let coeff = prod_expr(vec![
            Expr::Rat(Rational64::new(1, norm)),
            Expr::Elem {
                node: Rc::new(ElemNode { elem: f.clone(), map: map.as_ref().clone() }),
                ox: vec![0; map.len()],
                oz: vec![0; zlen],
            },
        ]);
        let entry = terms.remove(&word).unwrap_or_else(|| rat_int(0));
        terms.insert(word, sum_expr(vec![entry, coeff]));
    }
    Ok(WordSum { terms, labels: labels.to_vec(), lattice: f.lattice })
}

// ---------------------------------------------------------------------------
// the bracket

/// Poisson bracket of two elements, assembled by pairing every generator or
/// coefficient of the first encoding against every one of the second through
/// the kernel table and reading off the diagonal-word coefficient.
pub fn tensor_bracket(f: &TensorElement, g: &TensorElement) -> Result<TensorElement> {
    check_compatible(f, g)?;
    let seqs = f.seqs.clone();
    let h = seqs.len();
    let zlen = h - 1;
    let degrees: Vec<u32> = (0..h).map(|t| f.degrees[t] + g.degrees[t]).collect();
    let total: u32 = degrees.iter().sum();
    if total > TENSOR_DEGREE_CAP {
        return Err(Error::GradeCap(total, TENSOR_DEGREE_CAP));
    }
    let table = GeneratorBracketTable::new(&seqs)?;
    let fa = enumerate_assignments(f, &degrees)?;
    let ga = enumerate_assignments(g, &degrees)?;

    // diagonal target word: block lam of factor t carries copy lam everywhere
    let mut w0_syms = Vec::new();
    for (t, s) in seqs.iter().enumerate() {
        for lam in 0..degrees[t] {
            w0_syms.push(GenSymbol { factor: t as u8, copies: vec![lam as u8; s.len()] });
        }
    }
    let w0 = word_normalize(w0_syms).expect("diagonal word is nonzero");

    let norm: i64 = f
        .degrees
        .iter()
        .map(|&a| fact(a))
        .chain(g.degrees.iter().map(|&a| fact(a)))
        .product();

    let fnodes: Vec<Rc<ElemNode>> = fa
        .iter()
        .map(|(_, map)| Rc::new(ElemNode { elem: f.clone(), map: map.as_ref().clone() }))
        .collect();
    let gnodes: Vec<Rc<ElemNode>> = ga
        .iter()
        .map(|(_, map)| Rc::new(ElemNode { elem: g.clone(), map: map.as_ref().clone() }))
        .collect();

    let minus_two_pi_i = Expr::Const(C64::new(0.0, -TAU));
    let minus_pi_i = Expr::Const(C64::new(0.0, -PI));
    let mut terms: Vec<Expr> = Vec::new();

    for (ai, (aw, amap)) in fa.iter().enumerate() {
        let fexpr = Expr::Elem {
            node: Rc::clone(&fnodes[ai]),
            ox: vec![0; amap.len()],
            oz: vec![0; zlen],
        };
        for (bi, (bw, bmap)) in ga.iter().enumerate() {
            let gexpr = Expr::Elem {
                node: Rc::clone(&gnodes[bi]),
                ox: vec![0; bmap.len()],
                oz: vec![0; zlen],
            };
            let plain_is_w0 = {
                let mut syms = aw.clone();
                syms.extend(bw.iter().cloned());
                word_normalize(syms).as_ref() == Some(&w0)
            };

            if plain_is_w0 {
                // generator-generator kernels that keep the word
                for sa in aw.iter() {
                    for sb in bw.iter() {
                        let (ta, tb) = (sa.factor as usize, sb.factor as usize);
                        if ta == tb {
                            let p = seqs[ta].len();
                            let edge = |mu: usize| {
                                logd_expr(
                                    LinComb::default().x(sb.arg(mu), 1).x(sa.arg(mu), -1).done(),
                                )
                            };
                            let kern =
                                sum_expr(vec![edge(0), edge(p - 1), minus_two_pi_i.clone()]);
                            terms.push(prod_expr(vec![fexpr.clone(), gexpr.clone(), kern]));
                        } else if tb == ta + 1 {
                            let p = seqs[ta].len();
                            let arg = LinComb::default()
                                .x(sa.arg(p - 1), 1)
                                .x(sb.arg(0), -1)
                                .z(ta, 1)
                                .done();
                            let kern = sum_expr(vec![logd_expr(arg), minus_pi_i.clone()]);
                            terms.push(prod_expr(vec![fexpr.clone(), gexpr.clone(), kern]));
                        } else if ta == tb + 1 {
                            // reversed orientation of the adjacent kernel
                            let p = seqs[tb].len();
                            let arg = LinComb::default()
                                .x(sb.arg(p - 1), 1)
                                .x(sa.arg(0), -1)
                                .z(tb, 1)
                                .done();
                            let kern = sum_expr(vec![logd_expr(arg), minus_pi_i.clone()]);
                            terms.push(prod_expr(vec![
                                rat_int(-1),
                                fexpr.clone(),
                                gexpr.clone(),
                                kern,
                            ]));
                        }
                    }
                }
                // generators of the first factor against the second coefficient
                for sa in aw.iter() {
                    for (slot, l) in bmap.iter().enumerate() {
                        let c = table.x_constant(sa.factor as usize, l.factor as usize, l.pos as usize);
                        if *c.numer() != 0 {
                            let mut ox = vec![0; bmap.len()];
                            ox[slot] = 1;
                            terms.push(prod_expr(vec![
                                Expr::Rat(c),
                                fexpr.clone(),
                                Expr::Elem { node: Rc::clone(&gnodes[bi]), ox, oz: vec![0; zlen] },
                            ]));
                        }
                    }
                    for nu in 0..zlen {
                        let c = table.z_constant(sa.factor as usize, nu);
                        if *c.numer() != 0 {
                            let mut oz = vec![0; zlen];
                            oz[nu] = 1;
                            terms.push(prod_expr(vec![
                                Expr::Rat(c),
                                fexpr.clone(),
                                Expr::Elem {
                                    node: Rc::clone(&gnodes[bi]),
                                    ox: vec![0; bmap.len()],
                                    oz,
                                },
                            ]));
                        }
                    }
                }
                // first coefficient against generators of the second factor
                for sb in bw.iter() {
                    for (slot, l) in amap.iter().enumerate() {
                        let c = table.x_constant(sb.factor as usize, l.factor as usize, l.pos as usize);
                        if *c.numer() != 0 {
                            let mut ox = vec![0; amap.len()];
                            ox[slot] = 1;
                            terms.push(prod_expr(vec![
                                Expr::Rat(-c),
                                Expr::Elem { node: Rc::clone(&fnodes[ai]), ox, oz: vec![0; zlen] },
                                gexpr.clone(),
                            ]));
                        }
                    }
                    for nu in 0..zlen {
                        let c = table.z_constant(sb.factor as usize, nu);
                        if *c.numer() != 0 {
                            let mut oz = vec![0; zlen];
                            oz[nu] = 1;
                            terms.push(prod_expr(vec![
                                Expr::Rat(-c),
                                Expr::Elem {
                                    node: Rc::clone(&fnodes[ai]),
                                    ox: vec![0; amap.len()],
                                    oz,
                                },
                                gexpr.clone(),
                            ]));
                        }
                    }
                }
            }

            // same-factor swap kernels move to a different word; they reach
            // the diagonal exactly from mixed assignments
            for (ia, sa) in aw.iter().enumerate() {
                for (ib, sb) in bw.iter().enumerate() {
                    if sa.factor != sb.factor {
                        continue;
                    }
                    let t = sa.factor as usize;
                    let p = seqs[t].len();
                    for s in 1..p {
                        let mut c1 = sb.copies[..s].to_vec();
                        c1.extend_from_slice(&sa.copies[s..]);
                        let mut c2 = sa.copies[..s].to_vec();
                        c2.extend_from_slice(&sb.copies[s..]);
                        let mut syms = word_without(aw, ia);
                        syms.extend(word_without(bw, ib));
                        syms.push(GenSymbol { factor: sa.factor, copies: c1 });
                        syms.push(GenSymbol { factor: sa.factor, copies: c2 });
                        if word_normalize(syms).as_ref() != Some(&w0) {
                            continue;
                        }
                        let num = LinComb::default()
                            .x(sb.arg(s - 1), 1)
                            .x(sb.arg(s), 1)
                            .x(sa.arg(s - 1), -1)
                            .x(sa.arg(s), -1)
                            .done();
                        let den1 = LinComb::default().x(sb.arg(s - 1), 1).x(sa.arg(s - 1), -1).done();
                        let den2 = LinComb::default().x(sb.arg(s), 1).x(sa.arg(s), -1).done();
                        let kern = prod_expr(vec![
                            Expr::Theta { arg: LinComb::default(), order: 1 },
                            Expr::Theta { arg: num, order: 0 },
                            Expr::Recip(Box::new(Expr::Theta { arg: den1, order: 0 })),
                            Expr::Recip(Box::new(Expr::Theta { arg: den2, order: 0 })),
                        ]);
                        terms.push(prod_expr(vec![fexpr.clone(), gexpr.clone(), kern]));
                    }
                }
            }
        }
    }

    let expr = Rc::new(prod_expr(vec![Expr::Rat(Rational64::new(1, norm)), sum_expr(terms)]));
    let map = canonical_map(&seqs, &degrees);
    let lattice = f.lattice;

    let (e1, m1) = (Rc::clone(&expr), map.clone());
    let eval_fn: TensorEvalFn = Rc::new(move |xs, zs| {
        let a = canonical_assign(&m1, xs, zs);
        e1.eval(&a, &lattice)
    });

    let m2 = map.clone();

    type DerivCache = RefCell<HashMap<(Vec<u32>, Vec<u32>), Rc<Expr>>>;
    let cache: DerivCache = RefCell::new(HashMap::new());
    let deriv_fn: TensorDerivFn = Rc::new(move |xs, zs, ox, oz| {
        let key = (ox.to_vec(), oz.to_vec());
        let d = {
            let mut cache = cache.borrow_mut();
            Rc::clone(cache.entry(key).or_insert_with(|| {
                let mut e = (*expr).clone();
                for (i, &o) in ox.iter().enumerate() {
                    for _ in 0..o {
                        e = e.diff(&DVar::X(map[i]));
                    }
                }
                for (nu, &o) in oz.iter().enumerate() {
                    for _ in 0..o {
                        e = e.diff(&DVar::Z(nu));
                    }
                }
                Rc::new(e)
            }))
        };
        let a = canonical_assign(&m2, xs, zs);
        d.eval(&a, &lattice)
    });

    TensorElement::from_raw(seqs, degrees, lattice, eval_fn, Some(deriv_fn), u32::MAX)
}

/// Bracket of an element with the `nu`-th chain parameter: an exact rational
/// multiple of the element, accumulated from the kernel table over its blocks.
pub fn bracket_with_z(f: &TensorElement, nu: usize) -> Result<(Rational64, TensorElement)> {
    if nu + 1 >= f.seqs.len() {
        return Err(Error::InvalidParam(format!("chain parameter index {nu} out of range")));
    }
    let table = GeneratorBracketTable::new(&f.seqs)?;
    let mut scalar = Rational64::from_integer(0);
    for (t, &deg) in f.degrees.iter().enumerate() {
        scalar += table.z_constant(t, nu) * Rational64::from_integer(deg as i64);
    }
    let scaled = f.scaled(C64::new(rat_f64(scalar), 0.0));
    Ok((scalar, scaled))
}

// ---------------------------------------------------------------------------
// membership and the pole/vanishing conditions

/// Maximum relative residuals of the defining element properties at sampled
/// points: plain period, lattice shift law, and block symmetry.
#[derive(Debug, Clone, Copy)]
pub struct TensorMembership {
    pub max_period: f64,
    pub max_shift: f64,
    pub max_symmetry: f64,
}

fn rel_err(a: C64, b: C64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

/// Sample a point with every same-coordinate block pair and every adjacent
/// divisor argument kept away from the lattice.
pub fn sample_separated(
    f: &TensorElement,
    sampler: &mut DomainSampler,
    margin: f64,
) -> (Vec<C64>, Vec<C64>) {
    let eta = f.lattice.eta;
    let h = f.seqs.len();
    let mut best: Option<(Vec<C64>, Vec<C64>)> = None;
    for _ in 0..300 {
        let xs: Vec<C64> = (0..f.x_len()).map(|_| sampler.point()).collect();
        let zs: Vec<C64> = (0..h - 1).map(|_| sampler.point()).collect();
        let mut ok = true;
        'check: for t in 0..h {
            let p = f.seqs[t].len();
            let deg = f.degrees[t] as usize;
            for mu in 0..p {
                for a in 0..deg {
                    for b in a + 1..deg {
                        let w = xs[f.slot(t, a, mu)] - xs[f.slot(t, b, mu)];
                        if frac_dist(w, eta) < margin {
                            ok = false;
                            break 'check;
                        }
                    }
                }
            }
            if t + 1 < h {
                for bl in 0..deg {
                    for bh in 0..f.degrees[t + 1] as usize {
                        let w = xs[f.slot(t + 1, bh, 0)]
                            - xs[f.slot(t, bl, f.seqs[t].len() - 1)]
                            - zs[t];
                        if frac_dist(w, eta) < margin {
                            ok = false;
                            break 'check;
                        }
                    }
                }
            }
        }
        if ok {
            return (xs, zs);
        }
        best = Some((xs, zs));
    }
    best.expect("sampling produced no candidate")
}

/// Measure the defining properties of an element at `count` sampled points.
pub fn membership_residuals(f: &TensorElement, seed: u64, count: usize) -> TensorMembership {
    let lat = f.lattice;
    let mut sampler = lat.sampler(seed);
    let h = f.seqs.len();
    let mut rep = TensorMembership { max_period: 0.0, max_shift: 0.0, max_symmetry: 0.0 };
    for _ in 0..count {
        let (xs, zs) = sample_separated(f, &mut sampler, 0.08);
        let base = f.eval(&xs, &zs);
        for t in 0..h {
            let p = f.seqs[t].len();
            for lam in 0..f.degrees[t] as usize {
                for mu in 0..p {
                    let i = f.slot(t, lam, mu);
                    let mut w = xs.clone();
                    w[i] = xs[i] + C64::new(1.0, 0.0);
                    rep.max_period = rep.max_period.max(rel_err(f.eval(&w, &zs), base));
                    w[i] = xs[i] + lat.eta;
                    let left = if mu == 0 { zero() } else { xs[f.slot(t, lam, mu - 1)] };
                    let right = if mu + 1 == p { zero() } else { xs[f.slot(t, lam, mu + 1)] };
                    let arg = xs[i] * f.seqs[t][mu] as f64 - left - right;
                    let factor = (-C64::i() * TAU * arg).exp();
                    rep.max_shift = rep.max_shift.max(rel_err(f.eval(&w, &zs), factor * base));
                }
            }
            if f.degrees[t] >= 2 {
                let mut w = xs.clone();
                for mu in 0..p {
                    w.swap(f.slot(t, 0, mu), f.slot(t, 1, mu));
                }
                rep.max_symmetry = rep.max_symmetry.max(rel_err(f.eval(&w, &zs), base));
            }
        }
    }
    rep
}

fn divisor_list(f: &TensorElement) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for t in 0..f.seqs.len() - 1 {
        for bl in 0..f.degrees[t] as usize {
            for bh in 0..f.degrees[t + 1] as usize {
                out.push((t, bl, bh));
            }
        }
    }
    out
}

/// The element times theta of every adjacent divisor argument.
fn theta_cleared(f: &TensorElement, xs: &[C64], zs: &[C64]) -> C64 {
    let mut acc = f.eval(xs, zs);
    for (t, bl, bh) in divisor_list(f) {
        let arg = xs[f.slot(t + 1, bh, 0)] - xs[f.slot(t, bl, f.seqs[t].len() - 1)] - zs[t];
        acc *= theta_eval(arg, &f.lattice);
    }
    acc
}

fn lsq_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Check that the theta-cleared element stays bounded along rays into each
/// adjacent divisor: the log-log slope of its magnitude against the approach
/// distance must not be negative beyond the tolerance. A clean simple pole
/// gives slope 0, a holomorphic element a positive slope, a deeper pole a
/// negative one (reported as failure).
pub fn condition3_check(f: &TensorElement, seed: u64) -> VerifyReport {
    let suite = "tensor-condition3";
    let tol = 0.1;
    let divisors = divisor_list(f);
    if divisors.is_empty() {
        return VerifyReport::from_residuals(suite, seed, tol, &[]);
    }
    let mut sampler = f.lattice.sampler(seed);
    let mut residuals = Vec::new();
    let mut min_slope = f64::INFINITY;
    let dists: Vec<f64> = (0..7).map(|j| 10f64.powf(-2.0 - 0.5 * j as f64)).collect();
    for &(t, bl, bh) in &divisors {
        for _ray in 0..2 {
            let (mut xs, zs) = sample_separated(f, &mut sampler, 0.1);
            let phase = sampler.unit_box().re;
            let dir = (C64::i() * TAU * phase).exp();
            let anchor = xs[f.slot(t, bl, f.seqs[t].len() - 1)] + zs[t];
            let mut lnd = Vec::new();
            let mut lnv = Vec::new();
            let mut finite = true;
            for &d in &dists {
                xs[f.slot(t + 1, bh, 0)] = anchor + d * dir;
                let v = theta_cleared(f, &xs, &zs).norm();
                if !v.is_finite() || v == 0.0 {
                    finite = false;
                    break;
                }
                lnd.push(d.ln());
                lnv.push(v.ln());
            }
            let slope = if finite { lsq_slope(&lnd, &lnv) } else { f64::NEG_INFINITY };
            min_slope = min_slope.min(slope);
            residuals.push((-slope).max(0.0));
        }
    }
    VerifyReport::from_residuals(suite, seed, tol, &residuals).with_scalar("min_slope", min_slope)
}

/// Check that the theta-cleared element vanishes on the codimension-two
/// coincidence subspaces of each adjacent divisor pair. The on-subspace value
/// is estimated by averaging two points straddling the subspace, which has
/// quadratic error in the offset and never evaluates a kernel exactly at its
/// pole; magnitudes are normalized by the value at a nearby generic point.
pub fn condition4_check(f: &TensorElement, seed: u64) -> VerifyReport {
    let suite = "tensor-condition4";
    let tol = 1e-8;
    let h = f.seqs.len();
    enum Subspace {
        // x(t+1, m1, 0) = x(t+1, m2, 0) = x(t, m3, p-1) + z
        TwoHigh { t: usize, m1: usize, m2: usize, m3: usize },
        // x(t+1, m1, 0) = x(t, m2, p-1) + z = x(t, m3, p-1) + z
        TwoLow { t: usize, m1: usize, m2: usize, m3: usize },
    }
    let mut subspaces = Vec::new();
    for t in 0..h - 1 {
        let (dl, dh) = (f.degrees[t] as usize, f.degrees[t + 1] as usize);
        if dh >= 2 && dl >= 1 {
            for m1 in 0..dh {
                for m2 in m1 + 1..dh {
                    for m3 in 0..dl {
                        subspaces.push(Subspace::TwoHigh { t, m1, m2, m3 });
                    }
                }
            }
        }
        if dl >= 2 && dh >= 1 {
            for m2 in 0..dl {
                for m3 in m2 + 1..dl {
                    for m1 in 0..dh {
                        subspaces.push(Subspace::TwoLow { t, m1, m2, m3 });
                    }
                }
            }
        }
    }
    if subspaces.is_empty() {
        return VerifyReport::from_residuals(suite, seed, tol, &[]);
    }
    let mut sampler = f.lattice.sampler(seed);
    let mut residuals = Vec::new();
    for sub in &subspaces {
        for _rep in 0..3 {
            let (mut xs, zs) = sample_separated(f, &mut sampler, 0.08);
            let (sa, sb) = match *sub {
                Subspace::TwoHigh { t, m1, m2, m3 } => {
                    let p = f.seqs[t].len();
                    let anchor = xs[f.slot(t, m3, p - 1)] + zs[t];
                    xs[f.slot(t + 1, m1, 0)] = anchor;
                    xs[f.slot(t + 1, m2, 0)] = anchor;
                    (f.slot(t + 1, m1, 0), f.slot(t + 1, m2, 0))
                }
                Subspace::TwoLow { t, m1, m2, m3 } => {
                    let p = f.seqs[t].len();
                    xs[f.slot(t, m3, p - 1)] = xs[f.slot(t, m2, p - 1)];
                    xs[f.slot(t + 1, m1, 0)] = xs[f.slot(t, m2, p - 1)] + zs[t];
                    (f.slot(t + 1, m1, 0), f.slot(t, m3, p - 1))
                }
            };
            let delta = 3e-6;
            let ua = (C64::i() * TAU * sampler.unit_box().re).exp();
            let ub = ua * C64::i();
            let mut plus = xs.clone();
            plus[sa] += delta * ua;
            plus[sb] += delta * ub;
            let mut minus = xs.clone();
            minus[sa] -= delta * ua;
            minus[sb] -= delta * ub;
            let on =
                ((theta_cleared(f, &plus, &zs) + theta_cleared(f, &minus, &zs)) / 2.0).norm();
            let mut off = xs.clone();
            off[sa] += C64::new(0.23, 0.11);
            off[sb] += C64::new(-0.17, 0.19);
            let scale = theta_cleared(f, &off, &zs).norm().max(1.0);
            residuals.push(if on.is_finite() { on / scale } else { f64::INFINITY });
        }
    }
    VerifyReport::from_residuals(suite, seed, tol, &residuals)
}
