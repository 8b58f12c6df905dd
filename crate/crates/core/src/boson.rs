//! Generator algebras over site variables: meromorphic coefficients in site
//! variables `y` and chain parameters `z` multiply against ordered words of
//! generators, subject to exchange relations with theta-ratio kernels. Every
//! coefficient keeps its tau shifts exact (rational multiples of tau inside
//! linear argument combinations), so moving a coefficient through a word is
//! lossless and the shift table can be compared against the classical bracket
//! constants as rational numbers. On top of the rewriting engine sit the
//! embeddings of graded elements as generator sums and the semiclassical
//! comparisons against the classical tables.

use std::collections::BTreeMap;
use std::rc::Rc;

use num_rational::Rational64;

use crate::graded::{fit_scalar, SymElement};
use crate::lattice::{DomainSampler, LatticeParams};
use crate::seqcomb::d_seq;
use crate::tensor::{tensor_bracket, GeneratorBracketTable, TensorElement};
use crate::theta::theta_eval;
use crate::verify::VerifyReport;
use crate::{C64, Error, Result};

const TAU_2PI: f64 = std::f64::consts::TAU;
const RECIP_GUARD: f64 = 1e-12;

/// Rewrite budget for one normal-ordering call.
pub const REWRITE_BOUND: usize = 1_000_000;

/// How tau multiples enter the relations. `Absolute` uses whole continuant
/// shifts (the single-factor convention, kernels carry `n*tau`); `Ratio`
/// divides every shift by the factor's full continuant (the chain convention,
/// kernels carry plain `tau`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauConvention {
    Absolute,
    Ratio,
}

/// One tensor factor of the site algebra: its coordinate sequence and the
/// number of sites available at each coordinate position.
#[derive(Debug, Clone)]
pub struct SiteFactor {
    pub seq: Vec<u32>,
    pub sites: Vec<usize>,
}

/// Configuration of the full algebra: factors in chain order, the shift
/// convention, a default deformation parameter, and the evaluation lattice.
#[derive(Clone)]
pub struct SiteConfig {
    factors: Vec<SiteFactor>,
    pub convention: TauConvention,
    pub tau: C64,
    pub lattice: LatticeParams,
    d_full: Vec<i64>,
    d_pre: Vec<Vec<i64>>,
    d_suf: Vec<Vec<i64>>,
}

impl SiteConfig {
    pub fn new(
        factors: Vec<(Vec<u32>, Vec<usize>)>,
        convention: TauConvention,
        tau: C64,
        lattice: LatticeParams,
    ) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidSeq("no factors".into()));
        }
        if factors.len() > 120 {
            return Err(Error::InvalidParam("more than 120 factors".into()));
        }
        if convention == TauConvention::Absolute && factors.len() != 1 {
            return Err(Error::InvalidParam(
                "absolute shifts are a single-factor convention".into(),
            ));
        }
        let mut fs = Vec::with_capacity(factors.len());
        let (mut d_full, mut d_pre, mut d_suf) = (Vec::new(), Vec::new(), Vec::new());
        for (seq, sites) in factors {
            if seq.is_empty() || seq.iter().any(|&n| n < 2) {
                return Err(Error::InvalidSeq(format!("{seq:?}")));
            }
            if sites.len() != seq.len() || sites.iter().any(|&l| l == 0 || l > 64) {
                return Err(Error::InvalidParam(format!(
                    "site counts {sites:?} do not fit sequence {seq:?}"
                )));
            }
            let p = seq.len();
            d_full.push(d_seq(&seq)?);
            d_pre.push((0..p).map(|l| d_seq(&seq[..l]).unwrap()).collect());
            d_suf.push((0..p).map(|l| d_seq(&seq[l + 1..]).unwrap()).collect());
            fs.push(SiteFactor { seq, sites });
        }
        Ok(SiteConfig { factors: fs, convention, tau, lattice, d_full, d_pre, d_suf })
    }

    /// Single factor with whole-continuant shifts.
    pub fn single(seq: Vec<u32>, sites: Vec<usize>, tau: C64, lattice: LatticeParams) -> Result<Self> {
        SiteConfig::new(vec![(seq, sites)], TauConvention::Absolute, tau, lattice)
    }

    /// Chain of factors with continuant-ratio shifts.
    pub fn chain(factors: Vec<(Vec<u32>, Vec<usize>)>, tau: C64, lattice: LatticeParams) -> Result<Self> {
        SiteConfig::new(factors, TauConvention::Ratio, tau, lattice)
    }

    pub fn factors(&self) -> &[SiteFactor] {
        &self.factors
    }

    pub fn h(&self) -> usize {
        self.factors.len()
    }

    /// Validate a generator symbol against the declared factors and sites.
    pub fn check_gen(&self, g: &GenSym) -> Result<()> {
        let gamma = g.factor as usize;
        if gamma >= self.h() {
            return Err(Error::MalformedPattern(format!("factor {gamma} out of range")));
        }
        let fac = &self.factors[gamma];
        if g.tuple.len() != fac.seq.len() {
            return Err(Error::MalformedPattern(format!(
                "tuple {:?} does not fit a length-{} sequence",
                g.tuple,
                fac.seq.len()
            )));
        }
        for (lam, &s) in g.tuple.iter().enumerate() {
            if s as usize >= fac.sites[lam] {
                return Err(Error::MalformedPattern(format!(
                    "site {s} at position {lam} exceeds the declared {}",
                    fac.sites[lam]
                )));
            }
        }
        Ok(())
    }

    /// Tau multiple attached to a factor's kernels: the full continuant in
    /// the absolute convention, one in the ratio convention.
    fn tau_weight(&self, gamma: usize) -> Rational64 {
        match self.convention {
            TauConvention::Absolute => Rational64::from_integer(self.d_full[gamma]),
            TauConvention::Ratio => Rational64::from_integer(1),
        }
    }

    /// Ratio-form tau multiple a site variable picks up when a coefficient
    /// moves left past the generator `g`: within the generator's own factor
    /// the shift is minus the flanking-continuant ratio, plus one at the
    /// generator's own site; one factor above it is the suffix ratio, one
    /// factor below the prefix ratio; further factors are untouched.
    pub fn y_shift_ratio(&self, g: &GenSym, v: YVar) -> Rational64 {
        let gamma = g.factor as usize;
        let vf = v.factor as usize;
        let lam = v.pos as usize;
        if vf == gamma {
            let r = Rational64::new(self.d_pre[gamma][lam] + self.d_suf[gamma][lam], self.d_full[gamma]);
            if g.tuple[lam] == v.site {
                Rational64::from_integer(1) - r
            } else {
                -r
            }
        } else if vf == gamma + 1 {
            Rational64::new(self.d_suf[vf][lam], self.d_full[vf])
        } else if vf + 1 == gamma {
            Rational64::new(self.d_pre[vf][lam], self.d_full[vf])
        } else {
            Rational64::from_integer(0)
        }
    }

    /// Ratio-form tau multiple the chain parameter `z_nu` picks up when a
    /// coefficient moves left past `g`. The two far-side entries (one factor
    /// below the link and one above it) mirror the classical chain-parameter
    /// brackets, whose reciprocal-continuant corrections the Jacobi identity
    /// forces; two or more steps from the link the parameter is untouched.
    pub fn z_shift_ratio(&self, g: &GenSym, nu: usize) -> Rational64 {
        let gamma = g.factor as usize;
        if self.h() < 2 || nu + 1 >= self.h() {
            return Rational64::from_integer(0);
        }
        let (lo, up) = (nu, nu + 1);
        if gamma + 1 == lo {
            return -Rational64::new(1, self.d_full[lo]);
        }
        if gamma == up + 1 {
            return Rational64::new(1, self.d_full[up]);
        }
        if gamma != lo && gamma != up {
            return Rational64::from_integer(0);
        }
        let p_lo = self.factors[lo].seq.len();
        let suf2 = self.d_suf[up][0];
        let pre2 = self.d_pre[lo][p_lo - 1];
        if gamma == lo {
            Rational64::new(suf2, self.d_full[up]) + Rational64::new(pre2 + 1, self.d_full[lo])
        } else {
            -(Rational64::new(suf2 + 1, self.d_full[up]) + Rational64::new(pre2, self.d_full[lo]))
        }
    }

    /// Convention-scaled shift actually applied by the engine.
    pub fn y_shift(&self, g: &GenSym, v: YVar) -> Rational64 {
        let scale = match self.convention {
            TauConvention::Absolute => Rational64::from_integer(self.d_full[g.factor as usize]),
            TauConvention::Ratio => Rational64::from_integer(1),
        };
        self.y_shift_ratio(g, v) * scale
    }

    pub fn z_shift(&self, g: &GenSym, nu: usize) -> Rational64 {
        // the chain convention is the only one with chain parameters
        self.z_shift_ratio(g, nu)
    }
}

/// Site variable: factor, coordinate position within the factor's sequence,
/// and site index at that position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct YVar {
    pub factor: u8,
    pub pos: u8,
    pub site: u8,
}

/// Integer combination of site variables and chain parameters plus an exact
/// rational multiple of tau. All relation kernels and shifts act on these, so
/// substitution never loses exactness.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiteArg {
    ys: BTreeMap<YVar, i64>,
    zs: BTreeMap<u8, i64>,
    pub tau: Rational64,
}

impl SiteArg {
    pub fn var(v: YVar) -> Self {
        SiteArg::default().y(v, 1)
    }

    pub fn y(mut self, v: YVar, c: i64) -> Self {
        let e = self.ys.entry(v).or_insert(0);
        *e += c;
        if *e == 0 {
            self.ys.remove(&v);
        }
        self
    }

    pub fn z(mut self, nu: u8, c: i64) -> Self {
        let e = self.zs.entry(nu).or_insert(0);
        *e += c;
        if *e == 0 {
            self.zs.remove(&nu);
        }
        self
    }

    pub fn plus_tau(mut self, c: Rational64) -> Self {
        self.tau += c;
        self
    }

    fn shifted(&self, g: &GenSym, cfg: &SiteConfig) -> SiteArg {
        let mut out = self.clone();
        for (v, c) in &self.ys {
            out.tau += cfg.y_shift(g, *v) * Rational64::from_integer(*c);
        }
        for (nu, c) in &self.zs {
            out.tau += cfg.z_shift(g, *nu as usize) * Rational64::from_integer(*c);
        }
        out
    }

    fn validate(&self, cfg: &SiteConfig) -> Result<()> {
        for v in self.ys.keys() {
            let f = v.factor as usize;
            if f >= cfg.h()
                || v.pos as usize >= cfg.factors[f].seq.len()
                || v.site as usize >= cfg.factors[f].sites[v.pos as usize]
            {
                return Err(Error::UndeclaredVariable(format!(
                    "y[{},{},{}]",
                    v.factor, v.pos, v.site
                )));
            }
        }
        for nu in self.zs.keys() {
            if *nu as usize + 1 >= cfg.h() {
                return Err(Error::UndeclaredVariable(format!("z[{nu}]")));
            }
        }
        Ok(())
    }

    fn eval(&self, pt: &SitePoint, tau: C64) -> Result<C64> {
        let mut acc = tau * rat_f64(self.tau);
        for (v, c) in &self.ys {
            acc += pt.y(*v)? * (*c as f64);
        }
        for (nu, c) in &self.zs {
            acc += pt.z(*nu as usize)? * (*c as f64);
        }
        Ok(acc)
    }
}

fn rat_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Coefficient expression: closed under arithmetic, theta factors,
/// exponentials of linear arguments, and application of a graded element to
/// linear arguments. Shift substitution maps over every argument.
#[derive(Clone)]
pub enum CoeffExpr {
    Const(C64),
    /// theta of the argument.
    Theta(SiteArg),
    /// e^{2 pi i arg}.
    Exp(SiteArg),
    /// A graded element applied to linear arguments.
    Apply { elem: Rc<SymElement>, args: Vec<SiteArg> },
    Sum(Vec<CoeffExpr>),
    Prod(Vec<CoeffExpr>),
    Recip(Rc<CoeffExpr>),
}

impl CoeffExpr {
    pub fn one() -> Self {
        CoeffExpr::Const(C64::new(1.0, 0.0))
    }

    /// Every variable appearing anywhere in the expression must be declared
    /// by the configuration.
    pub fn validate(&self, cfg: &SiteConfig) -> Result<()> {
        match self {
            CoeffExpr::Const(_) => Ok(()),
            CoeffExpr::Theta(a) | CoeffExpr::Exp(a) => a.validate(cfg),
            CoeffExpr::Apply { args, .. } => args.iter().try_for_each(|a| a.validate(cfg)),
            CoeffExpr::Sum(v) | CoeffExpr::Prod(v) => v.iter().try_for_each(|e| e.validate(cfg)),
            CoeffExpr::Recip(e) => e.validate(cfg),
        }
    }

    /// Apply the substitution for moving this coefficient left past one
    /// generator.
    pub fn shifted(&self, g: &GenSym, cfg: &SiteConfig) -> CoeffExpr {
        match self {
            CoeffExpr::Const(c) => CoeffExpr::Const(*c),
            CoeffExpr::Theta(a) => CoeffExpr::Theta(a.shifted(g, cfg)),
            CoeffExpr::Exp(a) => CoeffExpr::Exp(a.shifted(g, cfg)),
            CoeffExpr::Apply { elem, args } => CoeffExpr::Apply {
                elem: elem.clone(),
                args: args.iter().map(|a| a.shifted(g, cfg)).collect(),
            },
            CoeffExpr::Sum(v) => CoeffExpr::Sum(v.iter().map(|e| e.shifted(g, cfg)).collect()),
            CoeffExpr::Prod(v) => CoeffExpr::Prod(v.iter().map(|e| e.shifted(g, cfg)).collect()),
            CoeffExpr::Recip(e) => CoeffExpr::Recip(Rc::new(e.shifted(g, cfg))),
        }
    }

    /// Shift past a whole word (the substitutions are translations, so the
    /// order of application does not matter).
    pub fn shifted_word(&self, word: &[GenSym], cfg: &SiteConfig) -> CoeffExpr {
        let mut out = self.clone();
        for g in word {
            out = out.shifted(g, cfg);
        }
        out
    }

    pub fn eval(&self, pt: &SitePoint, tau: C64, lat: &LatticeParams) -> Result<C64> {
        Ok(match self {
            CoeffExpr::Const(c) => *c,
            CoeffExpr::Theta(a) => theta_eval(a.eval(pt, tau)?, lat),
            CoeffExpr::Exp(a) => (C64::new(0.0, TAU_2PI) * a.eval(pt, tau)?).exp(),
            CoeffExpr::Apply { elem, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(a.eval(pt, tau)?);
                }
                elem.eval(&vals)
            }
            CoeffExpr::Sum(v) => {
                let mut acc = C64::new(0.0, 0.0);
                for e in v {
                    acc += e.eval(pt, tau, lat)?;
                }
                acc
            }
            CoeffExpr::Prod(v) => {
                let mut acc = C64::new(1.0, 0.0);
                for e in v {
                    acc *= e.eval(pt, tau, lat)?;
                }
                acc
            }
            CoeffExpr::Recip(e) => {
                let val = e.eval(pt, tau, lat)?;
                if val.norm() < RECIP_GUARD {
                    C64::new(f64::NAN, 0.0)
                } else {
                    C64::new(1.0, 0.0) / val
                }
            }
        })
    }
}

/// Product with constant folding and flattening.
fn cprod(parts: Vec<CoeffExpr>) -> CoeffExpr {
    let mut konst = C64::new(1.0, 0.0);
    let mut flat = Vec::new();
    let mut stack = parts;
    stack.reverse();
    while let Some(p) = stack.pop() {
        match p {
            CoeffExpr::Const(c) => konst *= c,
            CoeffExpr::Prod(v) => {
                for q in v.into_iter().rev() {
                    stack.push(q);
                }
            }
            other => flat.push(other),
        }
    }
    if konst == C64::new(0.0, 0.0) || flat.is_empty() {
        return CoeffExpr::Const(konst);
    }
    if konst != C64::new(1.0, 0.0) {
        flat.insert(0, CoeffExpr::Const(konst));
    }
    if flat.len() == 1 {
        return flat.pop().unwrap();
    }
    CoeffExpr::Prod(flat)
}

fn csum(parts: Vec<CoeffExpr>) -> CoeffExpr {
    let mut flat = Vec::new();
    for p in parts {
        match p {
            CoeffExpr::Const(c) if c == C64::new(0.0, 0.0) => {}
            CoeffExpr::Sum(v) => flat.extend(v),
            other => flat.push(other),
        }
    }
    match flat.len() {
        0 => CoeffExpr::Const(C64::new(0.0, 0.0)),
        1 => flat.pop().unwrap(),
        _ => CoeffExpr::Sum(flat),
    }
}

fn cneg(e: CoeffExpr) -> CoeffExpr {
    cprod(vec![CoeffExpr::Const(C64::new(-1.0, 0.0)), e])
}

/// One generator: its factor and the tuple of site indices, one per
/// coordinate position of that factor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GenSym {
    pub factor: u8,
    pub tuple: Vec<u8>,
}

/// A coefficient times an ordered word of generators. The coefficient always
/// sits to the left of the whole word.
#[derive(Clone)]
pub struct NCMonomial {
    pub coeff: CoeffExpr,
    pub word: Vec<GenSym>,
}

impl NCMonomial {
    pub fn new(coeff: CoeffExpr, word: Vec<GenSym>) -> Self {
        NCMonomial { coeff, word }
    }
}

/// Numeric assignment for every declared site variable and chain parameter.
pub struct SitePoint {
    ys: BTreeMap<YVar, C64>,
    zs: Vec<C64>,
}

impl SitePoint {
    /// Sample every variable; site values at one coordinate position stay
    /// separated by `margin` so kernel denominators keep their distance from
    /// zero.
    pub fn random(cfg: &SiteConfig, sampler: &mut DomainSampler, margin: f64) -> SitePoint {
        let mut ys = BTreeMap::new();
        for (gamma, fac) in cfg.factors.iter().enumerate() {
            for (lam, &l) in fac.sites.iter().enumerate() {
                let mut group = Vec::with_capacity(l);
                for mu in 0..l {
                    let v = sampler.point_separated(&group, margin);
                    group.push(v);
                    ys.insert(YVar { factor: gamma as u8, pos: lam as u8, site: mu as u8 }, v);
                }
            }
        }
        let zs = sampler.points(cfg.h().saturating_sub(1));
        SitePoint { ys, zs }
    }

    pub fn y(&self, v: YVar) -> Result<C64> {
        self.ys.get(&v).copied().ok_or_else(|| {
            Error::UndeclaredVariable(format!("y[{},{},{}]", v.factor, v.pos, v.site))
        })
    }

    pub fn z(&self, nu: usize) -> Result<C64> {
        self.zs.get(nu).copied().ok_or_else(|| Error::UndeclaredVariable(format!("z[{nu}]")))
    }
}

/// Public form of the substitution rule: the expression with every variable
/// shifted as if it had moved left past `gen`.
pub fn shift_past(gen: &GenSym, expr: &CoeffExpr, cfg: &SiteConfig) -> Result<CoeffExpr> {
    cfg.check_gen(gen)?;
    expr.validate(cfg)?;
    Ok(expr.shifted(gen, cfg))
}

/// Maximal runs of positions where the two tuples differ; each run is flanked
/// by shared positions or tuple boundaries. Returned as [start, end) pairs.
fn active_runs(a: &[u8], b: &[u8]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < a.len() {
        if a[i] != b[i] {
            let s = i;
            while i < a.len() && a[i] != b[i] {
                i += 1;
            }
            runs.push((s, i));
        } else {
            i += 1;
        }
    }
    runs
}

/// Relation terms for one same-factor pair and one maximal run: the full run
/// swap with the two-endpoint kernel, plus one mixed term per internal split
/// of the run. Each term is (kernel, new left generator, new right generator).
fn same_factor_terms(
    cfg: &SiteConfig,
    left: &GenSym,
    right: &GenSym,
    run: (usize, usize),
) -> Vec<(CoeffExpr, GenSym, GenSym)> {
    let gamma = left.factor;
    let t_w = cfg.tau_weight(gamma as usize);
    let (s, e) = run;
    let yv = |lam: usize, site: u8| YVar { factor: gamma, pos: lam as u8, site };
    let diff = |lam: usize| {
        SiteArg::default()
            .y(yv(lam, right.tuple[lam]), 1)
            .y(yv(lam, left.tuple[lam]), -1)
    };
    let d_first = diff(s);
    let d_last = diff(e - 1);
    let exp_part = CoeffExpr::Exp(SiteArg::default().plus_tau(-t_w));
    let first_ratio = vec![
        CoeffExpr::Theta(d_first.clone()),
        CoeffExpr::Recip(Rc::new(CoeffExpr::Theta(d_first.clone().plus_tau(-t_w)))),
    ];

    let swap_run = |gl: &GenSym, gr: &GenSym, upto: usize| -> (GenSym, GenSym) {
        let mut lt = gl.tuple.clone();
        let mut rt = gr.tuple.clone();
        for lam in s..upto {
            lt[lam] = gr.tuple[lam];
            rt[lam] = gl.tuple[lam];
        }
        (GenSym { factor: gamma, tuple: lt }, GenSym { factor: gamma, tuple: rt })
    };

    let mut out = Vec::new();
    // full swap of the run
    let main_kernel = if e - s == 1 {
        cprod(vec![
            exp_part.clone(),
            CoeffExpr::Theta(d_first.clone().plus_tau(t_w)),
            CoeffExpr::Recip(Rc::new(CoeffExpr::Theta(d_first.clone().plus_tau(-t_w)))),
        ])
    } else {
        let mut parts = vec![exp_part.clone()];
        parts.extend(first_ratio.clone());
        parts.push(CoeffExpr::Theta(d_last.clone().plus_tau(t_w)));
        parts.push(CoeffExpr::Recip(Rc::new(CoeffExpr::Theta(d_last.clone()))));
        cprod(parts)
    };
    let (ml, mr) = swap_run(left, right, e);
    out.push((main_kernel, ml, mr));

    // mixed terms: swap only the first k run positions
    for k in 1..(e - s) {
        let t = s + k - 1;
        let num = SiteArg::default()
            .y(yv(t, right.tuple[t]), 1)
            .y(yv(t + 1, right.tuple[t + 1]), 1)
            .y(yv(t, left.tuple[t]), -1)
            .y(yv(t + 1, left.tuple[t + 1]), -1);
        let mut parts = vec![
            exp_part.clone(),
            CoeffExpr::Theta(SiteArg::default().plus_tau(t_w)),
        ];
        parts.extend(first_ratio.clone());
        parts.push(CoeffExpr::Theta(num));
        parts.push(CoeffExpr::Recip(Rc::new(CoeffExpr::Theta(diff(t)))));
        parts.push(CoeffExpr::Recip(Rc::new(CoeffExpr::Theta(diff(t + 1)))));
        let (ml, mr) = swap_run(left, right, s + k);
        out.push((cprod(parts), ml, mr));
    }
    out
}

/// Kernel turning the ascending adjacent pair (lower factor, upper factor)
/// into the descending one. Built from the last coordinate of the lower
/// factor's generator, the first coordinate of the upper one, and the chain
/// parameter of the link, with half-tau offsets in both theta arguments.
fn cross_kernel(lo: &GenSym, hi: &GenSym) -> CoeffExpr {
    let gamma = lo.factor;
    let p_lo = lo.tuple.len();
    let u = YVar { factor: gamma, pos: (p_lo - 1) as u8, site: lo.tuple[p_lo - 1] };
    let v = YVar { factor: gamma + 1, pos: 0, site: hi.tuple[0] };
    let half = Rational64::new(1, 2);
    let down = SiteArg::default().y(v, 1).y(u, -1).z(gamma, -1);
    let up = SiteArg::default().y(u, 1).y(v, -1).z(gamma, 1);
    cprod(vec![
        CoeffExpr::Const(C64::new(-1.0, 0.0)),
        CoeffExpr::Exp(down.clone()),
        CoeffExpr::Theta(up.plus_tau(half)),
        CoeffExpr::Recip(Rc::new(CoeffExpr::Theta(down.plus_tau(half)))),
    ])
}

/// Relation terms for the pair at word positions `pos`, `pos+1` of one
/// monomial: same-factor pairs exchange through the run relation at the given
/// run, adjacent factors through the half-tau kernel (or its reciprocal for
/// the descending orientation), distant factors swap freely. Kernels are
/// shifted past the word prefix so coefficients stay on the far left.
fn apply_exchange(
    m: &NCMonomial,
    pos: usize,
    run: Option<(usize, usize)>,
    cfg: &SiteConfig,
) -> Vec<NCMonomial> {
    let left = &m.word[pos];
    let right = &m.word[pos + 1];
    let pieces: Vec<(CoeffExpr, GenSym, GenSym)> = if left.factor == right.factor {
        let run = run.expect("same-factor exchange needs a run");
        same_factor_terms(cfg, left, right, run)
    } else if left.factor + 1 == right.factor {
        vec![(cross_kernel(left, right), right.clone(), left.clone())]
    } else if right.factor + 1 == left.factor {
        let k = cross_kernel(right, left);
        vec![(CoeffExpr::Recip(Rc::new(k)), right.clone(), left.clone())]
    } else {
        vec![(CoeffExpr::one(), right.clone(), left.clone())]
    };
    let prefix = &m.word[..pos];
    pieces
        .into_iter()
        .map(|(kernel, g1, g2)| {
            let shifted = kernel.shifted_word(prefix, cfg);
            let mut word = Vec::with_capacity(m.word.len());
            word.extend_from_slice(prefix);
            word.push(g1);
            word.push(g2);
            word.extend_from_slice(&m.word[pos + 2..]);
            NCMonomial::new(cprod(vec![m.coeff.clone(), shifted]), word)
        })
        .collect()
}

/// Apply the exchange relation to the adjacent pair at `pos`, `pos+1`.
/// Same-factor pairs fire on their leading maximal run (identical tuples pass
/// through unchanged); pairs on different factors swap with the appropriate
/// kernel. The result is a sum of monomials equal to the input in the algebra.
pub fn exchange(m: &NCMonomial, pos: usize, cfg: &SiteConfig) -> Result<Vec<NCMonomial>> {
    if pos + 1 >= m.word.len() {
        return Err(Error::NonAdjacent(pos, pos + 1, m.word.len()));
    }
    for g in &m.word {
        cfg.check_gen(g)?;
    }
    let left = &m.word[pos];
    let right = &m.word[pos + 1];
    if left.factor == right.factor {
        let runs = active_runs(&left.tuple, &right.tuple);
        if runs.is_empty() {
            return Ok(vec![m.clone()]);
        }
        return Ok(apply_exchange(m, pos, Some(runs[0]), cfg));
    }
    Ok(apply_exchange(m, pos, None, cfg))
}

/// Exchange a same-factor pair on one chosen maximal run (runs are indexed
/// left to right). Exposes every relation instance a pair supports, not just
/// the leading one.
pub fn exchange_run(
    m: &NCMonomial,
    pos: usize,
    run_idx: usize,
    cfg: &SiteConfig,
) -> Result<Vec<NCMonomial>> {
    if pos + 1 >= m.word.len() {
        return Err(Error::NonAdjacent(pos, pos + 1, m.word.len()));
    }
    for g in &m.word {
        cfg.check_gen(g)?;
    }
    let left = &m.word[pos];
    let right = &m.word[pos + 1];
    if left.factor != right.factor {
        return Err(Error::MalformedPattern("run exchange needs a same-factor pair".into()));
    }
    let runs = active_runs(&left.tuple, &right.tuple);
    if run_idx >= runs.len() {
        return Err(Error::MalformedPattern(format!(
            "run {run_idx} of {} requested",
            runs.len()
        )));
    }
    Ok(apply_exchange(m, pos, Some(runs[run_idx]), cfg))
}

/// Reduction strategies: which fireable pair (and which run within it) a
/// normal-ordering step picks first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Leftmost,
    Rightmost,
}

/// A fireable rewrite inside one word.
enum Fire {
    Cross,
    Run((usize, usize)),
}

fn find_fire(word: &[GenSym], strategy: Strategy) -> Option<(usize, Fire)> {
    let n = word.len();
    if n < 2 {
        return None;
    }
    let scan: Vec<usize> = match strategy {
        Strategy::Leftmost => (0..n - 1).collect(),
        Strategy::Rightmost => (0..n - 1).rev().collect(),
    };
    for i in scan {
        let (l, r) = (&word[i], &word[i + 1]);
        if l.factor > r.factor {
            return Some((i, Fire::Cross));
        }
        if l.factor == r.factor && l.tuple != r.tuple {
            let runs = active_runs(&l.tuple, &r.tuple);
            let fireable: Vec<(usize, usize)> =
                runs.into_iter().filter(|&(s, _)| r.tuple[s] < l.tuple[s]).collect();
            if !fireable.is_empty() {
                let run = match strategy {
                    Strategy::Leftmost => fireable[0],
                    Strategy::Rightmost => fireable[fireable.len() - 1],
                };
                return Some((i, Fire::Run(run)));
            }
        }
    }
    None
}

/// Normal-order a sum of monomials: repeatedly fire exchanges that strictly
/// decrease the word in the (factor sequence, site-tuple sequence) ordering,
/// then merge coefficients word by word. Every fire decreases a well-founded
/// order, so the bound is a safety net, not the termination argument.
pub fn normal_order_bounded(
    terms: &[NCMonomial],
    cfg: &SiteConfig,
    strategy: Strategy,
    bound: usize,
) -> Result<Vec<NCMonomial>> {
    for m in terms {
        for g in &m.word {
            cfg.check_gen(g)?;
        }
    }
    let mut done: BTreeMap<Vec<GenSym>, Vec<CoeffExpr>> = BTreeMap::new();
    let mut work: Vec<NCMonomial> = terms.to_vec();
    let mut fires = 0usize;
    while let Some(m) = work.pop() {
        match find_fire(&m.word, strategy) {
            None => done.entry(m.word).or_default().push(m.coeff),
            Some((i, fire)) => {
                fires += 1;
                if fires > bound {
                    return Err(Error::DepthExceeded { bound, word: format!("{:?}", m.word) });
                }
                let run = match fire {
                    Fire::Cross => None,
                    Fire::Run(r) => Some(r),
                };
                work.extend(apply_exchange(&m, i, run, cfg));
            }
        }
    }
    Ok(done.into_iter().map(|(word, coeffs)| NCMonomial::new(csum(coeffs), word)).collect())
}

pub fn normal_order(terms: &[NCMonomial], cfg: &SiteConfig, strategy: Strategy) -> Result<Vec<NCMonomial>> {
    normal_order_bounded(terms, cfg, strategy, REWRITE_BOUND)
}

/// Product of two sums: words concatenate and the right coefficient moves
/// left through the left word.
pub fn nc_mul(a: &[NCMonomial], b: &[NCMonomial], cfg: &SiteConfig) -> Result<Vec<NCMonomial>> {
    for m in a.iter().chain(b) {
        for g in &m.word {
            cfg.check_gen(g)?;
        }
    }
    let mut out = Vec::with_capacity(a.len() * b.len());
    for ma in a {
        for mb in b {
            let moved = mb.coeff.shifted_word(&ma.word, cfg);
            let mut word = ma.word.clone();
            word.extend_from_slice(&mb.word);
            out.push(NCMonomial::new(cprod(vec![ma.coeff.clone(), moved]), word));
        }
    }
    Ok(out)
}

/// Merge a term list into one coefficient per word.
pub fn coeff_map(terms: &[NCMonomial]) -> BTreeMap<Vec<GenSym>, CoeffExpr> {
    let mut grouped: BTreeMap<Vec<GenSym>, Vec<CoeffExpr>> = BTreeMap::new();
    for m in terms {
        grouped.entry(m.word.clone()).or_default().push(m.coeff.clone());
    }
    grouped.into_iter().map(|(w, cs)| (w, csum(cs))).collect()
}

/// Evaluate every word's merged coefficient at one point.
pub fn eval_word_coeffs(
    terms: &[NCMonomial],
    pt: &SitePoint,
    tau: C64,
    lat: &LatticeParams,
) -> Result<BTreeMap<Vec<GenSym>, C64>> {
    let mut out = BTreeMap::new();
    for (w, c) in coeff_map(terms) {
        out.insert(w, c.eval(pt, tau, lat)?);
    }
    Ok(out)
}

fn site_tuples(cfg: &SiteConfig, factor: usize) -> Vec<Vec<u8>> {
    let sites = &cfg.factors[factor].sites;
    let mut out: Vec<Vec<u8>> = vec![Vec::new()];
    for &l in sites {
        let mut next = Vec::with_capacity(out.len() * l);
        for t in &out {
            for s in 0..l {
                let mut t2 = t.clone();
                t2.push(s as u8);
                next.push(t2);
            }
        }
        out = next;
    }
    out
}

/// Degree-one embedding: the sum over all site tuples of the element applied
/// to the matching site variables, times the tuple's generator.
pub fn x_embed(f: &SymElement, factor: usize, cfg: &SiteConfig) -> Result<Vec<NCMonomial>> {
    if factor >= cfg.h() {
        return Err(Error::InvalidParam(format!("factor {factor} out of range")));
    }
    if f.grade != 1 {
        return Err(Error::InvalidParam("degree-one embedding needs a grade-1 element".into()));
    }
    if f.seq != cfg.factors[factor].seq {
        return Err(Error::TagMismatch {
            expected: format!("{:?}", cfg.factors[factor].seq),
            found: format!("{:?}", f.seq),
        });
    }
    let elem = Rc::new(f.clone());
    let p = f.seq.len();
    let mut out = Vec::new();
    for tuple in site_tuples(cfg, factor) {
        let args: Vec<SiteArg> = (0..p)
            .map(|lam| {
                SiteArg::var(YVar { factor: factor as u8, pos: lam as u8, site: tuple[lam] })
            })
            .collect();
        let coeff = CoeffExpr::Apply { elem: elem.clone(), args };
        out.push(NCMonomial::new(coeff, vec![GenSym { factor: factor as u8, tuple }]));
    }
    Ok(out)
}

/// Degree-two extension of the embedding for a single-position factor: each
/// ordered site pair carries the theta-ratio weight (and each diagonal the
/// tau-offset evaluation) that makes the embedding multiplicative for the
/// deformed product. The weights are forced by expanding a product of two
/// degree-one embeddings and collecting ordered words; the product-embedding
/// test validates the rule coefficientwise.
pub fn x_embed2(h: &SymElement, cfg: &SiteConfig) -> Result<Vec<NCMonomial>> {
    if cfg.h() != 1 || cfg.factors[0].seq.len() != 1 {
        return Err(Error::InvalidParam(
            "degree-two embedding covers single-position single-factor configs".into(),
        ));
    }
    if h.grade != 2 {
        return Err(Error::InvalidParam("degree-two embedding needs a grade-2 element".into()));
    }
    if h.seq != cfg.factors[0].seq {
        return Err(Error::TagMismatch {
            expected: format!("{:?}", cfg.factors[0].seq),
            found: format!("{:?}", h.seq),
        });
    }
    let t_w = cfg.tau_weight(0);
    let elem = Rc::new(h.clone());
    let l = cfg.factors[0].sites[0];
    let yv = |site: usize| YVar { factor: 0, pos: 0, site: site as u8 };
    let mut out = Vec::new();
    for a in 0..l {
        for b in 0..l {
            if a == b {
                continue;
            }
            let d_ab = SiteArg::default().y(yv(a), 1).y(yv(b), -1);
            let coeff = cprod(vec![
                CoeffExpr::Const(C64::new(0.5, 0.0)),
                CoeffExpr::Apply {
                    elem: elem.clone(),
                    args: vec![SiteArg::var(yv(a)), SiteArg::var(yv(b))],
                },
                CoeffExpr::Theta(d_ab.clone()),
                CoeffExpr::Recip(Rc::new(CoeffExpr::Theta(d_ab.plus_tau(-t_w)))),
            ]);
            let word = vec![
                GenSym { factor: 0, tuple: vec![a as u8] },
                GenSym { factor: 0, tuple: vec![b as u8] },
            ];
            out.push(NCMonomial::new(coeff, word));
        }
    }
    for a in 0..l {
        let coeff = cprod(vec![
            CoeffExpr::Apply {
                elem: elem.clone(),
                args: vec![SiteArg::var(yv(a)), SiteArg::var(yv(a)).plus_tau(t_w)],
            },
            CoeffExpr::Theta(SiteArg::default().plus_tau(-t_w)),
            CoeffExpr::Recip(Rc::new(CoeffExpr::Theta(SiteArg::default().plus_tau(-t_w * 2)))),
        ]);
        let g = GenSym { factor: 0, tuple: vec![a as u8] };
        out.push(NCMonomial::new(coeff, vec![g.clone(), g]));
    }
    Ok(out)
}

/// Compare every ratio-form shift of the quantum relations against the
/// classical bracket-table constant, entry by entry, in exact rational
/// arithmetic. Also records the scaling between the absolute and ratio
/// conventions (the full continuant of the first factor).
pub fn semiclassical_shift_check(cfg: &SiteConfig) -> Result<VerifyReport> {
    let seqs: Vec<Vec<u32>> = cfg.factors.iter().map(|f| f.seq.clone()).collect();
    let table = GeneratorBracketTable::new(&seqs)?;
    let h = cfg.h();
    let mut residuals = Vec::new();
    for gamma in 0..h {
        let fac = &cfg.factors[gamma];
        let tuple: Vec<u8> = vec![0; fac.seq.len()];
        let g = GenSym { factor: gamma as u8, tuple };
        for vf in 0..h {
            for lam in 0..cfg.factors[vf].seq.len() {
                // site 1 is never the one the all-zeros generator holds
                let v = YVar { factor: vf as u8, pos: lam as u8, site: 1 };
                let quantum = cfg.y_shift_ratio(&g, v);
                let classical = table.x_constant(gamma, vf, lam);
                residuals.push(rat_f64(quantum - classical).abs());
                if vf == gamma {
                    let own = YVar { factor: vf as u8, pos: lam as u8, site: 0 };
                    let matching = cfg.y_shift_ratio(&g, own);
                    let gap = matching - quantum - Rational64::from_integer(1);
                    residuals.push(rat_f64(gap).abs());
                }
            }
        }
        for nu in 0..h.saturating_sub(1) {
            let quantum = cfg.z_shift_ratio(&g, nu);
            let classical = table.z_constant(gamma, nu);
            residuals.push(rat_f64(quantum - classical).abs());
        }
    }
    let report = VerifyReport::from_residuals("boson-shift-mirror", 0, 0.0, &residuals)
        .with_scalar("tau_scaling", cfg.d_full[0] as f64);
    Ok(report)
}

/// Finite-parameter commutator of two embedded degree-one elements against
/// the classical two-factor bracket. The commutator is normal-ordered once
/// symbolically; its word coefficients are evaluated at `tau0` and `tau0/2`
/// and Richardson-extrapolated, then fitted against the classical bracket
/// evaluated at the matching site assignment with one global scalar.
pub fn semiclassical_commutator_check(
    f: &SymElement,
    factor_f: usize,
    g: &SymElement,
    factor_g: usize,
    cfg: &SiteConfig,
    tau0: C64,
    seed: u64,
) -> Result<VerifyReport> {
    let xf = x_embed(f, factor_f, cfg)?;
    let xg = x_embed(g, factor_g, cfg)?;
    let fg = normal_order(&nc_mul(&xf, &xg, cfg)?, cfg, Strategy::Leftmost)?;
    let gf = normal_order(&nc_mul(&xg, &xf, cfg)?, cfg, Strategy::Leftmost)?;
    let map_fg = coeff_map(&fg);
    let map_gf = coeff_map(&gf);
    let mut words: Vec<Vec<GenSym>> = map_fg.keys().cloned().collect();
    for w in map_gf.keys() {
        if !words.contains(w) {
            words.push(w.clone());
        }
    }
    let comm_coeff = |w: &Vec<GenSym>| -> CoeffExpr {
        let zero = CoeffExpr::Const(C64::new(0.0, 0.0));
        let a = map_fg.get(w).cloned().unwrap_or_else(|| zero.clone());
        let b = map_gf.get(w).cloned().unwrap_or(zero);
        csum(vec![a, cneg(b)])
    };
    let mut sampler = cfg.lattice.sampler(seed);
    let points: Vec<SitePoint> =
        (0..3).map(|_| SitePoint::random(cfg, &mut sampler, 0.06)).collect();
    let lat = &cfg.lattice;

    let gap = factor_f.abs_diff(factor_g);
    if gap != 1 {
        // distant factors commute exactly; coinciding inputs cancel exactly
        let mut residuals = Vec::new();
        for w in &words {
            let c = comm_coeff(w);
            for pt in &points {
                for tau in [tau0, tau0 * 0.5] {
                    residuals.push(c.eval(pt, tau, lat)?.norm());
                }
            }
        }
        return Ok(VerifyReport::from_residuals("boson-commutator", seed, 1e-10, &residuals)
            .with_scalar("lambda", 0.0));
    }

    let seqs: Vec<Vec<u32>> = cfg.factors.iter().map(|fc| fc.seq.clone()).collect();
    let lift_f = TensorElement::from_factor(seqs.clone(), factor_f, f)?;
    let lift_g = TensorElement::from_factor(seqs, factor_g, g)?;
    let bracket = tensor_bracket(&lift_f, &lift_g)?;

    // symmetrizing over the parameter sign removes the odd orders, so the
    // two-step extrapolation is accurate to the fourth order
    let sym_slope = |c: &CoeffExpr, pt: &SitePoint, t: C64| -> Result<C64> {
        Ok((c.eval(pt, t, lat)? - c.eval(pt, -t, lat)?) / (t * 2.0))
    };
    let mut quantum = Vec::new();
    let mut classical = Vec::new();
    let mut drift = 0.0f64;
    for w in &words {
        let c = comm_coeff(w);
        for pt in &points {
            let t_full = sym_slope(&c, pt, tau0)?;
            let t_half = sym_slope(&c, pt, tau0 * 0.5)?;
            drift = drift.max((t_half - t_full).norm());
            quantum.push((t_half * 4.0 - t_full) / 3.0);

            let mut xs = vec![C64::new(0.0, 0.0); bracket.x_len()];
            for gen in w {
                let gamma = gen.factor as usize;
                for (lam, &site) in gen.tuple.iter().enumerate() {
                    let v = YVar { factor: gen.factor, pos: lam as u8, site };
                    xs[bracket.slot(gamma, lam, 0)] = pt.y(v)?;
                }
            }
            let zs: Vec<C64> = (0..cfg.h() - 1).map(|nu| pt.z(nu)).collect::<Result<_>>()?;
            classical.push(bracket.eval(&xs, &zs));
        }
    }
    let (lam, _) = fit_scalar(&quantum, &classical);
    let scale = classical.iter().map(|v| v.norm()).fold(1.0f64, f64::max);
    let residuals: Vec<f64> = quantum
        .iter()
        .zip(&classical)
        .map(|(q, c)| (q - lam * c).norm() / scale)
        .collect();
    Ok(VerifyReport::from_residuals("boson-commutator", seed, 1e-5, &residuals)
        .with_scalar("lambda", lam.re)
        .with_scalar("lambda_im", lam.im)
        .with_scalar("richardson_drift", drift))
}
