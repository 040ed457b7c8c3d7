//! Rational normal form for expression trees.
//!
//! Every tree is flattened into a ratio of multivariate polynomials whose
//! indeterminates are either variables or *kernels*: opaque, canonicalised
//! non-rational subtrees such as `sin(P/Q)` or `x^(1/2)`. The form is reduced
//! so that no common monomial content remains, the denominator's leading
//! coefficient is +1, and a numerator proportional to its denominator
//! collapses to a constant. Two trees with identical forms are symbolically
//! equal; forms that differ are settled (or left undecided) by a numeric
//! falsifier on random domain points.
//!
//! This is deliberately not a full computer-algebra system: polynomial GCDs
//! beyond monomial content are not computed, and no trigonometric identities
//! are applied beyond kernel-argument equality.

use super::{ExprError, ExprNode, ExprTree, Literal, Token};
use num_bigint::BigInt;
use num_rational::{BigRational, Rational64};
use num_traits::{One, ToPrimitive, Zero};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Largest |integer| exponent that is expanded into repeated multiplication;
/// beyond this, `pow` stays an opaque kernel.
const MAX_EXPANDED_POW: i64 = 12;

/// Relative tolerance for comparing float-derived coefficients.
const COEFF_REL_TOL: f64 = 1e-9;

/// Number of random probe points used by the numeric falsifier.
const FALSIFIER_POINTS: usize = 30;

/// Relative tolerance for the numeric falsifier.
const FALSIFIER_REL_TOL: f64 = 1e-9;

/// Three-valued outcome of a symbolic-equivalence check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equivalence {
    /// Canonical forms are identical.
    Equal,
    /// A probe point separates the two expressions.
    NotEqual,
    /// Forms differ but no probe point separates them (e.g. identities the
    /// normal form does not know about). Never counted as a recovery.
    Undecided,
}

/// A non-rational subexpression kept opaque inside the polynomial form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum KernelKind {
    Sin,
    Cos,
    Exp,
    Log,
    /// `base^r` for a non-integer rational exponent (`sqrt` is `r = 1/2`).
    PowRational(BigRational),
    /// `pow(base, exponent)` with a non-constant exponent.
    PowGeneral,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Kernel {
    pub kind: KernelKind,
    pub args: Vec<RationalForm>,
}

/// Polynomial indeterminate: a variable or an opaque kernel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Atom {
    Var(u8),
    Kernel(Box<Kernel>),
}

/// Product of atom powers, sorted by atom; empty = the constant monomial.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Monomial(Vec<(Atom, u32)>);

/// Sparse polynomial with exact rational coefficients; zero coefficients are
/// never stored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Poly(BTreeMap<Monomial, BigRational>);

/// Reduced ratio of polynomials.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RationalForm {
    pub num: Poly,
    pub den: Poly,
}

/// Canonical form of a tree: a reduced rational form, or `Undefined` when the
/// tree divides by an exact zero polynomial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CanonicalForm {
    Defined(RationalForm),
    Undefined,
}

impl PartialOrd for Poly {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Poly {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.iter().cmp(other.0.iter())
    }
}

impl Monomial {
    fn one() -> Self {
        Monomial(Vec::new())
    }

    fn var(i: u8) -> Self {
        Monomial(vec![(Atom::Var(i), 1)])
    }

    fn kernel(k: Kernel) -> Self {
        Monomial(vec![(Atom::Kernel(Box::new(k)), 1)])
    }

    fn mul(&self, other: &Monomial) -> Monomial {
        let mut powers: BTreeMap<Atom, u32> = BTreeMap::new();
        for (a, p) in self.0.iter().chain(other.0.iter()) {
            *powers.entry(a.clone()).or_insert(0) += p;
        }
        Monomial(powers.into_iter().collect())
    }

    /// Divides by `atom^p`; caller guarantees the power is present.
    fn div_atom(&self, atom: &Atom, p: u32) -> Monomial {
        Monomial(
            self.0
                .iter()
                .filter_map(|(a, q)| {
                    if a == atom {
                        let r = q - p;
                        (r > 0).then(|| (a.clone(), r))
                    } else {
                        Some((a.clone(), *q))
                    }
                })
                .collect(),
        )
    }

    fn power_of(&self, atom: &Atom) -> u32 {
        self.0
            .iter()
            .find(|(a, _)| a == atom)
            .map(|(_, p)| *p)
            .unwrap_or(0)
    }
}

impl Poly {
    fn zero() -> Self {
        Poly(BTreeMap::new())
    }

    fn one() -> Self {
        Poly::constant(BigRational::one())
    }

    fn constant(c: BigRational) -> Self {
        let mut m = BTreeMap::new();
        if !c.is_zero() {
            m.insert(Monomial::one(), c);
        }
        Poly(m)
    }

    fn monomial(m: Monomial) -> Self {
        Poly(BTreeMap::from([(m, BigRational::one())]))
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    fn is_one(&self) -> bool {
        self.as_constant().map(|c| c.is_one()).unwrap_or(false)
    }

    /// The value of a constant polynomial, if it is one.
    fn as_constant(&self) -> Option<BigRational> {
        if self.0.is_empty() {
            return Some(BigRational::zero());
        }
        if self.0.len() == 1 {
            if let Some(c) = self.0.get(&Monomial::one()) {
                return Some(c.clone());
            }
        }
        None
    }

    fn add(&self, other: &Poly) -> Poly {
        let mut out = self.0.clone();
        for (m, c) in &other.0 {
            let entry = out.entry(m.clone()).or_insert_with(BigRational::zero);
            *entry += c;
            if entry.is_zero() {
                out.remove(m);
            }
        }
        Poly(out)
    }

    fn neg(&self) -> Poly {
        Poly(self.0.iter().map(|(m, c)| (m.clone(), -c.clone())).collect())
    }

    fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.neg())
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out: BTreeMap<Monomial, BigRational> = BTreeMap::new();
        for (ma, ca) in &self.0 {
            for (mb, cb) in &other.0 {
                let m = ma.mul(mb);
                let entry = out.entry(m.clone()).or_insert_with(BigRational::zero);
                *entry += ca * cb;
                if entry.is_zero() {
                    out.remove(&m);
                }
            }
        }
        Poly(out)
    }

    fn scale(&self, c: &BigRational) -> Poly {
        if c.is_zero() {
            return Poly::zero();
        }
        Poly(self.0.iter().map(|(m, v)| (m.clone(), v * c)).collect())
    }

    /// Leading (greatest) monomial and its coefficient.
    fn leading(&self) -> Option<(&Monomial, &BigRational)> {
        self.0.iter().next_back()
    }

    /// All atoms appearing anywhere in the polynomial.
    fn atoms(&self) -> Vec<Atom> {
        let mut out: Vec<Atom> = Vec::new();
        for m in self.0.keys() {
            for (a, _) in &m.0 {
                if !out.contains(a) {
                    out.push(a.clone());
                }
            }
        }
        out
    }

    /// Minimum power of `atom` across all monomials (0 if any lacks it).
    fn min_power(&self, atom: &Atom) -> u32 {
        self.0
            .keys()
            .map(|m| m.power_of(atom))
            .min()
            .unwrap_or(0)
    }

    fn div_atom_power(&self, atom: &Atom, p: u32) -> Poly {
        Poly(
            self.0
                .iter()
                .map(|(m, c)| (m.div_atom(atom, p), c.clone()))
                .collect(),
        )
    }
}

impl RationalForm {
    fn constant(c: BigRational) -> Self {
        RationalForm {
            num: Poly::constant(c),
            den: Poly::one(),
        }
    }

    fn from_poly(p: Poly) -> Self {
        RationalForm {
            num: p,
            den: Poly::one(),
        }
    }

    fn add(&self, other: &Self) -> Self {
        reduce(
            self.num.mul(&other.den).add(&other.num.mul(&self.den)),
            self.den.mul(&other.den),
        )
    }

    fn sub(&self, other: &Self) -> Self {
        reduce(
            self.num.mul(&other.den).sub(&other.num.mul(&self.den)),
            self.den.mul(&other.den),
        )
    }

    fn mul(&self, other: &Self) -> Self {
        reduce(self.num.mul(&other.num), self.den.mul(&other.den))
    }

    /// None when dividing by an exact zero.
    fn div(&self, other: &Self) -> Option<Self> {
        if other.num.is_zero() {
            return None;
        }
        Some(reduce(
            self.num.mul(&other.den),
            self.den.mul(&other.num),
        ))
    }

    fn as_constant(&self) -> Option<BigRational> {
        if self.den.is_one() {
            self.num.as_constant()
        } else {
            None
        }
    }

    /// Integer power by repeated multiplication (`n >= 0`).
    fn powi(&self, n: u32) -> Self {
        let mut out = RationalForm::constant(BigRational::one());
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }

    /// Detects a bare `log(u)` / `exp(u)` form (single unit-coefficient
    /// kernel monomial over denominator 1) and returns the kernel argument.
    fn as_bare_kernel(&self, kind: &KernelKind) -> Option<RationalForm> {
        if !self.den.is_one() || self.num.0.len() != 1 {
            return None;
        }
        let (m, c) = self.num.0.iter().next()?;
        if !c.is_one() || m.0.len() != 1 {
            return None;
        }
        let (atom, p) = &m.0[0];
        if *p != 1 {
            return None;
        }
        if let Atom::Kernel(k) = atom {
            if k.kind == *kind {
                return Some(k.args[0].clone());
            }
        }
        None
    }
}

/// Reduces `num/den`: divides out common monomial content, normalises the
/// denominator's leading coefficient to +1, and collapses a numerator
/// proportional to its denominator into a constant.
fn reduce(mut num: Poly, mut den: Poly) -> RationalForm {
    debug_assert!(!den.is_zero(), "reduce called with zero denominator");
    if num.is_zero() {
        return RationalForm {
            num: Poly::zero(),
            den: Poly::one(),
        };
    }
    // Common monomial content.
    for atom in den.atoms() {
        let p = num.min_power(&atom).min(den.min_power(&atom));
        if p > 0 {
            num = num.div_atom_power(&atom, p);
            den = den.div_atom_power(&atom, p);
        }
    }
    // Denominator leading coefficient +1.
    let lead = den
        .leading()
        .map(|(_, c)| c.clone())
        .expect("non-zero denominator");
    let inv = BigRational::one() / lead;
    num = num.scale(&inv);
    den = den.scale(&inv);
    // Identical-pair cancellation: num == c * den.
    if num.0.len() == den.0.len()
        && num.0.keys().eq(den.0.keys())
    {
        let (m0, c0) = num.0.iter().next().expect("non-empty");
        let ratio = c0 / &den.0[m0];
        if num
            .0
            .iter()
            .all(|(m, c)| c == &(&ratio * &den.0[m]))
        {
            return RationalForm {
                num: Poly::constant(ratio),
                den: Poly::one(),
            };
        }
    }
    RationalForm { num, den }
}

/// Canonicalises a tree into its rational normal form.
///
/// Constant placeholders must be bound first (see
/// [`ExprTree::bind_constants`]); an unresolved placeholder is an error.
pub fn canonicalize(tree: &ExprTree) -> Result<CanonicalForm, ExprError> {
    let n = tree.const_count();
    if n > 0 {
        return Err(ExprError::ConstCount {
            expected: 0,
            given: n,
        });
    }
    Ok(match form_of(&tree.root) {
        Some(f) => CanonicalForm::Defined(f),
        None => CanonicalForm::Undefined,
    })
}

fn form_of(node: &ExprNode) -> Option<RationalForm> {
    match node.token {
        Token::Var(i) => Some(RationalForm::from_poly(Poly::monomial(Monomial::var(i)))),
        Token::Literal(Literal::Rational(r)) => Some(RationalForm::constant(rat64_to_big(r))),
        Token::Literal(Literal::Float(v)) => BigRational::from_float(v).map(RationalForm::constant),
        Token::Const => unreachable!("checked by canonicalize"),
        Token::Add => Some(form_of(&node.children[0])?.add(&form_of(&node.children[1])?)),
        Token::Sub => Some(form_of(&node.children[0])?.sub(&form_of(&node.children[1])?)),
        Token::Mul => Some(form_of(&node.children[0])?.mul(&form_of(&node.children[1])?)),
        Token::Div => form_of(&node.children[0])?.div(&form_of(&node.children[1])?),
        Token::Pow2 => Some(form_of(&node.children[0])?.powi(2)),
        Token::Pow3 => Some(form_of(&node.children[0])?.powi(3)),
        Token::Pow4 => Some(form_of(&node.children[0])?.powi(4)),
        Token::Pow5 => Some(form_of(&node.children[0])?.powi(5)),
        Token::Sqrt => {
            let base = form_of(&node.children[0])?;
            Some(pow_rational(base, BigRational::new(1.into(), 2.into())))
        }
        Token::Exp => {
            let arg = form_of(&node.children[0])?;
            // exp(log(u)) = u on the shared domain.
            if let Some(inner) = arg.as_bare_kernel(&KernelKind::Log) {
                return Some(inner);
            }
            Some(kernel_form(KernelKind::Exp, vec![arg]))
        }
        Token::Log => {
            let arg = form_of(&node.children[0])?;
            if let Some(inner) = arg.as_bare_kernel(&KernelKind::Exp) {
                return Some(inner);
            }
            Some(kernel_form(KernelKind::Log, vec![arg]))
        }
        Token::Sin => Some(kernel_form(KernelKind::Sin, vec![form_of(&node.children[0])?])),
        Token::Cos => Some(kernel_form(KernelKind::Cos, vec![form_of(&node.children[0])?])),
        Token::Pow => {
            let base = form_of(&node.children[0])?;
            let expo = form_of(&node.children[1])?;
            if let Some(r) = expo.as_constant() {
                if r.is_integer() {
                    let n = r.to_integer();
                    if let Some(n) = n.to_i64() {
                        if n.abs() <= MAX_EXPANDED_POW {
                            return if n >= 0 {
                                Some(base.powi(n as u32))
                            } else {
                                RationalForm::constant(BigRational::one())
                                    .div(&base.powi((-n) as u32))
                            };
                        }
                    }
                }
                return Some(pow_rational(base, r));
            }
            Some(kernel_form(KernelKind::PowGeneral, vec![base, expo]))
        }
    }
}

fn rat64_to_big(r: Rational64) -> BigRational {
    BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom()))
}

fn kernel_form(kind: KernelKind, args: Vec<RationalForm>) -> RationalForm {
    RationalForm::from_poly(Poly::monomial(Monomial::kernel(Kernel { kind, args })))
}

fn pow_rational(base: RationalForm, r: BigRational) -> RationalForm {
    kernel_form(KernelKind::PowRational(r), vec![base])
}

impl CanonicalForm {
    /// Deterministic text rendering; usable as an exact dedup key.
    pub fn key(&self) -> String {
        match self {
            CanonicalForm::Undefined => "<undefined>".to_string(),
            CanonicalForm::Defined(f) => render_form(f),
        }
    }

    /// Structural equality with float-tolerant coefficient comparison.
    ///
    /// Monomial structure must match exactly; coefficients (and rational
    /// kernel exponents) are compared numerically with relative tolerance
    /// 1e-9 so that fitted constants match their exact counterparts.
    pub fn matches(&self, other: &CanonicalForm) -> bool {
        match (self, other) {
            (CanonicalForm::Defined(a), CanonicalForm::Defined(b)) => forms_match(a, b),
            _ => false,
        }
    }
}

fn coeff_close(a: &BigRational, b: &BigRational) -> bool {
    if a == b {
        return true;
    }
    let (fa, fb) = match (a.to_f64(), b.to_f64()) {
        (Some(fa), Some(fb)) => (fa, fb),
        _ => return false,
    };
    (fa - fb).abs() <= COEFF_REL_TOL * fa.abs().max(fb.abs()).max(1.0)
}

fn forms_match(a: &RationalForm, b: &RationalForm) -> bool {
    polys_match(&a.num, &b.num) && polys_match(&a.den, &b.den)
}

fn polys_match(a: &Poly, b: &Poly) -> bool {
    a.0.len() == b.0.len()
        && a.0
            .iter()
            .zip(b.0.iter())
            .all(|((ma, ca), (mb, cb))| monomials_match(ma, mb) && coeff_close(ca, cb))
}

fn monomials_match(a: &Monomial, b: &Monomial) -> bool {
    a.0.len() == b.0.len()
        && a.0
            .iter()
            .zip(b.0.iter())
            .all(|((aa, pa), (ab, pb))| pa == pb && atoms_match(aa, ab))
}

fn atoms_match(a: &Atom, b: &Atom) -> bool {
    match (a, b) {
        (Atom::Var(i), Atom::Var(j)) => i == j,
        (Atom::Kernel(ka), Atom::Kernel(kb)) => {
            let kinds_ok = match (&ka.kind, &kb.kind) {
                (KernelKind::PowRational(ra), KernelKind::PowRational(rb)) => coeff_close(ra, rb),
                (x, y) => x == y,
            };
            kinds_ok
                && ka.args.len() == kb.args.len()
                && ka
                    .args
                    .iter()
                    .zip(kb.args.iter())
                    .all(|(x, y)| forms_match(x, y))
        }
        _ => false,
    }
}

fn render_form(f: &RationalForm) -> String {
    if f.den.is_one() {
        render_poly(&f.num)
    } else {
        format!("({})/({})", render_poly(&f.num), render_poly(&f.den))
    }
}

fn render_poly(p: &Poly) -> String {
    if p.is_zero() {
        return "0".to_string();
    }
    let mut out = String::new();
    for (i, (m, c)) in p.0.iter().enumerate() {
        if i > 0 {
            out.push_str(" + ");
        }
        let _ = write!(out, "{c}");
        for (a, pw) in &m.0 {
            out.push('*');
            match a {
                Atom::Var(v) => {
                    let _ = write!(out, "x{v}");
                }
                Atom::Kernel(k) => {
                    let name = match &k.kind {
                        KernelKind::Sin => "sin".to_string(),
                        KernelKind::Cos => "cos".to_string(),
                        KernelKind::Exp => "exp".to_string(),
                        KernelKind::Log => "log".to_string(),
                        KernelKind::PowRational(r) => format!("pow[{r}]"),
                        KernelKind::PowGeneral => "pow".to_string(),
                    };
                    let args = k
                        .args
                        .iter()
                        .map(render_form)
                        .collect::<Vec<_>>()
                        .join(", ");
                    let _ = write!(out, "{name}({args})");
                }
            }
            if *pw > 1 {
                let _ = write!(out, "^{pw}");
            }
        }
    }
    out
}

/// Checks whether two bound trees are symbolically equal.
///
/// Canonical forms are compared first; on mismatch a numeric falsifier
/// evaluates both trees at 30 random points drawn uniformly from the
/// per-variable `bounds` and reports `NotEqual` on any relative disagreement
/// beyond 1e-9 (a point where exactly one side is non-finite also
/// separates them). Numeric agreement alone never upgrades to `Equal`.
pub fn symbolically_equal(
    f: &ExprTree,
    g: &ExprTree,
    bounds: &[(f64, f64)],
    seed: u64,
) -> Result<Equivalence, ExprError> {
    let fa = canonicalize(f)?;
    let ga = canonicalize(g)?;
    if fa.matches(&ga) {
        return Ok(Equivalence::Equal);
    }
    let d = bounds.len();
    let max_var = f
        .used_vars()
        .into_iter()
        .chain(g.used_vars())
        .max()
        .unwrap_or(0) as usize;
    if max_var > d {
        return Err(ExprError::VariableOutOfRange {
            var: max_var as u8,
            d,
        });
    }
    use rand::Rng;
    let mut rng = crate::rng_stream(seed, 0x517f);
    for _ in 0..FALSIFIER_POINTS {
        let mut row = ndarray::Array2::<f64>::zeros((1, d.max(1)));
        for (j, (lo, hi)) in bounds.iter().enumerate() {
            row[[0, j]] = rng.random_range(*lo..*hi);
        }
        let yf = f.evaluate(&row, &[]);
        let yg = g.evaluate(&row, &[]);
        match (yf, yg) {
            (Ok(a), Ok(b)) => {
                let (a, b) = (a[0], b[0]);
                if (a - b).abs() > FALSIFIER_REL_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Ok(Equivalence::NotEqual);
                }
            }
            (Ok(_), Err(ExprError::Invalid)) | (Err(ExprError::Invalid), Ok(_)) => {
                return Ok(Equivalence::NotEqual);
            }
            (Err(ExprError::Invalid), Err(ExprError::Invalid)) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(Equivalence::Undecided)
}
