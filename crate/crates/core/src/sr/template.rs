//! Coefficient-free templates.
//!
//! An expression is first rewritten into a sum of terms `c · U^p · a1 · a2 ...`
//! where `p` is rational and the `a` are atoms (`exp(F)` with `F` free of a
//! constant term, or opaque `sqrt`/`1/F`/`F^G` factors that could not be
//! simplified). Products are expanded, like terms merged, constants are pulled
//! out of `exp` and `sqrt`, and terms that contribute nothing measurable on
//! `U ∈ (0, 1]` are pruned. The template is the printed normal form with every
//! coefficient replaced by an indexed placeholder; the coefficient's sign is
//! kept in the operator, so `C0 - C1*U` and `C0 + C1*U` differ.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::expr::{BinaryOp, Node, SymbolicExpr, UnaryOp};

/// Terms whose magnitude on the probe grid is below this fraction of the
/// whole sum are dropped.
const PRUNE_REL: f64 = 1e-6;
const COEF_REL_TOL: f64 = 1e-9;
const MAX_DEN: i64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Ratio {
    num: i64,
    den: i64,
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    const ZERO: Ratio = Ratio { num: 0, den: 1 };

    fn new(num: i64, den: i64) -> Ratio {
        let g = gcd(num, den).max(1);
        let s = if den < 0 { -1 } else { 1 };
        Ratio {
            num: s * num / g,
            den: s * den / g,
        }
    }

    fn int(n: i64) -> Ratio {
        Ratio { num: n, den: 1 }
    }

    fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }

    fn mul(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.num, self.den * o.den)
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn from_f64(x: f64) -> Option<Ratio> {
        if !x.is_finite() || x.abs() > 64.0 {
            return None;
        }
        (1..=MAX_DEN).find_map(|den| {
            let n = (x * den as f64).round();
            ((x * den as f64 - n).abs() < 1e-9).then(|| Ratio::new(n as i64, den))
        })
    }

    fn is_zero(self) -> bool {
        self.num == 0
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.num * o.den).cmp(&(o.num * self.den))
    }
}

#[derive(Debug, Clone)]
enum Atom {
    Exp(Form),
    Sqrt(Form),
    Inv(Form),
    Pow(Form, Form),
}

#[derive(Debug, Clone)]
struct Monomial {
    power: Ratio,
    atoms: Vec<Atom>,
}

#[derive(Debug, Clone)]
struct Term {
    coef: f64,
    mono: Monomial,
}

/// Sum of terms in canonical order.
#[derive(Debug, Clone, Default)]
struct Form {
    terms: Vec<Term>,
}

fn approx_eq(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= COEF_REL_TOL * a.abs().max(b.abs())
}

impl Atom {
    fn rank(&self) -> u8 {
        match self {
            Atom::Exp(_) => 0,
            Atom::Sqrt(_) => 1,
            Atom::Inv(_) => 2,
            Atom::Pow(..) => 3,
        }
    }

    fn skeleton(&self) -> String {
        let mut s = String::new();
        write_atom(self, &mut Placeholders::Bare, &mut s);
        s
    }

    fn approx_eq(&self, o: &Atom) -> bool {
        match (self, o) {
            (Atom::Exp(a), Atom::Exp(b)) | (Atom::Sqrt(a), Atom::Sqrt(b)) | (Atom::Inv(a), Atom::Inv(b)) => a.approx_eq(b),
            (Atom::Pow(a1, b1), Atom::Pow(a2, b2)) => a1.approx_eq(a2) && b1.approx_eq(b2),
            _ => false,
        }
    }

    fn cmp_key(&self, o: &Atom) -> Ordering {
        self.rank()
            .cmp(&o.rank())
            .then_with(|| self.skeleton().cmp(&o.skeleton()))
            .then_with(|| cmp_coefs(&self.coefs(), &o.coefs()))
    }

    fn coefs(&self) -> Vec<f64> {
        let mut v = Vec::new();
        match self {
            Atom::Exp(f) | Atom::Sqrt(f) | Atom::Inv(f) => f.collect_coefs(&mut v),
            Atom::Pow(a, b) => {
                a.collect_coefs(&mut v);
                b.collect_coefs(&mut v);
            }
        }
        v
    }

    fn eval(&self, u: f64) -> f64 {
        match self {
            Atom::Exp(f) => f.eval(u).exp(),
            Atom::Sqrt(f) => f.eval(u).sqrt(),
            Atom::Inv(f) => 1.0 / f.eval(u),
            Atom::Pow(a, b) => a.eval(u).powf(b.eval(u)),
        }
    }

    fn to_form(&self) -> Form {
        match self {
            Atom::Exp(f) => Form::exp(f.clone()),
            Atom::Sqrt(f) => Form::sqrt(f.clone()),
            Atom::Inv(f) => Form::inv(f.clone()),
            Atom::Pow(a, b) => Form::pow(a.clone(), b.clone()),
        }
    }

    fn map_forms(&self, f: &mut impl FnMut(&Form) -> Form) -> Atom {
        match self {
            Atom::Exp(a) => Atom::Exp(f(a)),
            Atom::Sqrt(a) => Atom::Sqrt(f(a)),
            Atom::Inv(a) => Atom::Inv(f(a)),
            Atom::Pow(a, b) => Atom::Pow(f(a), f(b)),
        }
    }
}

fn cmp_coefs(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

impl Monomial {
    fn one() -> Monomial {
        Monomial {
            power: Ratio::ZERO,
            atoms: Vec::new(),
        }
    }

    fn is_one(&self) -> bool {
        self.power.is_zero() && self.atoms.is_empty()
    }

    fn only_exp_atoms(&self) -> bool {
        self.atoms.iter().all(|a| matches!(a, Atom::Exp(_)))
    }

    fn approx_eq(&self, o: &Monomial) -> bool {
        self.power == o.power && self.atoms.len() == o.atoms.len() && self.atoms.iter().zip(&o.atoms).all(|(a, b)| a.approx_eq(b))
    }

    fn skeleton(&self) -> String {
        self.atoms.iter().map(Atom::skeleton).collect::<Vec<_>>().join("*")
    }

    fn mul(&self, o: &Monomial) -> Monomial {
        let mut exp_sum = Form::default();
        let mut has_exp = false;
        let mut atoms = Vec::new();
        for a in self.atoms.iter().chain(&o.atoms) {
            match a {
                Atom::Exp(f) => {
                    has_exp = true;
                    exp_sum = exp_sum.add(f.clone());
                }
                other => atoms.push(other.clone()),
            }
        }
        if has_exp && !exp_sum.terms.is_empty() {
            atoms.push(Atom::Exp(exp_sum));
        }
        atoms.sort_by(Atom::cmp_key);
        Monomial {
            power: self.power.add(o.power),
            atoms,
        }
    }

    fn eval(&self, u: f64) -> f64 {
        let base = if self.power.is_zero() {
            1.0
        } else if self.power.den == 1 {
            u.powi(self.power.num as i32)
        } else {
            u.powf(self.power.to_f64())
        };
        self.atoms.iter().fold(base, |acc, a| acc * a.eval(u))
    }
}

impl Term {
    fn cmp_key(&self, o: &Term) -> Ordering {
        let sa = !self.mono.atoms.is_empty();
        let sb = !o.mono.atoms.is_empty();
        sa.cmp(&sb)
            .then_with(|| self.mono.power.cmp(&o.mono.power))
            .then_with(|| self.mono.skeleton().cmp(&o.mono.skeleton()))
            .then_with(|| (self.coef < 0.0).cmp(&(o.coef < 0.0)))
            .then_with(|| {
                let ca: Vec<f64> = self.mono.atoms.iter().flat_map(Atom::coefs).collect();
                let cb: Vec<f64> = o.mono.atoms.iter().flat_map(Atom::coefs).collect();
                cmp_coefs(&ca, &cb)
            })
            .then_with(|| self.coef.total_cmp(&o.coef))
    }

    fn eval(&self, u: f64) -> f64 {
        self.coef * self.mono.eval(u)
    }
}

impl Form {
    fn constant(c: f64) -> Form {
        if c == 0.0 {
            return Form::default();
        }
        Form {
            terms: vec![Term {
                coef: c,
                mono: Monomial::one(),
            }],
        }
    }

    fn var_pow(p: Ratio) -> Form {
        Form {
            terms: vec![Term {
                coef: 1.0,
                mono: Monomial {
                    power: p,
                    atoms: Vec::new(),
                },
            }],
        }
    }

    fn atom(a: Atom) -> Form {
        Form {
            terms: vec![Term {
                coef: 1.0,
                mono: Monomial {
                    power: Ratio::ZERO,
                    atoms: vec![a],
                },
            }],
        }
    }

    fn normalize(mut self) -> Form {
        self.terms.sort_by(Term::cmp_key);
        let mut out: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in self.terms {
            if let Some(prev) = out.iter_mut().find(|p| p.mono.approx_eq(&t.mono)) {
                prev.coef += t.coef;
            } else {
                out.push(t);
            }
        }
        out.retain(|t| t.coef != 0.0);
        out.sort_by(Term::cmp_key);
        Form { terms: out }
    }

    fn approx_eq(&self, o: &Form) -> bool {
        self.terms.len() == o.terms.len() && self.terms.iter().zip(&o.terms).all(|(a, b)| approx_eq(a.coef, b.coef) && a.mono.approx_eq(&b.mono))
    }

    fn as_constant(&self) -> Option<f64> {
        match self.terms.as_slice() {
            [] => Some(0.0),
            [t] if t.mono.is_one() => Some(t.coef),
            _ => None,
        }
    }

    fn add(mut self, o: Form) -> Form {
        self.terms.extend(o.terms);
        self.normalize()
    }

    fn scale(mut self, c: f64) -> Form {
        if c == 0.0 {
            return Form::default();
        }
        for t in &mut self.terms {
            t.coef *= c;
        }
        self.normalize()
    }

    fn mul(&self, o: &Form) -> Form {
        let mut terms = Vec::with_capacity(self.terms.len() * o.terms.len());
        for a in &self.terms {
            for b in &o.terms {
                terms.push(Term {
                    coef: a.coef * b.coef,
                    mono: a.mono.mul(&b.mono),
                });
            }
        }
        Form { terms }.normalize()
    }

    fn exp(self) -> Form {
        let mut c0 = 0.0;
        let mut rest = Vec::new();
        for t in self.terms {
            if t.mono.is_one() {
                c0 += t.coef;
            } else {
                rest.push(t);
            }
        }
        if rest.is_empty() {
            return Form::constant(c0.exp());
        }
        Form::atom(Atom::Exp(Form { terms: rest })).scale(c0.exp())
    }

    /// `c·U^p·Π exp(F)` with `c > 0` can be raised to any rational power exactly.
    fn single_exp_term(&self) -> Option<&Term> {
        match self.terms.as_slice() {
            [t] if t.coef > 0.0 && t.mono.only_exp_atoms() => Some(t),
            _ => None,
        }
    }

    fn raise_single(t: &Term, k: Ratio) -> Form {
        let kf = k.to_f64();
        let mut f = Form::var_pow(t.mono.power.mul(k)).scale(t.coef.powf(kf));
        for a in &t.mono.atoms {
            if let Atom::Exp(inner) = a {
                f = f.mul(&Form::exp(inner.clone().scale(kf)));
            }
        }
        f
    }

    fn sqrt(self) -> Form {
        if self.terms.is_empty() {
            return self;
        }
        if let Some(t) = self.single_exp_term() {
            return Form::raise_single(t, Ratio::new(1, 2));
        }
        Form::atom(Atom::Sqrt(self))
    }

    fn inv(self) -> Form {
        if let [t] = self.terms.as_slice() {
            if t.mono.only_exp_atoms() {
                let mut f = Form::var_pow(t.mono.power.mul(Ratio::int(-1))).scale(1.0 / t.coef);
                for a in &t.mono.atoms {
                    if let Atom::Exp(inner) = a {
                        f = f.mul(&Form::exp(inner.clone().scale(-1.0)));
                    }
                }
                return f;
            }
        }
        Form::atom(Atom::Inv(self))
    }

    fn pow(self, e: Form) -> Form {
        if let Some(k) = e.as_constant() {
            if k == 0.0 {
                return Form::constant(1.0);
            }
            if let (Some(t), Some(r)) = (self.single_exp_term(), Ratio::from_f64(k)) {
                return Form::raise_single(t, r);
            }
            if k.fract() == 0.0 && (1.0..=4.0).contains(&k) {
                let mut f = self.clone();
                for _ in 1..k as i64 {
                    f = f.mul(&self);
                }
                return f;
            }
        }
        if let Some(a) = self.as_constant() {
            if a > 0.0 {
                return e.scale(a.ln()).exp();
            }
        }
        Form::atom(Atom::Pow(self, e))
    }

    fn from_nodes(nodes: &[Node], k: usize) -> (Form, usize) {
        match nodes[k] {
            Node::Const(c) => (Form::constant(c), k + 1),
            Node::Var => (Form::var_pow(Ratio::int(1)), k + 1),
            Node::Unary(op) => {
                let (a, end) = Form::from_nodes(nodes, k + 1);
                let f = match op {
                    UnaryOp::Neg => a.scale(-1.0),
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Square => a.mul(&a),
                    UnaryOp::Sqrt => a.sqrt(),
                };
                (f, end)
            }
            Node::Binary(op) => {
                let (a, mid) = Form::from_nodes(nodes, k + 1);
                let (b, end) = Form::from_nodes(nodes, mid);
                let f = match op {
                    BinaryOp::Add => a.add(b),
                    BinaryOp::Sub => a.add(b.scale(-1.0)),
                    BinaryOp::Mul => a.mul(&b),
                    BinaryOp::Div => a.mul(&b.inv()),
                    BinaryOp::Pow => a.pow(b),
                };
                (f, end)
            }
        }
    }

    fn eval(&self, u: f64) -> f64 {
        self.terms.iter().map(|t| t.eval(u)).sum()
    }

    /// Drops negligible terms (recursively) and renormalizes.
    fn prune(&self) -> Form {
        let rebuilt: Vec<Form> = self
            .terms
            .iter()
            .map(|t| {
                let mut f = Form::var_pow(t.mono.power).scale(t.coef);
                for a in &t.mono.atoms {
                    let a = a.map_forms(&mut |g| g.prune());
                    f = f.mul(&a.to_form());
                }
                f
            })
            .collect();
        let mut all = Form::default();
        for f in rebuilt {
            all = all.add(f);
        }
        let probe: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
        // terms that cannot be evaluated on the probe grid are kept as they are
        let mags: Vec<Option<f64>> = all
            .terms
            .iter()
            .map(|t| {
                let vals: Vec<f64> = probe.iter().map(|&u| t.eval(u).abs()).filter(|v| v.is_finite()).collect();
                (!vals.is_empty()).then(|| vals.into_iter().fold(0.0, f64::max))
            })
            .collect();
        let total: f64 = mags.iter().flatten().sum();
        if total == 0.0 || !total.is_finite() {
            return all;
        }
        let terms = all
            .terms
            .into_iter()
            .zip(mags)
            .filter(|(_, m)| m.is_none_or(|m| m >= PRUNE_REL * total))
            .map(|(t, _)| t)
            .collect();
        Form { terms }.normalize()
    }

    fn collect_coefs(&self, out: &mut Vec<f64>) {
        for t in &self.terms {
            out.push(t.coef);
            for a in &t.mono.atoms {
                match a {
                    Atom::Exp(f) | Atom::Sqrt(f) | Atom::Inv(f) => f.collect_coefs(out),
                    Atom::Pow(x, y) => {
                        x.collect_coefs(out);
                        y.collect_coefs(out);
                    }
                }
            }
        }
    }

    fn map_coefs(&self, f: &mut impl FnMut(f64) -> f64) -> Form {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let coef = f(t.coef);
                let atoms = t.mono.atoms.iter().map(|a| a.map_forms(&mut |g| g.map_coefs(f))).collect();
                Term {
                    coef,
                    mono: Monomial {
                        power: t.mono.power,
                        atoms,
                    },
                }
            })
            .collect();
        Form { terms }
    }
}

enum Placeholders {
    Bare,
    Indexed(usize),
}

impl Placeholders {
    fn next(&mut self) -> String {
        match self {
            Placeholders::Bare => "C".into(),
            Placeholders::Indexed(k) => {
                let s = format!("C{k}");
                *k += 1;
                s
            }
        }
    }
}

fn write_power(p: Ratio, out: &mut String) {
    if p.num == 1 && p.den == 1 {
        out.push('U');
    } else if p.den == 1 && p.num > 0 {
        out.push_str(&format!("U^{}", p.num));
    } else if p.den == 1 {
        out.push_str(&format!("U^({})", p.num));
    } else {
        out.push_str(&format!("U^({}/{})", p.num, p.den));
    }
}

fn write_form(f: &Form, ph: &mut Placeholders, out: &mut String) {
    if f.terms.is_empty() {
        out.push('0');
        return;
    }
    for (k, t) in f.terms.iter().enumerate() {
        let neg = t.coef < 0.0;
        match (k, neg) {
            (0, true) => out.push('-'),
            (0, false) => {}
            (_, true) => out.push_str(" - "),
            (_, false) => out.push_str(" + "),
        }
        out.push_str(&ph.next());
        if !t.mono.power.is_zero() {
            out.push('*');
            write_power(t.mono.power, out);
        }
        for a in &t.mono.atoms {
            if matches!(a, Atom::Inv(_)) {
                out.push('/');
            } else {
                out.push('*');
            }
            write_atom(a, ph, out);
        }
    }
}

fn write_atom(a: &Atom, ph: &mut Placeholders, out: &mut String) {
    match a {
        Atom::Exp(f) => {
            out.push_str("exp(");
            write_form(f, ph, out);
            out.push(')');
        }
        Atom::Sqrt(f) => {
            out.push_str("sqrt(");
            write_form(f, ph, out);
            out.push(')');
        }
        Atom::Inv(f) => {
            out.push('(');
            write_form(f, ph, out);
            out.push(')');
        }
        Atom::Pow(x, y) => {
            out.push('(');
            write_form(x, ph, out);
            out.push_str(")^(");
            write_form(y, ph, out);
            out.push(')');
        }
    }
}

fn power_expr(p: Ratio) -> SymbolicExpr {
    let u = SymbolicExpr::var;
    let int_pow = |n: i64| -> SymbolicExpr {
        match n {
            1 => u(),
            2 => SymbolicExpr::unary(UnaryOp::Square, u()),
            n => {
                let mut e = SymbolicExpr::unary(UnaryOp::Square, u());
                for _ in 2..n {
                    e = SymbolicExpr::binary(BinaryOp::Mul, u(), e);
                }
                e
            }
        }
    };
    if p.den == 1 && p.num > 0 {
        int_pow(p.num)
    } else if p.den == 2 && p.num > 0 {
        let s = SymbolicExpr::unary(UnaryOp::Sqrt, u());
        if p.num == 1 {
            s
        } else {
            SymbolicExpr::binary(BinaryOp::Mul, int_pow(p.num / 2), s)
        }
    } else {
        SymbolicExpr::binary(BinaryOp::Pow, u(), SymbolicExpr::constant(p.to_f64()))
    }
}

fn form_expr(f: &Form) -> SymbolicExpr {
    let Some((first, rest)) = f.terms.split_first() else {
        return SymbolicExpr::constant(0.0);
    };
    let mut acc = term_expr(first, first.coef);
    for t in rest {
        let op = if t.coef < 0.0 { BinaryOp::Sub } else { BinaryOp::Add };
        acc = SymbolicExpr::binary(op, acc, term_expr(t, t.coef.abs()));
    }
    acc
}

fn term_expr(t: &Term, c: f64) -> SymbolicExpr {
    let mut e = SymbolicExpr::constant(c);
    if !t.mono.power.is_zero() {
        e = SymbolicExpr::binary(BinaryOp::Mul, e, power_expr(t.mono.power));
    }
    for a in &t.mono.atoms {
        e = match a {
            Atom::Exp(f) => SymbolicExpr::binary(BinaryOp::Mul, e, SymbolicExpr::unary(UnaryOp::Exp, form_expr(f))),
            Atom::Sqrt(f) => SymbolicExpr::binary(BinaryOp::Mul, e, SymbolicExpr::unary(UnaryOp::Sqrt, form_expr(f))),
            Atom::Inv(f) => SymbolicExpr::binary(BinaryOp::Div, e, form_expr(f)),
            Atom::Pow(x, y) => SymbolicExpr::binary(BinaryOp::Mul, e, SymbolicExpr::binary(BinaryOp::Pow, form_expr(x), form_expr(y))),
        };
    }
    e
}

/// Coefficient-free template string plus the node count of its reified form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Template {
    pub text: String,
    pub complexity: usize,
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// An expression in normal form.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    form: Form,
}

impl CanonicalForm {
    pub fn of(expr: &SymbolicExpr) -> CanonicalForm {
        let (form, _) = Form::from_nodes(expr.nodes(), 0);
        CanonicalForm { form: form.prune() }
    }

    pub fn template(&self) -> Template {
        let mut text = String::new();
        write_form(&self.form, &mut Placeholders::Indexed(0), &mut text);
        Template {
            text,
            complexity: self.to_expr().complexity(),
        }
    }

    /// Coefficients in placeholder order (`C0`, `C1`, ...).
    pub fn coefficients(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.form.collect_coefs(&mut v);
        v
    }

    /// The normal form rebuilt as an expression; evaluates like the original.
    pub fn to_expr(&self) -> SymbolicExpr {
        form_expr(&self.form)
    }

    /// Same structure with every coefficient replaced by a distinct stand-in
    /// of the same sign.
    pub fn reify_placeholders(&self) -> SymbolicExpr {
        let mut k = 0usize;
        let f = self.form.map_coefs(&mut |c| {
            k += 1;
            let v = 1.0 + 0.137 * k as f64;
            if c < 0.0 {
                -v
            } else {
                v
            }
        });
        form_expr(&f)
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.form.eval(u)
    }
}

pub fn canonical_template(expr: &SymbolicExpr) -> Template {
    CanonicalForm::of(expr).template()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> String {
        canonical_template(&SymbolicExpr::parse(s).unwrap()).text
    }

    #[test]
    fn constants_do_not_matter() {
        assert_eq!(t("0.1 + 0.2*exp(3*U)"), t("7 + 1*exp(0.5*U)"));
        assert_eq!(t("0.1 + 0.2*exp(3*U)"), "C0 + C1*exp(C2*U)");
    }

    #[test]
    fn sign_is_preserved() {
        assert_eq!(t("0.5 - 0.3*U"), "C0 - C1*U");
        assert_eq!(t("0.5 + 0.3*U"), "C0 + C1*U");
        assert_ne!(t("0.5 - 0.3*U"), t("0.5 + 0.3*U"));
    }

    #[test]
    fn commutative_children_are_sorted() {
        assert_eq!(t("exp(2*U)*0.4 + 1.5"), t("1.5 + 0.4*exp(2*U)"));
        assert_eq!(t("U*0.3 + 0.2"), t("0.2 + 0.3*U"));
    }

    #[test]
    fn products_expand_and_exponentials_merge() {
        assert_eq!(t("0.3*(U + 1)"), "C0 + C1*U");
        assert_eq!(t("exp(U)*exp(U)*2"), "C0*exp(C1*U)");
        assert_eq!(t("square(exp(U))"), "C0*exp(C1*U)");
        assert_eq!(t("exp(0.3 + U)"), "C0*exp(C1*U)");
        assert_eq!(t("0.7*exp(-1.5*U)"), "C0*exp(-C1*U)");
    }

    #[test]
    fn half_powers_from_sqrt() {
        assert_eq!(t("1 - 0.6*U - 0.3*U*sqrt(U)"), "C0 - C1*U - C2*U^(3/2)");
        assert_eq!(t("1 - 0.6*U - sqrt(0.09*U*U*U)"), "C0 - C1*U - C2*U^(3/2)");
        assert_eq!(t("0.01 + 0.05*square(U)*exp(1.5*U)"), "C0 + C1*U^2*exp(C2*U)");
    }

    #[test]
    fn cancellation_and_pruning() {
        assert_eq!(t("U - U + 0.5"), "C0");
        assert_eq!(t("0.5 - 0.3*U + 1e-12*square(U)"), "C0 - C1*U");
        assert_eq!(t("0"), "0");
    }

    #[test]
    fn opaque_factors_survive() {
        assert_eq!(t("sqrt(U + 1)"), "C0*sqrt(C1 + C2*U)");
        assert_eq!(t("1/(U + 1)"), "C0/(C1 + C2*U)");
        assert_eq!(t("2/U"), "C0*U^(-1)");
    }

    #[test]
    fn normal_form_preserves_value() {
        for s in [
            "0.3*(U + 1)*(U - 2)",
            "exp(0.2 + U)*square(U - 0.5)",
            "sqrt(4*U*exp(U))",
            "1 - 0.6*U - 0.3*U*sqrt(U)",
            "(U + 1)^2 / (2*U + 1)",
            "0.5^U",
        ] {
            let e = SymbolicExpr::parse(s).unwrap();
            let c = CanonicalForm::of(&e);
            for k in 1..=10 {
                let u = k as f64 / 10.0;
                let a = e.eval(u).unwrap();
                let b = c.to_expr().eval(u).unwrap();
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{s} at {u}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn coefficients_follow_placeholder_order() {
        let c = CanonicalForm::of(&SymbolicExpr::parse("0.02*exp(2*U) + 0.01").unwrap());
        assert_eq!(c.coefficients(), vec![0.01, 0.02, 2.0]);
    }

    #[test]
    fn reified_template_is_a_fixed_point() {
        for s in ["0.01 + 0.02*exp(2*U)", "0.5 - 0.3*U", "sqrt(U + 1)/(U + 3)", "0.7*exp(-1.5*U) - 0.2*exp(0.5*U)"] {
            let c = CanonicalForm::of(&SymbolicExpr::parse(s).unwrap());
            let again = canonical_template(&c.reify_placeholders());
            assert_eq!(again, c.template(), "{s}");
        }
    }
}
