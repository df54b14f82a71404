//! Genetic-programming search over [`SymbolicExpr`] trees.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::expr::{BinaryOp, Node, SymbolicExpr, UnaryOp};
use crate::ensemble::CurveKind;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_stream};

/// Operators available to the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSet {
    pub binary: Vec<BinaryOp>,
    pub unary: Vec<UnaryOp>,
}

impl Default for OperatorSet {
    fn default() -> Self {
        OperatorSet {
            binary: vec![BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul],
            unary: vec![UnaryOp::Exp, UnaryOp::Square, UnaryOp::Sqrt],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    pub population: usize,
    pub generations: usize,
    pub max_complexity: usize,
    /// Penalty per node added to the variance-normalized loss during selection.
    pub parsimony: f64,
    pub operators: OperatorSet,
    /// Golden-section sweeps over each Pareto member after evolution.
    pub const_opt_iterations: usize,
    /// Probability that an offspring gets a short Levenberg–Marquardt fit.
    pub const_opt_probability: f64,
    pub repeats: usize,
    pub tournament_size: usize,
    pub p_crossover: f64,
    pub p_mutation: f64,
    pub max_restarts: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            population: 200,
            generations: 200,
            max_complexity: 16,
            parsimony: 1e-3,
            operators: OperatorSet::default(),
            const_opt_iterations: 50,
            const_opt_probability: 0.1,
            repeats: 10,
            tournament_size: 5,
            p_crossover: 0.7,
            p_mutation: 0.25,
            max_restarts: 3,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("sr config: {m}")));
        if self.repeats < 1 {
            return bad("repeats must be at least 1");
        }
        if self.max_complexity < 3 {
            return bad("max_complexity must be at least 3");
        }
        if self.population < 2 || self.tournament_size < 1 {
            return bad("population must be at least 2 and tournament_size at least 1");
        }
        if self.operators.binary.is_empty() {
            return bad("at least one binary operator is required");
        }
        if !(0.0..=1.0).contains(&self.p_crossover) || !(0.0..=1.0).contains(&self.p_mutation) || self.p_crossover + self.p_mutation > 1.0 {
            return bad("crossover and mutation probabilities must lie in [0, 1] and sum to at most 1");
        }
        if !(0.0..=1.0).contains(&self.const_opt_probability) || self.parsimony < 0.0 {
            return bad("const_opt_probability must lie in [0, 1] and parsimony must be non-negative");
        }
        Ok(())
    }
}

/// Weighted samples of a curve `y(U)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitData {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub kind: Option<CurveKind>,
}

impl FitData {
    pub fn new(u: Vec<f64>, y: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let d = FitData { u, y, w, kind: None };
        d.validate()?;
        Ok(d)
    }

    pub fn unweighted(u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let w = vec![1.0; u.len()];
        Self::new(u, y, w)
    }

    pub fn with_kind(mut self, kind: CurveKind) -> Self {
        self.kind = Some(kind);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.u.len();
        if n < 8 {
            return Err(Error::InvalidInput(format!("symbolic regression needs at least 8 points, got {n}")));
        }
        if self.y.len() != n || self.w.len() != n {
            return Err(Error::InvalidInput("curve arrays differ in length".into()));
        }
        if self.u.iter().chain(&self.y).chain(&self.w).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("curve contains non-finite values".into()));
        }
        if self.w.iter().any(|&w| w < 0.0) || self.w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidInput("curve weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }

    fn weight_sum(&self) -> f64 {
        self.w.iter().sum()
    }

    fn weighted_moments(&self) -> (f64, f64) {
        let ws = self.weight_sum();
        let mean = self.w.iter().zip(&self.y).map(|(w, y)| w * y).sum::<f64>() / ws;
        let var = self.w.iter().zip(&self.y).map(|(w, y)| w * (y - mean).powi(2)).sum::<f64>() / ws;
        (mean, var)
    }
}

/// Result of one seeded search.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub expr: SymbolicExpr,
    /// Σ w (f − y)² / Σ w.
    pub sq_error: f64,
    pub seed: u64,
    pub kind: Option<CurveKind>,
}

/// Reusable evaluation buffers.
#[derive(Default)]
struct Evaluator {
    out: Vec<f64>,
    scratch: Vec<Vec<f64>>,
}

impl Evaluator {
    fn loss(&mut self, e: &SymbolicExpr, d: &FitData) -> f64 {
        if !e.eval_batch(&d.u, &mut self.out, &mut self.scratch) {
            return f64::INFINITY;
        }
        let mut acc = 0.0;
        for k in 0..d.u.len() {
            let r = self.out[k] - d.y[k];
            acc += d.w[k] * r * r;
        }
        let l = acc / d.weight_sum();
        if l.is_finite() {
            l
        } else {
            f64::INFINITY
        }
    }

    /// Weighted residuals `sqrt(w/W)·(f − y)`; `false` on a guard.
    fn residuals(&mut self, e: &SymbolicExpr, d: &FitData, r: &mut Vec<f64>) -> bool {
        if !e.eval_batch(&d.u, &mut self.out, &mut self.scratch) {
            return false;
        }
        let ws = d.weight_sum();
        r.clear();
        r.extend((0..d.u.len()).map(|k| (d.w[k] / ws).sqrt() * (self.out[k] - d.y[k])));
        r.iter().all(|v| v.is_finite())
    }
}

/// Weighted squared error of `expr` on `data`; infinite when a guard trips.
pub fn sq_error(expr: &SymbolicExpr, data: &FitData) -> f64 {
    Evaluator::default().loss(expr, data)
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Levenberg–Marquardt on the expression's constants with a finite-difference
/// Jacobian. Returns the final loss.
fn levenberg_marquardt(e: &mut SymbolicExpr, d: &FitData, iters: usize, ev: &mut Evaluator) -> f64 {
    let mut p = e.constants();
    let np = p.len();
    let mut loss = ev.loss(e, d);
    if np == 0 || !loss.is_finite() {
        return loss;
    }
    let n = d.u.len();
    let mut r0 = Vec::with_capacity(n);
    let mut rp = Vec::with_capacity(n);
    let mut jac = vec![vec![0.0; n]; np];
    let mut lambda = 1e-3;
    let mut trial = e.clone();
    for _ in 0..iters {
        if !ev.residuals(e, d, &mut r0) {
            break;
        }
        let mut ok = true;
        for j in 0..np {
            let h = 1e-7 * p[j].abs().max(1e-4);
            let mut q = p.clone();
            q[j] += h;
            trial.set_constants(&q);
            if !ev.residuals(&trial, d, &mut rp) {
                ok = false;
                break;
            }
            for k in 0..n {
                jac[j][k] = (rp[k] - r0[k]) / h;
            }
        }
        if !ok {
            break;
        }
        let jtj: Vec<Vec<f64>> = (0..np).map(|a| (0..np).map(|b| (0..n).map(|k| jac[a][k] * jac[b][k]).sum()).collect()).collect();
        let jtr: Vec<f64> = (0..np).map(|a| -(0..n).map(|k| jac[a][k] * r0[k]).sum::<f64>()).collect();
        let mut improved = false;
        for _ in 0..8 {
            let mut m = jtj.clone();
            for (a, row) in m.iter_mut().enumerate() {
                row[a] += lambda * (jtj[a][a] + 1e-12);
            }
            let Some(delta) = solve_linear(m, jtr.clone()) else {
                lambda *= 10.0;
                continue;
            };
            let q: Vec<f64> = p.iter().zip(&delta).map(|(a, b)| a + b).collect();
            trial.set_constants(&q);
            let l = ev.loss(&trial, d);
            if l < loss {
                let rel = (loss - l) / loss.max(1e-300);
                p = q;
                loss = l;
                e.set_constants(&p);
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    return loss;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    loss
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Coordinate-wise golden-section descent; each sweep visits every constant once.
fn golden_refine(e: &mut SymbolicExpr, d: &FitData, sweeps: usize, ev: &mut Evaluator) -> f64 {
    let mut p = e.constants();
    let mut loss = ev.loss(e, d);
    if p.is_empty() || !loss.is_finite() {
        return loss;
    }
    let mut radius: Vec<f64> = p.iter().map(|c| 0.5 * c.abs().max(0.1)).collect();
    let mut trial = e.clone();
    for _ in 0..sweeps {
        for j in 0..p.len() {
            let mut f = |x: f64| {
                let mut q = p.clone();
                q[j] = x;
                trial.set_constants(&q);
                ev.loss(&trial, d)
            };
            let (mut a, mut b) = (p[j] - radius[j], p[j] + radius[j]);
            let mut c = b - GOLDEN * (b - a);
            let mut dd = a + GOLDEN * (b - a);
            let (mut fc, mut fd) = (f(c), f(dd));
            for _ in 0..12 {
                if fc < fd {
                    b = dd;
                    dd = c;
                    fd = fc;
                    c = b - GOLDEN * (b - a);
                    fc = f(c);
                } else {
                    a = c;
                    c = dd;
                    fc = fd;
                    dd = a + GOLDEN * (b - a);
                    fd = f(dd);
                }
            }
            let (x, fx) = if fc < fd { (c, fc) } else { (dd, fd) };
            if fx < loss {
                radius[j] = (2.0 * (x - p[j]).abs()).max(radius[j] * 0.25);
                p[j] = x;
                loss = fx;
            } else {
                radius[j] *= 0.5;
            }
        }
    }
    e.set_constants(&p);
    loss
}

/// Folds variable-free subtrees into constants.
pub fn fold_constants(e: &SymbolicExpr) -> SymbolicExpr {
    fn go(nodes: &[Node], k: usize, out: &mut Vec<Node>) -> (usize, Option<f64>) {
        match nodes[k] {
            Node::Const(c) => {
                out.push(Node::Const(c));
                (k + 1, Some(c))
            }
            Node::Var => {
                out.push(Node::Var);
                (k + 1, None)
            }
            Node::Unary(op) => {
                let start = out.len();
                out.push(nodes[k]);
                let (end, a) = go(nodes, k + 1, out);
                if let Some(a) = a {
                    if let Ok(v) = op.apply(a) {
                        if v.is_finite() {
                            out.truncate(start);
                            out.push(Node::Const(v));
                            return (end, Some(v));
                        }
                    }
                }
                (end, None)
            }
            Node::Binary(op) => {
                let start = out.len();
                out.push(nodes[k]);
                let (mid, a) = go(nodes, k + 1, out);
                let (end, b) = go(nodes, mid, out);
                if let (Some(a), Some(b)) = (a, b) {
                    if let Ok(v) = op.apply(a, b) {
                        if v.is_finite() {
                            out.truncate(start);
                            out.push(Node::Const(v));
                            return (end, Some(v));
                        }
                    }
                }
                (end, None)
            }
        }
    }
    let mut out = Vec::with_capacity(e.complexity());
    go(e.nodes(), 0, &mut out);
    SymbolicExpr::from_prefix_unchecked(out)
}

#[derive(Clone)]
struct Individual {
    expr: SymbolicExpr,
    loss: f64,
}

struct Search<'a> {
    cfg: &'a SrConfig,
    data: &'a FitData,
    var_y: f64,
    rng: ChaCha8Rng,
    ev: Evaluator,
}

impl<'a> Search<'a> {
    fn random_const(&mut self) -> f64 {
        self.rng.random_range(-2.0..2.0)
    }

    fn random_terminal(&mut self) -> Node {
        if self.rng.random_bool(0.6) {
            Node::Var
        } else {
            Node::Const(self.random_const())
        }
    }

    fn random_tree(&mut self, depth: usize, full: bool, out: &mut Vec<Node>) {
        if depth == 0 || (!full && self.rng.random_bool(0.3)) {
            let t = self.random_terminal();
            out.push(t);
            return;
        }
        let ops = &self.cfg.operators;
        let use_unary = !ops.unary.is_empty() && self.rng.random_bool(0.3);
        if use_unary {
            let op = *ops.unary.choose(&mut self.rng).expect("non-empty");
            out.push(Node::Unary(op));
            self.random_tree(depth - 1, full, out);
        } else {
            let op = *ops.binary.choose(&mut self.rng).expect("non-empty");
            out.push(Node::Binary(op));
            self.random_tree(depth - 1, full, out);
            self.random_tree(depth - 1, full, out);
        }
    }

    fn new_tree(&mut self, max_depth: usize) -> SymbolicExpr {
        loop {
            let mut nodes = Vec::new();
            let depth = self.rng.random_range(1..=max_depth);
            let full = self.rng.random_bool(0.5);
            self.random_tree(depth, full, &mut nodes);
            if nodes.len() <= self.cfg.max_complexity {
                return SymbolicExpr::from_prefix_unchecked(nodes);
            }
        }
    }

    fn score(&self, ind: &Individual) -> f64 {
        if !ind.loss.is_finite() {
            return f64::INFINITY;
        }
        ind.loss / self.var_y + self.cfg.parsimony * ind.expr.complexity() as f64
    }

    fn tournament<'p>(&mut self, pop: &'p [Individual]) -> &'p Individual {
        let mut best: Option<&Individual> = None;
        for _ in 0..self.cfg.tournament_size {
            let c = &pop[self.rng.random_range(0..pop.len())];
            if best.is_none_or(|b| self.score(c) < self.score(b)) {
                best = Some(c);
            }
        }
        best.expect("tournament size >= 1")
    }

    fn crossover(&mut self, a: &SymbolicExpr, b: &SymbolicExpr) -> SymbolicExpr {
        for _ in 0..4 {
            let i = self.rng.random_range(0..a.complexity());
            let j = self.rng.random_range(0..b.complexity());
            let child = a.replace_subtree(i, b.subtree(j));
            if child.complexity() <= self.cfg.max_complexity {
                return child;
            }
        }
        a.clone()
    }

    fn mutate(&mut self, e: &SymbolicExpr) -> SymbolicExpr {
        for _ in 0..4 {
            let child = match self.rng.random_range(0..6) {
                0 => self.point_mutation(e),
                1 => {
                    let i = self.rng.random_range(0..e.complexity());
                    let mut nodes = Vec::new();
                    let depth = self.rng.random_range(0..=2);
                    self.random_tree(depth, false, &mut nodes);
                    e.replace_subtree(i, &nodes)
                }
                2 => {
                    let cs: Vec<f64> = e.constants().iter().map(|c| c * (1.0 + 0.3 * self.rng.random_range(-1.0..1.0))).collect();
                    if cs.is_empty() {
                        self.point_mutation(e)
                    } else {
                        e.with_constants(&cs)
                    }
                }
                3 => {
                    let i = self.rng.random_range(0..e.complexity());
                    SymbolicExpr::from_prefix_unchecked(e.subtree(i).to_vec())
                }
                4 => self.insert_node(e),
                _ => self.delete_node(e),
            };
            if child.complexity() <= self.cfg.max_complexity {
                return child;
            }
        }
        e.clone()
    }

    fn point_mutation(&mut self, e: &SymbolicExpr) -> SymbolicExpr {
        let mut nodes = e.nodes().to_vec();
        let i = self.rng.random_range(0..nodes.len());
        let ops = &self.cfg.operators;
        nodes[i] = match nodes[i] {
            Node::Const(c) => {
                if self.rng.random_bool(0.5) {
                    Node::Var
                } else {
                    Node::Const(c * (1.0 + self.rng.random_range(-1.0..1.0)))
                }
            }
            Node::Var => Node::Const(self.random_const()),
            Node::Unary(op) => match ops.unary.choose(&mut self.rng) {
                Some(&u) => Node::Unary(u),
                None => Node::Unary(op),
            },
            Node::Binary(_) => Node::Binary(*ops.binary.choose(&mut self.rng).expect("non-empty")),
        };
        SymbolicExpr::from_prefix_unchecked(nodes)
    }

    fn insert_node(&mut self, e: &SymbolicExpr) -> SymbolicExpr {
        let i = self.rng.random_range(0..e.complexity());
        let sub = e.subtree(i).to_vec();
        let ops = &self.cfg.operators;
        let mut repl = Vec::with_capacity(sub.len() + 2);
        if !ops.unary.is_empty() && self.rng.random_bool(0.4) {
            repl.push(Node::Unary(*ops.unary.choose(&mut self.rng).expect("non-empty")));
            repl.extend(sub);
        } else {
            repl.push(Node::Binary(*ops.binary.choose(&mut self.rng).expect("non-empty")));
            let t = self.random_terminal();
            if self.rng.random_bool(0.5) {
                repl.extend(sub);
                repl.push(t);
            } else {
                repl.push(t);
                repl.extend(sub);
            }
        }
        e.replace_subtree(i, &repl)
    }

    fn delete_node(&mut self, e: &SymbolicExpr) -> SymbolicExpr {
        let internal: Vec<usize> = (0..e.complexity()).filter(|&k| e.nodes()[k].arity() > 0).collect();
        let Some(&i) = internal.choose(&mut self.rng) else {
            return self.point_mutation(e);
        };
        let child = if e.nodes()[i].arity() == 1 || self.rng.random_bool(0.5) {
            i + 1
        } else {
            e.subtree_end(i + 1)
        };
        let keep = e.subtree(child).to_vec();
        e.replace_subtree(i, &keep)
    }

    fn evaluate(&mut self, expr: SymbolicExpr, optimize: bool) -> Individual {
        let mut expr = fold_constants(&expr);
        if optimize {
            levenberg_marquardt(&mut expr, self.data, 10, &mut self.ev);
        }
        let loss = self.ev.loss(&expr, self.data);
        Individual { expr, loss }
    }

    fn run(&mut self) -> Vec<Option<Individual>> {
        let cfg = self.cfg;
        let mut front: Vec<Option<Individual>> = vec![None; cfg.max_complexity + 1];
        let mut pop: Vec<Individual> = Vec::with_capacity(cfg.population);
        for _ in 0..cfg.population {
            let e = self.new_tree(4);
            let ind = self.evaluate(e, true);
            pop.push(ind);
        }
        if pop.iter().all(|i| !i.loss.is_finite()) {
            return front;
        }
        update_front(&mut front, &pop);
        for gen in 0..cfg.generations {
            let mut order: Vec<usize> = (0..pop.len()).collect();
            order.sort_by(|&a, &b| self.score(&pop[a]).total_cmp(&self.score(&pop[b])));
            let mut next: Vec<Individual> = order.iter().take(2).map(|&k| pop[k].clone()).collect();
            while next.len() < cfg.population {
                let r: f64 = self.rng.random();
                let child = if r < cfg.p_crossover {
                    let a = self.tournament(&pop).expr.clone();
                    let b = self.tournament(&pop).expr.clone();
                    self.crossover(&a, &b)
                } else if r < cfg.p_crossover + cfg.p_mutation {
                    let a = self.tournament(&pop).expr.clone();
                    self.mutate(&a)
                } else {
                    next.push(self.tournament(&pop).clone());
                    continue;
                };
                let lucky = self.rng.random_bool(cfg.const_opt_probability);
                let mut ind = self.evaluate(child, lucky);
                if !lucky && ind.loss.is_finite() {
                    // offspring close to the front get their constants fitted
                    let c = ind.expr.complexity();
                    let promising = front.get(c).is_some_and(|f| f.as_ref().is_none_or(|f| ind.loss < 10.0 * f.loss));
                    if promising {
                        ind = self.evaluate(ind.expr, true);
                    }
                }
                next.push(ind);
            }
            if gen % 10 == 9 {
                let members: Vec<Individual> = front.iter().flatten().cloned().collect();
                for _ in 0..(cfg.population / 20).max(1) {
                    if let Some(m) = members.choose(&mut self.rng) {
                        let k = self.rng.random_range(2..next.len().max(3)).min(next.len() - 1);
                        next[k] = m.clone();
                    }
                }
            }
            pop = next;
            update_front(&mut front, &pop);
        }
        front
    }
}

fn update_front(front: &mut [Option<Individual>], pop: &[Individual]) {
    for ind in pop {
        let c = ind.expr.complexity();
        if c >= front.len() || !ind.loss.is_finite() {
            continue;
        }
        if front[c].as_ref().is_none_or(|f| ind.loss < f.loss) {
            front[c] = Some(ind.clone());
        }
    }
}

/// Chooses one member of a Pareto front (complexity, loss): among members
/// within 1.5× of the lowest loss, the one with the steepest log-loss drop
/// per added node. `floor` keeps exact fits from being ranked by round-off.
pub fn pick_from_front(front: &[(usize, f64)], floor: f64) -> Option<usize> {
    let mut idx: Vec<usize> = (0..front.len()).filter(|&k| front[k].1.is_finite()).collect();
    idx.sort_by_key(|&k| front[k].0);
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for k in idx {
        let l = front[k].1.max(floor);
        if kept.last().is_none_or(|&(_, prev)| l < prev) {
            kept.push((k, l));
        }
    }
    let min = kept.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min);
    let mut best: Option<(usize, f64)> = None;
    for (pos, &(k, l)) in kept.iter().enumerate() {
        let score = if pos == 0 {
            0.0
        } else {
            let (pk, pl) = kept[pos - 1];
            -(l.ln() - pl.ln()) / (front[k].0 as f64 - front[pk].0 as f64)
        };
        if l <= 1.5 * min && best.is_none_or(|(_, s)| score > s) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}

/// One seeded symbolic-regression run.
pub fn sr_fit(data: &FitData, cfg: &SrConfig, seed: u64) -> Result<Candidate> {
    data.validate()?;
    cfg.validate()?;
    let (mean, var) = data.weighted_moments();
    let var_y = var.max(1e-12 * mean * mean).max(1e-300);
    let floor = 1e-12 * var_y;
    for attempt in 0..=cfg.max_restarts {
        let mut search = Search {
            cfg,
            data,
            var_y,
            rng: rng_stream(derive_seed(seed, 0x5352), attempt as u64),
            ev: Evaluator::default(),
        };
        let front = search.run();
        let mut members: Vec<Individual> = front.into_iter().flatten().collect();
        if members.is_empty() {
            log::warn!("symbolic regression population collapsed (attempt {})", attempt + 1);
            continue;
        }
        for m in &mut members {
            let l1 = golden_refine(&mut m.expr, data, cfg.const_opt_iterations, &mut search.ev);
            let l2 = levenberg_marquardt(&mut m.expr, data, 100, &mut search.ev);
            m.loss = l1.min(l2);
            m.expr = fold_constants(&m.expr);
            m.loss = search.ev.loss(&m.expr, data);
        }
        let pts: Vec<(usize, f64)> = members.iter().map(|m| (m.expr.complexity(), m.loss)).collect();
        let Some(k) = pick_from_front(&pts, floor) else {
            continue;
        };
        let m = &members[k];
        return Ok(Candidate {
            expr: m.expr.clone(),
            sq_error: m.loss,
            seed,
            kind: data.kind,
        });
    }
    Err(Error::Regression(format!("population collapsed after {} restarts", cfg.max_restarts)))
}

/// Seed of the `r`-th repeat.
pub fn repeat_seed(base: u64, r: usize) -> u64 {
    derive_seed(base, 0x5200 + r as u64)
}

/// `cfg.repeats` independent runs, sequentially.
pub fn sr_candidates(data: &FitData, cfg: &SrConfig, base_seed: u64) -> Result<Vec<Candidate>> {
    (0..cfg.repeats).map(|r| sr_fit(data, cfg, repeat_seed(base_seed, r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(s: &str, n: usize) -> FitData {
        let e = SymbolicExpr::parse(s).unwrap();
        let u: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
        let y = u.iter().map(|&x| e.eval(x).unwrap()).collect();
        FitData::unweighted(u, y).unwrap()
    }

    #[test]
    fn fold_constants_collapses_variable_free_subtrees() {
        let e = SymbolicExpr::parse("(1 + 2)*U + exp(0)").unwrap();
        assert_eq!(fold_constants(&e).to_string(), "3*U + 1");
        let g = SymbolicExpr::parse("sqrt(-1)*U").unwrap();
        assert_eq!(fold_constants(&g), g);
    }

    #[test]
    fn levenberg_marquardt_recovers_exponential_constants() {
        let d = planted("0.01 + 0.02*exp(2*U)", 64);
        let mut e = SymbolicExpr::parse("0.1 + 0.1*exp(1*U)").unwrap();
        let mut ev = Evaluator::default();
        let loss = levenberg_marquardt(&mut e, &d, 200, &mut ev);
        assert!(loss < 1e-20, "{loss}");
        let c = e.constants();
        assert!((c[0] - 0.01).abs() < 1e-6 && (c[1] - 0.02).abs() < 1e-6 && (c[2] - 2.0).abs() < 1e-5, "{c:?}");
    }

    #[test]
    fn golden_refine_does_not_increase_loss() {
        let d = planted("0.5 - 0.3*U", 32);
        let mut e = SymbolicExpr::parse("0.4 - 0.2*U").unwrap();
        let mut ev = Evaluator::default();
        let before = ev.loss(&e, &d);
        let after = golden_refine(&mut e, &d, 50, &mut ev);
        assert!(after < before * 1e-6, "{before} -> {after}");
    }

    #[test]
    fn weighted_loss_matches_direct_formula() {
        let e = SymbolicExpr::parse("2*U").unwrap();
        let d = FitData::new(vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75], vec![0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 0.5, 0.0, 1.0, 3.0, 1.0, 1.0]).unwrap();
        let mut num = 0.0;
        for k in 0..8 {
            num += d.w[k] * (2.0 * d.u[k] - d.y[k]).powi(2);
        }
        let want = num / d.w.iter().sum::<f64>();
        assert!((sq_error(&e, &d) - want).abs() < 1e-15);
    }

    #[test]
    fn front_pick_prefers_the_first_exact_member() {
        let front = [(1, 0.5), (3, 1e-3), (5, 1e-30), (9, 1e-31), (7, 2e-4)];
        assert_eq!(pick_from_front(&front, 1e-14), Some(2));
        // without an exact fit the steepest drop within 1.5x wins
        let front = [(1, 1.0), (3, 0.011), (5, 0.010), (7, 0.0099)];
        assert_eq!(pick_from_front(&front, 0.0), Some(1));
    }

    #[test]
    fn too_few_points_are_rejected() {
        let r = FitData::unweighted(vec![0.0; 7], vec![1.0; 7]);
        assert!(r.is_err());
    }

    #[test]
    fn config_guards() {
        let mut c = SrConfig::default();
        c.repeats = 0;
        assert!(c.validate().is_err());
        let mut c = SrConfig::default();
        c.max_complexity = 2;
        assert!(c.validate().is_err());
    }
}
