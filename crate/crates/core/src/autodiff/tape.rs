//! Scalar reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node index is a topological
//! order and the reverse sweep simply walks the list backwards.

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [usize; 2],
    partials: [f64; 2],
    arity: u8,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Var {
    idx: usize,
    value: f64,
}

impl Var {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes but keeps the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: f64, arity: u8, parents: [usize; 2], partials: [f64; 2]) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            parents,
            partials,
            arity,
        });
        Var { idx, value }
    }

    /// New leaf (an input or a parameter).
    pub fn var(&mut self, value: f64) -> Var {
        self.push(value, 0, [0, 0], [0.0, 0.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(a.value + b.value, 2, [a.idx, b.idx], [1.0, 1.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(a.value - b.value, 2, [a.idx, b.idx], [1.0, -1.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(a.value * b.value, 2, [a.idx, b.idx], [b.value, a.value])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let q = a.value / b.value;
        self.push(q, 2, [a.idx, b.idx], [1.0 / b.value, -q / b.value])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(a.value * c, 1, [a.idx, 0], [c, 0.0])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.push(a.value + c, 1, [a.idx, 0], [1.0, 0.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(a.value * a.value, 1, [a.idx, 0], [2.0 * a.value, 0.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = a.value.exp();
        self.push(e, 1, [a.idx, 0], [e, 0.0])
    }

    /// Records a unary op with a caller-supplied local derivative.
    pub fn unary(&mut self, a: Var, value: f64, partial: f64) -> Var {
        self.push(value, 1, [a.idx, 0], [partial, 0.0])
    }

    /// Sum of many terms.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return self.var(0.0);
        };
        it.fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep seeded with d(root)/d(root) = 1. Returns one adjoint per node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut adj = vec![0.0; self.nodes.len()];
        adj[root.idx] = 1.0;
        for idx in (0..=root.idx).rev() {
            let a = adj[idx];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[idx];
            for p in 0..node.arity as usize {
                adj[node.parents[p]] += a * node.partials[p];
            }
        }
        Gradients { adj }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> f64 {
        self.adj.get(v.idx).copied().unwrap_or(0.0)
    }

    pub fn wrt(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

/// d(loss)/d(params) for a loss recorded on `tape`.
pub fn grad(tape: &Tape, loss: Var, params: &[Var]) -> Vec<f64> {
    tape.backward(loss).wrt(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_theta() {
        let theta = [0.3, -1.7, 2.0, 0.0, 5.5];
        let mut tape = Tape::new();
        let vars: Vec<Var> = theta.iter().map(|&t| tape.var(t)).collect();
        let sq: Vec<Var> = vars.iter().map(|&v| tape.square(v)).collect();
        let loss = tape.sum(&sq);
        let g = grad(&tape, loss, &vars);
        for (gi, ti) in g.iter().zip(theta) {
            assert_eq!(*gi, 2.0 * ti);
        }
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.var(2.0);
        let b = tape.var(3.0);
        let loss = tape.square(a);
        assert_eq!(grad(&tape, loss, &[a, b]), vec![4.0, 0.0]);
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut tape = Tape::new();
        let x = tape.var(0.7);
        let y = tape.var(-0.2);
        let xy = tape.mul(x, y);
        let l1 = tape.exp(xy);
        let d = tape.div(x, y);
        let l2 = tape.sub(d, y);
        let (a, b) = (2.5, -0.75);
        let s1 = tape.scale(l1, a);
        let s2 = tape.scale(l2, b);
        let comb = tape.add(s1, s2);
        let g1 = grad(&tape, l1, &[x, y]);
        let g2 = grad(&tape, l2, &[x, y]);
        let gc = grad(&tape, comb, &[x, y]);
        for k in 0..2 {
            assert_eq!(gc[k], a * g1[k] + b * g2[k]);
        }
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.mul(x, x);
        let z = tape.mul(y, x);
        assert_eq!(grad(&tape, z, &[x]), vec![27.0]);
    }

    #[test]
    fn matches_finite_differences_on_composite() {
        let f = |x: f64, y: f64| ((x * y).exp() - x / y).powi(2);
        let (x0, y0) = (0.4, 1.3);
        let mut tape = Tape::new();
        let x = tape.var(x0);
        let y = tape.var(y0);
        let xy = tape.mul(x, y);
        let e = tape.exp(xy);
        let q = tape.div(x, y);
        let d = tape.sub(e, q);
        let l = tape.square(d);
        assert!((l.value() - f(x0, y0)).abs() < 1e-14);
        let g = grad(&tape, l, &[x, y]);
        let h = 1e-6;
        let fx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let fy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((g[0] - fx).abs() < 1e-8);
        assert!((g[1] - fy).abs() < 1e-8);
    }
}
