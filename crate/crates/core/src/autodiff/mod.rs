//! Differentiation engine: forward-mode second-order duals for input derivatives,
//! nested inside reverse-mode sweeps for parameter gradients.
//!
//! Network-level reverse sweeps over [`Dual2`]-valued activations live in
//! [`crate::mlp`]; this module holds the scalar building blocks.

mod dual2;
mod tape;

pub use dual2::Dual2;
pub(crate) use dual2::sigmoid;
pub use tape::{grad, Gradients, Tape, Var};

use crate::mlp::Mlp;

/// Value, first and pure second derivatives of a network output along each tracked input axis.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDerivatives {
    pub value: f64,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

/// Evaluates `net` at `x`, tracking derivatives along the listed input axes (at most 3).
pub fn eval_dual2(net: &Mlp, x: &[f64], axes: &[usize]) -> InputDerivatives {
    assert!(axes.len() <= 3, "at most three tracked directions are supported");
    fn run<const K: usize>(net: &Mlp, x: &[f64], axes: &[usize]) -> InputDerivatives {
        let input: Vec<Dual2<K>> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| match axes.iter().position(|&a| a == i) {
                Some(k) => Dual2::variable(v, k),
                None => Dual2::constant(v),
            })
            .collect();
        let y = net.forward_dual(&input);
        InputDerivatives {
            value: y.value,
            d1: y.d1.to_vec(),
            d2: y.d2.to_vec(),
        }
    }
    match axes.len() {
        0 => run::<0>(net, x, axes),
        1 => run::<1>(net, x, axes),
        2 => run::<2>(net, x, axes),
        _ => run::<3>(net, x, axes),
    }
}
