//! Symbolic regression: expressions, genetic-programming search, canonical
//! templates and frequency-based selection.

mod expr;
mod gp;
mod select;
mod template;

pub use expr::{BinaryOp, Node, SymbolicExpr, UnaryOp, DIV_GUARD};
pub use gp::{fold_constants, pick_from_front, repeat_seed, sq_error, sr_candidates, sr_fit, Candidate, FitData, OperatorSet, SrConfig};
pub use select::{select_best, SymbolicModel};
pub use template::{canonical_template, CanonicalForm, Template};

impl serde::Serialize for SymbolicExpr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for SymbolicExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SymbolicExpr::parse(&s).map_err(serde::de::Error::custom)
    }
}
