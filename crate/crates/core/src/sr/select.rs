//! Template-frequency selection across repeated runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::expr::SymbolicExpr;
use super::gp::Candidate;
use super::template::{CanonicalForm, Template};
use crate::ensemble::CurveKind;
use crate::error::{Error, Result};

/// The retained functional form for one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicModel {
    pub kind: Option<CurveKind>,
    pub template: Template,
    pub expr: SymbolicExpr,
    /// Coefficients of the normal form in placeholder order.
    pub coefficients: Vec<f64>,
    pub sq_error: f64,
    pub seed: u64,
    /// Candidates sharing the template.
    pub frequency: usize,
    pub n_candidates: usize,
}

/// Picks the most frequent template (ties: fewer nodes, then lower error)
/// and, within it, the candidate with the lowest squared error.
pub fn select_best(candidates: &[Candidate]) -> Result<SymbolicModel> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("select_best needs at least one candidate".into()));
    }
    let mut groups: BTreeMap<Template, Vec<(&Candidate, CanonicalForm)>> = BTreeMap::new();
    for c in candidates {
        let form = CanonicalForm::of(&c.expr);
        groups.entry(form.template()).or_default().push((c, form));
    }
    let key_err = |c: &Candidate| if c.sq_error.is_nan() { f64::INFINITY } else { c.sq_error };
    let mut ranked: Vec<(Template, (&Candidate, CanonicalForm), usize)> = groups
        .into_iter()
        .map(|(t, members)| {
            let n = members.len();
            let best = members
                .into_iter()
                .min_by(|a, b| {
                    key_err(a.0)
                        .total_cmp(&key_err(b.0))
                        .then_with(|| a.0.expr.to_string().cmp(&b.0.expr.to_string()))
                        .then_with(|| a.0.seed.cmp(&b.0.seed))
                })
                .expect("non-empty group");
            (t, best, n)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.2.cmp(&a.2)
            .then_with(|| a.0.complexity.cmp(&b.0.complexity))
            .then_with(|| key_err(a.1 .0).total_cmp(&key_err(b.1 .0)))
            .then_with(|| a.0.text.cmp(&b.0.text))
    });
    let (template, (cand, form), frequency) = ranked.swap_remove(0);
    Ok(SymbolicModel {
        kind: cand.kind,
        template,
        expr: cand.expr.clone(),
        coefficients: form.coefficients(),
        sq_error: cand.sq_error,
        seed: cand.seed,
        frequency,
        n_candidates: candidates.len(),
    })
}

impl SymbolicModel {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(s: &str, err: f64, seed: u64) -> Candidate {
        Candidate {
            expr: SymbolicExpr::parse(s).unwrap(),
            sq_error: err,
            seed,
            kind: None,
        }
    }

    #[test]
    fn majority_template_wins_with_its_best_member() {
        let cs = vec![
            cand("0.5 - 0.3*U", 1e-3, 1),
            cand("0.52 - 0.31*U", 1e-5, 2),
            cand("0.49 - 0.29*U", 1e-4, 3),
            cand("0.4*exp(-0.7*U)", 1e-9, 4),
        ];
        let m = select_best(&cs).unwrap();
        assert_eq!(m.template.text, "C0 - C1*U");
        assert_eq!(m.seed, 2);
        assert_eq!(m.frequency, 3);
        assert_eq!(m.n_candidates, 4);
    }

    #[test]
    fn frequency_ties_go_to_the_simpler_template() {
        let cs = vec![
            cand("0.5 - 0.3*U", 1e-3, 1),
            cand("0.5 - 0.2*U + 0.1*exp(-3*U)", 1e-8, 2),
            cand("0.6 - 0.3*U", 1e-3, 3),
            cand("0.5 - 0.25*U + 0.2*exp(-2*U)", 1e-8, 4),
        ];
        let m = select_best(&cs).unwrap();
        assert_eq!(m.template.text, "C0 - C1*U");
        assert!(m.template.complexity < canonical(&cs[1]).complexity);
    }

    fn canonical(c: &Candidate) -> Template {
        CanonicalForm::of(&c.expr).template()
    }

    #[test]
    fn single_candidate_is_returned() {
        let m = select_best(&[cand("0.7*exp(-1.5*U)", 0.0, 9)]).unwrap();
        assert_eq!(m.expr.to_string(), "0.7*exp(-1.5*U)");
        assert_eq!(m.coefficients, vec![0.7, -1.5]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn order_does_not_matter() {
        let mut cs = vec![
            cand("0.5 - 0.3*U", 1e-3, 1),
            cand("0.4*exp(-0.7*U)", 1e-9, 4),
            cand("0.5 - 0.3*U", 1e-3, 7),
            cand("0.41*exp(-0.7*U)", 1e-9, 5),
        ];
        let a = select_best(&cs).unwrap();
        cs.reverse();
        assert_eq!(select_best(&cs).unwrap(), a);
    }

    #[test]
    fn model_json_round_trip() {
        let m = select_best(&[cand("0.0132 + 0.0198*exp(2.05*U)", 1.5e-9, 3)]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: SymbolicModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
