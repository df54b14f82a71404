//! Density-weighted averages of the learned rate functions across splits.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binn::BinnModel;
use crate::error::{Error, Result};
use crate::grid::DensityField;
use crate::sr::FitData;

pub const HISTOGRAM_BINS: usize = 32;
pub const DEFAULT_GRID_POINTS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Diffusion,
    Growth,
}

impl CurveKind {
    pub fn units(self) -> &'static str {
        match self {
            CurveKind::Diffusion => "mm^2/day",
            CurveKind::Growth => "1/day",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Diffusion => "diffusion",
            CurveKind::Growth => "growth",
        }
    }
}

/// What the ensemble needs from one trained split.
pub trait SplitCurves {
    /// Scaled densities of the split's training entries.
    fn train_densities(&self) -> &[f64];
    /// Rate in physical units at scaled density `u`.
    fn predict(&self, kind: CurveKind, u: f64) -> f64;
}

/// A trained model together with its training densities.
#[derive(Debug, Clone)]
pub struct TrainedSplit {
    pub model: BinnModel,
    train_u: Vec<f64>,
}

impl TrainedSplit {
    pub fn new(model: BinnModel, field: &DensityField) -> Self {
        let train_u = model.training_densities(field);
        TrainedSplit { model, train_u }
    }
}

impl SplitCurves for TrainedSplit {
    fn train_densities(&self) -> &[f64] {
        &self.train_u
    }

    fn predict(&self, kind: CurveKind, u: f64) -> f64 {
        let phys = self.model.scaling.unscale_density(u);
        match kind {
            CurveKind::Diffusion => self.model.diffusion(phys),
            CurveKind::Growth => self.model.growth(phys),
        }
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("percentile of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportBounds {
    pub lo: f64,
    pub hi: f64,
    /// Each split's (p5, p95).
    pub per_split: Vec<(f64, f64)>,
}

/// Intersection of the splits' central 90% intervals.
pub fn support_bounds<M: SplitCurves>(models: &[M]) -> Result<SupportBounds> {
    if models.is_empty() {
        return Err(Error::InvalidInput("no models to ensemble".into()));
    }
    let per_split = models
        .iter()
        .map(|m| Ok((percentile(m.train_densities(), 0.05)?, percentile(m.train_densities(), 0.95)?)))
        .collect::<Result<Vec<_>>>()?;
    let lo = per_split.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let hi = per_split.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if lo >= hi {
        return Err(Error::EmptySupport { lo, hi });
    }
    Ok(SupportBounds { lo, hi, per_split })
}

/// Normalized histogram of `densities`, linearly interpolated between bin
/// centres and evaluated on `grid`; sums to one over the grid.
pub fn density_weights(densities: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if densities.is_empty() {
        return Err(Error::InvalidInput("no training densities".into()));
    }
    let min = densities.iter().copied().fold(f64::INFINITY, f64::min);
    let max = densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if max - min > 1e-12 {
        (min, max)
    } else {
        let half = 0.5 / HISTOGRAM_BINS as f64;
        (min - half, min + half)
    };
    let h = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut mass = [0.0f64; HISTOGRAM_BINS];
    for &d in densities {
        let b = (((d - lo) / h).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1) as usize;
        mass[b] += 1.0;
    }
    let n = densities.len() as f64;
    mass.iter_mut().for_each(|m| *m /= n);
    let centre = |b: usize| lo + (b as f64 + 0.5) * h;
    let raw: Vec<f64> = grid
        .iter()
        .map(|&u| {
            if u < lo || u > hi {
                0.0
            } else if u <= centre(0) {
                mass[0]
            } else if u >= centre(HISTOGRAM_BINS - 1) {
                mass[HISTOGRAM_BINS - 1]
            } else {
                let x = (u - lo) / h - 0.5;
                let b = (x.floor() as usize).min(HISTOGRAM_BINS - 2);
                let f = x - b as f64;
                mass[b] * (1.0 - f) + mass[b + 1] * f
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("training densities do not overlap the evaluation grid".into()));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCurve {
    pub kind: CurveKind,
    /// Scaled density.
    pub u: Vec<f64>,
    /// Physical units (see [`CurveKind::units`]).
    pub values: Vec<f64>,
    /// Aggregate density weight at each point.
    pub weights: Vec<f64>,
}

impl EnsembleCurve {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn fit_data(&self) -> Result<FitData> {
        Ok(FitData::new(self.u.clone(), self.values.clone(), self.weights.clone())?.with_kind(self.kind))
    }

    /// `U,value,weight` preceded by a `#` line naming kind and units.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# kind={} units={}", self.kind.name(), self.kind.units())?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["U", "value", "weight"])?;
        for k in 0..self.u.len() {
            out.write_record([self.u[k].to_string(), self.values[k].to_string(), self.weights[k].to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, kind: CurveKind) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let (mut u, mut values, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (k, rec) in rd.records().enumerate() {
            let rec = rec?;
            let get = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("curve row {}: bad column {i}", k + 1)))
            };
            u.push(get(0)?);
            values.push(get(1)?);
            weights.push(get(2)?);
        }
        Ok(EnsembleCurve { kind, u, values, weights })
    }
}

/// Order-independent sum of (weight, value) pairs.
fn weighted_mean(pairs: &mut [(f64, f64)]) -> Option<(f64, f64)> {
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    let wsum: f64 = pairs.iter().map(|p| p.0).sum();
    if wsum <= 0.0 {
        return None;
    }
    let num: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
    Some((num / wsum, wsum))
}

pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let mut g: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    g[n - 1] = hi;
    g
}

/// Weighted curves from externally supplied per-split weights.
pub fn curves_with_weights<M: SplitCurves>(models: &[M], grid: &[f64], weights: &[Vec<f64>]) -> (EnsembleCurve, EnsembleCurve) {
    let build = |kind: CurveKind| {
        let mut c = EnsembleCurve {
            kind,
            u: Vec::with_capacity(grid.len()),
            values: Vec::with_capacity(grid.len()),
            weights: Vec::with_capacity(grid.len()),
        };
        for (k, &u) in grid.iter().enumerate() {
            let mut pairs: Vec<(f64, f64)> = models.iter().zip(weights).map(|(m, w)| (w[k], m.predict(kind, u))).collect();
            match weighted_mean(&mut pairs) {
                Some((v, w)) => {
                    c.u.push(u);
                    c.values.push(v);
                    c.weights.push(w);
                }
                None => log::warn!("{} curve: zero aggregate weight at U = {u}, point dropped", kind.name()),
            }
        }
        c
    };
    let d = build(CurveKind::Diffusion);
    let g = build(CurveKind::Growth);
    (d, g)
}

/// Ensemble diffusion and growth curves on `n_g` points spanning the shared support.
pub fn ensemble_curves<M: SplitCurves>(models: &[M], n_g: usize) -> Result<(EnsembleCurve, EnsembleCurve, SupportBounds)> {
    if n_g == 0 {
        return Err(Error::InvalidInput("grid must have at least one point".into()));
    }
    let bounds = support_bounds(models)?;
    let grid = uniform_grid(bounds.lo, bounds.hi, n_g);
    let weights = models
        .iter()
        .map(|m| density_weights(m.train_densities(), &grid))
        .collect::<Result<Vec<_>>>()?;
    let (d, g) = curves_with_weights(models, &grid, &weights);
    if d.is_empty() {
        return Err(Error::EmptySupport { lo: bounds.lo, hi: bounds.hi });
    }
    Ok((d, g, bounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fake {
        u: Vec<f64>,
        d: f64,
        g: f64,
    }

    impl SplitCurves for Fake {
        fn train_densities(&self) -> &[f64] {
            &self.u
        }
        fn predict(&self, kind: CurveKind, u: f64) -> f64 {
            match kind {
                CurveKind::Diffusion => self.d * (1.0 + u),
                CurveKind::Growth => self.g * (1.0 - u),
            }
        }
    }

    fn ramp(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 0.5).unwrap(), 3.0);
        assert!((percentile(&v, 0.05).unwrap() - 1.2).abs() < 1e-12);
        assert!((percentile(&v, 0.95).unwrap() - 4.8).abs() < 1e-12);
    }

    #[test]
    fn identical_splits_give_their_own_bounds() {
        let u = ramp(101, 0.0, 1.0);
        let ms: Vec<Fake> = (0..5).map(|_| Fake { u: u.clone(), d: 1.0, g: 1.0 }).collect();
        let b = support_bounds(&ms).unwrap();
        assert!((b.lo - 0.05).abs() < 1e-12 && (b.hi - 0.95).abs() < 1e-12);
    }

    #[test]
    fn disjoint_supports_are_an_error() {
        let ms = vec![Fake { u: ramp(50, 0.0, 0.3), d: 1.0, g: 1.0 }, Fake { u: ramp(50, 0.6, 1.0), d: 1.0, g: 1.0 }];
        assert!(matches!(support_bounds(&ms), Err(Error::EmptySupport { .. })));
    }

    #[test]
    fn bounds_match_direct_percentiles() {
        // brute force: sort, index, interpolate by hand
        let splits: Vec<Vec<f64>> = (0..5).map(|s| (0..200).map(|k| ((k * 37 + s * 11) % 200) as f64 / 199.0 * (0.9 + 0.02 * s as f64)).collect()).collect();
        let ms: Vec<Fake> = splits.iter().map(|u| Fake { u: u.clone(), d: 1.0, g: 1.0 }).collect();
        let b = support_bounds(&ms).unwrap();
        let pct = |v: &Vec<f64>, q: f64| {
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pos = q * 199.0;
            let i = pos as usize;
            s[i] + (pos - i as f64) * (s[i + 1] - s[i])
        };
        let lo = splits.iter().map(|v| pct(v, 0.05)).fold(f64::MIN, f64::max);
        let hi = splits.iter().map(|v| pct(v, 0.95)).fold(f64::MAX, f64::min);
        assert!((b.lo - lo).abs() < 1e-14 && (b.hi - hi).abs() < 1e-14);
    }

    #[test]
    fn uniform_densities_give_flat_weights() {
        let u = ramp(3200, 0.0, 1.0);
        let grid = uniform_grid(0.1, 0.9, 64);
        let w = density_weights(&u, &grid).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for x in &w {
            assert!((x - 1.0 / 64.0).abs() < 1e-3 / 64.0, "{x}");
        }
    }

    #[test]
    fn constant_densities_give_a_spike() {
        let grid = uniform_grid(0.0, 1.0, 129);
        let w = density_weights(&[0.5; 40], &grid).unwrap();
        let nz: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 0.0).collect();
        assert_eq!(nz, vec![64]);
        assert_eq!(w[64], 1.0);
    }

    #[test]
    fn weights_match_independent_histogram() {
        // four values in four distinct bins of [0, 1]
        let mut u = vec![0.0, 1.0];
        u.extend([0.2; 6]);
        u.extend([0.7; 2]);
        let h = 1.0 / 32.0;
        let bin = |x: f64| ((x / h).floor() as usize).min(31);
        let mut mass = [0.0; 32];
        for &x in &u {
            mass[bin(x)] += 0.1;
        }
        // grid points at bin centres pick the bin mass directly
        let grid: Vec<f64> = (0..32).map(|b| (b as f64 + 0.5) * h).collect();
        let w = density_weights(&u, &grid).unwrap();
        for b in 0..32 {
            assert!((w[b] - mass[b]).abs() < 1e-12, "bin {b}");
        }
    }

    #[test]
    fn two_models_weighted_mean() {
        struct Const(f64, Vec<f64>);
        impl SplitCurves for Const {
            fn train_densities(&self) -> &[f64] {
                &self.1
            }
            fn predict(&self, _: CurveKind, _: f64) -> f64 {
                self.0
            }
        }
        let ms = vec![Const(1.0, vec![]), Const(3.0, vec![])];
        let grid = [0.5];
        let (d, g) = curves_with_weights(&ms, &grid, &[vec![0.25], vec![0.75]]);
        assert_eq!(d.values, vec![2.5]);
        assert_eq!(g.values, vec![2.5]);
        assert_eq!(d.weights, vec![1.0]);
    }

    #[test]
    fn zero_weight_points_are_dropped() {
        let ms = vec![Fake { u: vec![], d: 1.0, g: 1.0 }];
        let (d, _) = curves_with_weights(&ms, &[0.1, 0.2, 0.3], &[vec![1.0, 0.0, 1.0]]);
        assert_eq!(d.u, vec![0.1, 0.3]);
    }

    #[test]
    fn identical_models_reproduce_the_single_prediction() {
        let u = ramp(300, 0.0, 1.0);
        let ms: Vec<Fake> = (0..5).map(|_| Fake { u: u.clone(), d: 0.02, g: 0.8 }).collect();
        let (d, g, _) = ensemble_curves(&ms, DEFAULT_GRID_POINTS).unwrap();
        assert_eq!(d.len(), 128);
        for k in 0..d.len() {
            assert!((d.values[k] - 0.02 * (1.0 + d.u[k])).abs() < 1e-15);
            assert!((g.values[k] - 0.8 * (1.0 - g.u[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_weights_give_the_plain_mean() {
        let ms: Vec<Fake> = [1.0, 2.0, 4.0].iter().map(|&d| Fake { u: vec![], d, g: d }).collect();
        let grid = [0.0, 0.5];
        let w = vec![vec![0.5, 0.5]; 3];
        let (d, _) = curves_with_weights(&ms, &grid, &w);
        assert!((d.values[0] - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn curve_csv_round_trip() {
        let c = EnsembleCurve {
            kind: CurveKind::Growth,
            u: vec![0.1, 0.2],
            values: vec![0.9, 0.8000000000000002],
            weights: vec![0.5, 0.5],
        };
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# kind=growth units=1/day\nU,value,weight\n"));
        assert_eq!(EnsembleCurve::read_csv(&buf[..], CurveKind::Growth).unwrap(), c);
    }

    proptest! {
        #[test]
        fn convex_bounded_and_permutation_invariant(
            ds in proptest::collection::vec(0.01f64..2.0, 5),
            shifts in proptest::collection::vec(0.0f64..0.2, 5),
        ) {
            let ms: Vec<Fake> = ds.iter().zip(&shifts).map(|(&d, &s)| Fake { u: ramp(200, s, 0.8 + s), d, g: d }).collect();
            let (dc, gc, b) = ensemble_curves(&ms, 64).unwrap();
            for k in 0..dc.len() {
                prop_assert!(dc.u[k] >= b.lo && dc.u[k] <= b.hi);
                let preds: Vec<f64> = ms.iter().map(|m| m.predict(CurveKind::Diffusion, dc.u[k])).collect();
                let lo = preds.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = preds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(dc.values[k] >= lo * (1.0 - 1e-12) && dc.values[k] <= hi * (1.0 + 1e-12));
            }
            let mut rev = ms;
            rev.reverse();
            let (dr, gr, _) = ensemble_curves(&rev, 64).unwrap();
            prop_assert_eq!(dr, dc);
            prop_assert_eq!(gr, gc);
        }
    }
}
