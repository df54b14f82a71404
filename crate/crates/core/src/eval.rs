//! Total cell-count curves and their comparison against the data.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{total_count, DensityField, Scaling};
use crate::mlp::{NetworkParams, Role};

/// Sum of the density network over the bin centres of `grid` at each time.
pub fn count_from_net(u_net: &NetworkParams, scaling: &Scaling, grid: &DensityField, times: &[f64]) -> Result<Vec<f64>> {
    if u_net.role() != Role::U {
        return Err(Error::InvalidInput("counts need the density network".into()));
    }
    let x1: Vec<f64> = (0..grid.n_x1()).map(|i| scaling.scale_x1(grid.center_x1(i))).collect();
    let x2: Vec<f64> = (0..grid.n_x2()).map(|j| scaling.scale_x2(grid.center_x2(j))).collect();
    Ok(times
        .iter()
        .map(|&t| {
            let ts = scaling.scale_t(t);
            let mut n = 0.0;
            for &a in &x1 {
                for &b in &x2 {
                    n += u_net.forward(&[a, b, ts]);
                }
            }
            scaling.unscale_density(n)
        })
        .collect())
}

pub fn count_from_solve(field: &DensityField) -> Result<Vec<f64>> {
    (0..field.n_t()).map(|s| total_count(field, s)).collect()
}

/// The observed count and up to three model curves on shared times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CountCurves {
    pub times: Vec<f64>,
    pub data: Option<Vec<f64>>,
    pub net: Option<Vec<f64>>,
    pub fwd: Option<Vec<f64>>,
    pub sr: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub rel_l2: f64,
    pub final_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CountMetrics {
    pub net: Option<CurveMetrics>,
    pub fwd: Option<CurveMetrics>,
    pub sr: Option<CurveMetrics>,
}

const COLUMNS: [&str; 5] = ["t", "N_data", "N_u", "N_fwd", "N_SR"];

impl CountCurves {
    pub fn new(times: Vec<f64>) -> Self {
        CountCurves {
            times,
            ..Default::default()
        }
    }

    fn columns(&self) -> [Option<&Vec<f64>>; 4] {
        [self.data.as_ref(), self.net.as_ref(), self.fwd.as_ref(), self.sr.as_ref()]
    }

    pub fn validate(&self) -> Result<()> {
        for (c, name) in self.columns().iter().zip(&COLUMNS[1..]) {
            if let Some(c) = c {
                if c.len() != self.times.len() {
                    return Err(Error::InvalidInput(format!("{name} has {} values for {} times", c.len(), self.times.len())));
                }
                if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidInput(format!("{name} has a negative or non-finite count")));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.validate()?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(COLUMNS)?;
        for (s, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.columns().iter().map(|c| c.map(|c| c[s].to_string()).unwrap_or_default()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`CountCurves::write_csv`]; a column with any blank cell is absent.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        if rdr.headers()?.iter().collect::<Vec<_>>() != COLUMNS {
            return Err(Error::InvalidInput(format!("count curves need the header {}", COLUMNS.join(","))));
        }
        let mut cols: [Vec<Option<f64>>; 5] = Default::default();
        for rec in rdr.records() {
            let rec = rec?;
            for (k, col) in cols.iter_mut().enumerate() {
                let cell = rec.get(k).unwrap_or("").trim();
                col.push(if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse().map_err(|_| Error::InvalidInput(format!("bad number `{cell}` in {}", COLUMNS[k])))?)
                });
            }
        }
        let full = |c: &[Option<f64>]| -> Option<Vec<f64>> { c.iter().copied().collect() };
        let times = full(&cols[0]).ok_or_else(|| Error::InvalidInput("blank time cell".into()))?;
        let curves = CountCurves {
            times,
            data: full(&cols[1]),
            net: full(&cols[2]),
            fwd: full(&cols[3]),
            sr: full(&cols[4]),
        };
        curves.validate()?;
        Ok(curves)
    }
}

/// Relative L2 distance and final-time relative error of `c` against `reference`.
pub fn curve_metrics(c: &[f64], reference: &[f64]) -> Result<CurveMetrics> {
    if c.len() != reference.len() || c.is_empty() {
        return Err(Error::InvalidInput("curves must be non-empty and of equal length".into()));
    }
    let norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let last = reference[reference.len() - 1];
    if norm == 0.0 || last == 0.0 {
        return Err(Error::InvalidInput("reference curve must be non-zero".into()));
    }
    let diff = c.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(CurveMetrics {
        rel_l2: diff / norm,
        final_err: (c[c.len() - 1] - last).abs() / last,
    })
}

/// Metrics of every present model curve against `N_data`; empty without data.
pub fn compare(curves: &CountCurves) -> Result<CountMetrics> {
    curves.validate()?;
    let Some(data) = &curves.data else {
        return Ok(CountMetrics::default());
    };
    let m = |c: &Option<Vec<f64>>| c.as_ref().map(|c| curve_metrics(c, data)).transpose();
    Ok(CountMetrics {
        net: m(&curves.net)?,
        fwd: m(&curves.fwd)?,
        sr: m(&curves.sr)?,
    })
}
