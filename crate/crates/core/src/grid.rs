//! Spatial domain, point-cloud binning, density tensors and nondimensional scaling.
//!
//! Densities are stored in cells per bin, so summing a frame over space gives the
//! total cell count directly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when deciding bin membership and bin counts, so that
/// e.g. `1.5 / 0.1` yields 15 bins and a point at `x = 0.3` lands in bin 3.
const EDGE_EPS: f64 = 1e-9;

/// Tolerance for matching a record's time against the frame times.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Domain {
    pub fn new(x1: (f64, f64), x2: (f64, f64), t: (f64, f64)) -> Result<Self> {
        let d = Domain {
            x1_min: x1.0,
            x1_max: x1.1,
            x2_min: x2.0,
            x2_max: x2.1,
            t_min: t.0,
            t_max: t.1,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && hi > lo;
        if !ok(self.x1_min, self.x1_max) || !ok(self.x2_min, self.x2_max) || !ok(self.t_min, self.t_max)
        {
            return Err(Error::InvalidInput(format!("degenerate domain {self:?}")));
        }
        Ok(())
    }

    pub fn x1_extent(&self) -> f64 {
        self.x1_max - self.x1_min
    }

    pub fn x2_extent(&self) -> f64 {
        self.x2_max - self.x2_min
    }

    pub fn duration(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x1 >= self.x1_min
            && p.x1 <= self.x1_max
            && p.x2 >= self.x2_min
            && p.x2 <= self.x2_max
            && p.t >= self.t_min
            && p.t <= self.t_max
    }

    /// Same domain shifted in space.
    pub fn translated(&self, d1: f64, d2: f64) -> Domain {
        Domain {
            x1_min: self.x1_min + d1,
            x1_max: self.x1_max + d1,
            x2_min: self.x2_min + d2,
            x2_max: self.x2_max + d2,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x1: f64,
    pub x2: f64,
    pub t: f64,
}

/// Observed cell coordinates grouped by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    records: Vec<Point>,
    frame_times: Vec<f64>,
}

impl PointCloud {
    /// Builds a cloud from records and an explicit list of frame times.
    ///
    /// Frame times are sorted and deduplicated; every record must sit on one of them.
    pub fn new(records: Vec<Point>, frame_times: Vec<f64>) -> Result<Self> {
        let mut frames = frame_times;
        if frames.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("non-finite frame time".into()));
        }
        frames.sort_by(f64::total_cmp);
        frames.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);
        let cloud = PointCloud {
            records,
            frame_times: frames,
        };
        if let Some(bad) = cloud.records.iter().find(|p| cloud.frame_index(p.t).is_none()) {
            return Err(Error::InvalidInput(format!(
                "record at t = {} does not match any frame time",
                bad.t
            )));
        }
        Ok(cloud)
    }

    /// Builds a cloud whose frame times are the distinct record times.
    pub fn from_records(records: Vec<Point>) -> Result<Self> {
        let times = records.iter().map(|p| p.t).collect();
        Self::new(records, times)
    }

    pub fn records(&self) -> &[Point] {
        &self.records
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn frame_index(&self, t: f64) -> Option<usize> {
        let pos = self.frame_times.partition_point(|&f| f < t - TIME_EPS);
        (pos < self.frame_times.len() && (self.frame_times[pos] - t).abs() <= TIME_EPS)
            .then_some(pos)
    }

    pub fn frame_len(&self, s: usize) -> usize {
        let t = self.frame_times[s];
        self.records
            .iter()
            .filter(|p| (p.t - t).abs() <= TIME_EPS)
            .count()
    }

    pub fn translated(&self, d1: f64, d2: f64) -> PointCloud {
        PointCloud {
            records: self
                .records
                .iter()
                .map(|p| Point {
                    x1: p.x1 + d1,
                    x2: p.x2 + d2,
                    t: p.t,
                })
                .collect(),
            frame_times: self.frame_times.clone(),
        }
    }
}

/// Number of bins needed to tile `extent`; the last bin may be partial.
pub fn bins_along(extent: f64, bin_size: f64) -> usize {
    ((extent / bin_size) * (1.0 - EDGE_EPS)).ceil().max(1.0) as usize
}

fn bin_index(x: f64, min: f64, bin_size: f64, n: usize) -> usize {
    let r = (x - min) / bin_size;
    let idx = (r + EDGE_EPS * r.abs().max(1.0)).floor();
    (idx.max(0.0) as usize).min(n - 1)
}

/// Binned density tensor in cells per bin, `n_x1 × n_x2 × n_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    values: Vec<f64>,
    n_x1: usize,
    n_x2: usize,
    bin_size_x1: f64,
    bin_size_x2: f64,
    domain: Domain,
    times: Vec<f64>,
}

impl DensityField {
    /// `values` in frame-major order: index `(s * n_x1 + i) * n_x2 + j`.
    pub fn new(
        domain: Domain,
        bin_size_x1: f64,
        bin_size_x2: f64,
        times: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        domain.validate()?;
        if !(bin_size_x1 > 0.0 && bin_size_x2 > 0.0) {
            return Err(Error::InvalidInput("bin size must be positive".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("times must be strictly increasing".into()));
        }
        let n_x1 = bins_along(domain.x1_extent(), bin_size_x1);
        let n_x2 = bins_along(domain.x2_extent(), bin_size_x2);
        if values.len() != n_x1 * n_x2 * times.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} values for a {n_x1}x{n_x2}x{} field, got {}",
                n_x1 * n_x2 * times.len(),
                times.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!("density value {v} is not a finite non-negative number")));
        }
        Ok(DensityField {
            values,
            n_x1,
            n_x2,
            bin_size_x1,
            bin_size_x2,
            domain,
            times,
        })
    }

    pub fn zeros(domain: Domain, bin_size_x1: f64, bin_size_x2: f64, times: Vec<f64>) -> Result<Self> {
        let n = bins_along(domain.x1_extent(), bin_size_x1)
            * bins_along(domain.x2_extent(), bin_size_x2)
            * times.len();
        Self::new(domain, bin_size_x1, bin_size_x2, times, vec![0.0; n])
    }

    /// Builds a field from per-frame spatial arrays (each `n_x1 * n_x2`, row-major in `i`).
    pub fn from_frames(
        domain: Domain,
        bin_size_x1: f64,
        bin_size_x2: f64,
        times: Vec<f64>,
        frames: &[Vec<f64>],
    ) -> Result<Self> {
        let values = frames.iter().flatten().copied().collect();
        Self::new(domain, bin_size_x1, bin_size_x2, times, values)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_x1, self.n_x2, self.times.len())
    }

    pub fn n_x1(&self) -> usize {
        self.n_x1
    }

    pub fn n_x2(&self) -> usize {
        self.n_x2
    }

    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn bin_sizes(&self) -> (f64, f64) {
        (self.bin_size_x1, self.bin_size_x2)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self, i: usize, j: usize, s: usize) -> usize {
        (s * self.n_x1 + i) * self.n_x2 + j
    }

    /// Inverse of [`DensityField::index`].
    pub fn unravel(&self, flat: usize) -> (usize, usize, usize) {
        let j = flat % self.n_x2;
        let rest = flat / self.n_x2;
        (rest % self.n_x1, j, rest / self.n_x1)
    }

    pub fn get(&self, i: usize, j: usize, s: usize) -> f64 {
        self.values[self.index(i, j, s)]
    }

    /// Spatial slice at time index `s`, row-major in `i`.
    pub fn frame(&self, s: usize) -> &[f64] {
        let n = self.n_x1 * self.n_x2;
        &self.values[s * n..(s + 1) * n]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Geometric centre of bin `i` along x1 (the last bin may be clipped by the domain).
    pub fn center_x1(&self, i: usize) -> f64 {
        bin_center(self.domain.x1_min, self.domain.x1_max, self.bin_size_x1, i)
    }

    pub fn center_x2(&self, j: usize) -> f64 {
        bin_center(self.domain.x2_min, self.domain.x2_max, self.bin_size_x2, j)
    }

    /// Bounds `[lo, hi)` of bin `(i, j)` clipped to the domain.
    pub fn bin_bounds(&self, i: usize, j: usize) -> ((f64, f64), (f64, f64)) {
        let b = |min: f64, max: f64, h: f64, k: usize| {
            (min + k as f64 * h, (min + (k + 1) as f64 * h).min(max))
        };
        (
            b(self.domain.x1_min, self.domain.x1_max, self.bin_size_x1, i),
            b(self.domain.x2_min, self.domain.x2_max, self.bin_size_x2, j),
        )
    }

    /// Copy with the time axis replaced by a single frame.
    pub fn single_frame(&self, s: usize) -> DensityField {
        DensityField {
            values: self.frame(s).to_vec(),
            times: vec![self.times[s]],
            ..self.clone()
        }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<DensityField> {
        Self::new(self.domain, self.bin_size_x1, self.bin_size_x2, self.times.clone(), values)
    }

    pub fn metadata(&self) -> FieldMeta {
        FieldMeta {
            domain: self.domain,
            bin_size_x1: self.bin_size_x1,
            bin_size_x2: self.bin_size_x2,
            n_x1: self.n_x1,
            n_x2: self.n_x2,
            times: self.times.clone(),
        }
    }

    /// CSV rows `i,j,s,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["i", "j", "s", "value"])?;
        for s in 0..self.n_t() {
            for i in 0..self.n_x1 {
                for j in 0..self.n_x2 {
                    out.write_record(&[
                        i.to_string(),
                        j.to_string(),
                        s.to_string(),
                        self.get(i, j, s).to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`DensityField::write_csv`]; missing entries are zero.
    pub fn read_csv<R: Read>(r: R, meta: &FieldMeta) -> Result<Self> {
        let mut field = Self::zeros(meta.domain, meta.bin_size_x1, meta.bin_size_x2, meta.times.clone())?;
        if field.n_x1 != meta.n_x1 || field.n_x2 != meta.n_x2 {
            return Err(Error::InvalidInput(format!(
                "metadata grid {}x{} inconsistent with domain/bin sizes ({}x{})",
                meta.n_x1, meta.n_x2, field.n_x1, field.n_x2
            )));
        }
        let mut rdr = csv::Reader::from_reader(r);
        for row in rdr.deserialize() {
            let (i, j, s, v): (usize, usize, usize, f64) = row?;
            if i >= field.n_x1 || j >= field.n_x2 || s >= field.n_t() {
                return Err(Error::InvalidInput(format!("entry ({i},{j},{s}) outside the grid")));
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("invalid density {v} at ({i},{j},{s})")));
            }
            let k = field.index(i, j, s);
            field.values[k] = v;
        }
        Ok(field)
    }
}

fn bin_center(min: f64, max: f64, h: f64, k: usize) -> f64 {
    let lo = min + k as f64 * h;
    let hi = (lo + h).min(max);
    0.5 * (lo + hi)
}

/// Sidecar metadata for a persisted [`DensityField`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub domain: Domain,
    pub bin_size_x1: f64,
    pub bin_size_x2: f64,
    pub n_x1: usize,
    pub n_x2: usize,
    pub times: Vec<f64>,
}

/// Counts records per bin and frame.
pub fn bin_points(points: &PointCloud, domain: &Domain, bin_size: f64) -> Result<DensityField> {
    if !(bin_size > 0.0 && bin_size.is_finite()) {
        return Err(Error::InvalidInput(format!("bin size must be positive, got {bin_size}")));
    }
    domain.validate()?;
    let offenders: Vec<(usize, &Point)> = points
        .records()
        .iter()
        .enumerate()
        .filter(|(_, p)| !domain.contains(p))
        .collect();
    if !offenders.is_empty() {
        let preview = offenders
            .iter()
            .take(10)
            .map(|(k, p)| format!("#{k} ({}, {}, {})", p.x1, p.x2, p.t))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::OutOfDomain {
            count: offenders.len(),
            preview,
        });
    }
    let mut field = DensityField::zeros(*domain, bin_size, bin_size, points.frame_times().to_vec())?;
    for p in points.records() {
        let s = points.frame_index(p.t).expect("validated at construction");
        let i = bin_index(p.x1, domain.x1_min, bin_size, field.n_x1);
        let j = bin_index(p.x2, domain.x2_min, bin_size, field.n_x2);
        let k = field.index(i, j, s);
        field.values[k] += 1.0;
    }
    Ok(field)
}

/// Total cells at time index `s`.
pub fn total_count(field: &DensityField, s: usize) -> Result<f64> {
    if s >= field.n_t() {
        return Err(Error::IndexOutOfRange {
            index: s,
            len: field.n_t(),
        });
    }
    Ok(field.frame(s).iter().sum())
}

pub fn read_points_csv<R: Read>(r: R) -> Result<Vec<Point>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["x1", "x2", "t"] {
        return Err(Error::InvalidInput(format!(
            "point CSV header must be `x1,x2,t`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let p: Point = row?;
        if !(p.x1.is_finite() && p.x2.is_finite() && p.t.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite point {p:?}")));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_points_csv<W: Write>(w: W, points: &PointCloud) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x1", "x2", "t"])?;
    for p in points.records() {
        out.write_record(&[p.x1.to_string(), p.x2.to_string(), p.t.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Maps physical quantities to the unit-scale coordinates consumed by the networks.
///
/// Both spatial axes share the length scale `length`; densities are divided by `density`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub length: f64,
    pub time: f64,
    pub density: f64,
    pub x1_origin: f64,
    pub x2_origin: f64,
    pub t_origin: f64,
}

impl Scaling {
    pub fn identity() -> Self {
        Scaling {
            length: 1.0,
            time: 1.0,
            density: 1.0,
            x1_origin: 0.0,
            x2_origin: 0.0,
            t_origin: 0.0,
        }
    }

    pub fn scale_x1(&self, x1: f64) -> f64 {
        (x1 - self.x1_origin) / self.length
    }

    pub fn scale_x2(&self, x2: f64) -> f64 {
        (x2 - self.x2_origin) / self.length
    }

    pub fn scale_t(&self, t: f64) -> f64 {
        (t - self.t_origin) / self.time
    }

    pub fn unscale_x1(&self, x: f64) -> f64 {
        x * self.length + self.x1_origin
    }

    pub fn unscale_x2(&self, x: f64) -> f64 {
        x * self.length + self.x2_origin
    }

    pub fn unscale_t(&self, t: f64) -> f64 {
        t * self.time + self.t_origin
    }

    pub fn scale_density(&self, u: f64) -> f64 {
        u / self.density
    }

    pub fn unscale_density(&self, u: f64) -> f64 {
        u * self.density
    }

    /// mm²/day → scaled.
    pub fn scale_diffusivity(&self, d: f64) -> f64 {
        d * self.time / (self.length * self.length)
    }

    /// scaled → mm²/day.
    pub fn unscale_diffusivity(&self, d: f64) -> f64 {
        d * self.length * self.length / self.time
    }

    /// 1/day → scaled.
    pub fn scale_growth(&self, g: f64) -> f64 {
        g * self.time
    }

    pub fn unscale_growth(&self, g: f64) -> f64 {
        g / self.time
    }

    /// Scaled extents of the spatial axes and the time axis.
    pub fn scaled_box(&self, domain: &Domain) -> [f64; 3] {
        [
            domain.x1_extent() / self.length,
            domain.x2_extent() / self.length,
            domain.duration() / self.time,
        ]
    }
}

pub fn make_scaling(field: &DensityField) -> Result<Scaling> {
    let u_max = field.max_value();
    if u_max <= 0.0 {
        return Err(Error::DegenerateScaling("all-zero density field".into()));
    }
    let d = field.domain();
    Ok(Scaling {
        length: d.x1_extent().max(d.x2_extent()),
        time: d.duration(),
        density: u_max,
        x1_origin: d.x1_min,
        x2_origin: d.x2_min,
        t_origin: d.t_min,
    })
}
