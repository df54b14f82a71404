//! Forward solver for `u_t = ∇·(D(u)∇u) + G(u)u` on the binned grid.
//!
//! Cell-centred finite volumes with zero flux through the outer faces and
//! classical RK4 in time. Face diffusivity is `D` at the mean of the two
//! adjacent cell values. Everything is in physical units.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, Domain, Scaling};
use crate::mlp::{NetworkParams, Role};
use crate::sr::SymbolicExpr;

pub const SCHEME: &str = "cell-centred finite volume, arithmetic-mean face density, zero-flux boundary, explicit RK4";

/// A density-dependent rate in physical units.
#[derive(Clone)]
pub enum RateFn {
    Constant(f64),
    /// `expr(u / density_scale)`.
    Symbolic { expr: SymbolicExpr, density_scale: f64 },
    /// A diffusion or growth network; the role picks the unit conversion.
    Mlp { net: NetworkParams, scaling: Scaling },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for RateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl RateFn {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        RateFn::Custom(Arc::new(f))
    }

    pub fn eval(&self, u: f64) -> Result<f64> {
        match self {
            RateFn::Constant(c) => Ok(*c),
            RateFn::Symbolic { expr, density_scale } => expr.eval(u / density_scale),
            RateFn::Mlp { net, scaling } => {
                let raw = net.forward(&[scaling.scale_density(u)]);
                Ok(match net.role() {
                    Role::G => scaling.unscale_growth(raw),
                    _ => scaling.unscale_diffusivity(raw),
                })
            }
            RateFn::Custom(f) => Ok(f(u)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            RateFn::Constant(c) => format!("constant {c}"),
            RateFn::Symbolic { expr, density_scale } => format!("symbolic {expr} with U = u/{density_scale}"),
            RateFn::Mlp { net, .. } => format!("mlp ({} parameters)", net.n_params()),
            RateFn::Custom(_) => "custom".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepperSettings {
    /// Fraction of the diffusive limit `min(Δx²) / (4 max D)`.
    pub safety: f64,
    pub max_dt: f64,
    /// Steps below this (not forced by an output time) are an instability.
    pub min_dt: f64,
}

impl Default for StepperSettings {
    fn default() -> Self {
        StepperSettings {
            safety: 0.9,
            max_dt: 0.01,
            min_dt: 1e-9,
        }
    }
}

/// Uniform cell-centred grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub n_x1: usize,
    pub n_x2: usize,
    pub dx1: f64,
    pub dx2: f64,
}

impl Geometry {
    pub fn cells(&self) -> usize {
        self.n_x1 * self.n_x2
    }
}

#[derive(Debug, Clone)]
pub struct SolveSpec {
    pub domain: Domain,
    pub geometry: Geometry,
    /// Initial density at `t0`, index `i * n_x2 + j`.
    pub initial: Vec<f64>,
    pub t0: f64,
    /// Increasing output times, all `>= t0`.
    pub times: Vec<f64>,
    pub stepper: StepperSettings,
}

impl SolveSpec {
    /// Grid, initial frame and output times taken from `field`.
    pub fn from_field(field: &DensityField) -> SolveSpec {
        let (b1, b2) = field.bin_sizes();
        SolveSpec {
            domain: *field.domain(),
            geometry: Geometry {
                n_x1: field.n_x1(),
                n_x2: field.n_x2(),
                dx1: b1,
                dx2: b2,
            },
            initial: field.frame(0).to_vec(),
            t0: field.times()[0],
            times: field.times().to_vec(),
            stepper: StepperSettings::default(),
        }
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Self {
        self.initial = initial;
        self
    }

    fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.n_x1 == 0 || g.n_x2 == 0 || !(g.dx1 > 0.0 && g.dx2 > 0.0) {
            return Err(Error::InvalidInput("solver grid must be non-empty with positive spacing".into()));
        }
        if self.initial.len() != g.cells() {
            return Err(Error::InvalidInput(format!("initial field has {} cells, grid has {}", self.initial.len(), g.cells())));
        }
        if self.initial.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("initial field must be finite and non-negative".into()));
        }
        if self.times.is_empty() || self.times[0] < self.t0 || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("output times must be increasing and not before t0".into()));
        }
        let s = &self.stepper;
        if !(s.safety > 0.0 && s.safety <= 1.0 && s.max_dt > 0.0 && s.min_dt > 0.0) {
            return Err(Error::InvalidInput("stepper needs 0 < safety <= 1 and positive dt bounds".into()));
        }
        Ok(())
    }
}

/// One accepted time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub max_d: f64,
    pub clamped_mass: f64,
    pub total_mass: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub field: DensityField,
    pub steps: Vec<StepRecord>,
    pub clamped_mass: f64,
}

impl Solution {
    pub fn write_diagnostics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.steps {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn instability(step: usize, time: f64, max_d: f64, reason: impl Into<String>) -> Error {
    Error::Instability {
        step,
        time,
        max_d,
        reason: reason.into(),
    }
}

/// `∇·(D(u)∇u) + G(u)u` on the grid; also returns the largest face diffusivity.
pub fn rd_rhs(d: &RateFn, g: &RateFn, geo: &Geometry, u: &[f64], out: &mut [f64]) -> Result<f64> {
    let (n1, n2) = (geo.n_x1, geo.n_x2);
    let mut max_d: f64 = 0.0;
    for (k, o) in out.iter_mut().enumerate() {
        *o = g.eval(u[k])? * u[k];
    }
    let mut face = |a: usize, b: usize, h: f64, out: &mut [f64]| -> Result<()> {
        let dm = d.eval(0.5 * (u[a] + u[b]))?;
        if !dm.is_finite() || dm < 0.0 {
            return Err(Error::Guard(format!("diffusivity {dm} at density {}", 0.5 * (u[a] + u[b]))));
        }
        max_d = max_d.max(dm);
        let flux = dm * (u[b] - u[a]) / (h * h);
        out[a] += flux;
        out[b] -= flux;
        Ok(())
    };
    for i in 0..n1 {
        for j in 0..n2 {
            let k = i * n2 + j;
            if i + 1 < n1 {
                face(k, k + n2, geo.dx1, out)?;
            }
            if j + 1 < n2 {
                face(k, k + 1, geo.dx2, out)?;
            }
        }
    }
    Ok(max_d)
}

/// Integrates from `spec.t0` through every output time.
pub fn solve_rd(d: &RateFn, g: &RateFn, spec: &SolveSpec) -> Result<Solution> {
    spec.validate()?;
    let geo = spec.geometry;
    let n = geo.cells();
    let h2 = geo.dx1.min(geo.dx2).powi(2);
    let st = spec.stepper;
    let mut u = spec.initial.clone();
    let mut t = spec.t0;
    let mut frames: Vec<Vec<f64>> = Vec::with_capacity(spec.times.len());
    let mut steps = Vec::new();
    let mut clamped_total = 0.0;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut step = 0usize;
    let wrap = |step: usize, t: f64, e: Error| match e {
        Error::Guard(m) => instability(step, t, f64::NAN, m),
        other => other,
    };
    for &t_out in &spec.times {
        while t_out - t > 1e-12 * t_out.abs().max(1.0) {
            let max_d = rd_rhs(d, g, &geo, &u, &mut k1).map_err(|e| wrap(step, t, e))?;
            let dt_cfl = if max_d > 0.0 { st.safety * h2 / (4.0 * max_d) } else { f64::INFINITY };
            if dt_cfl < st.min_dt {
                return Err(instability(step, t, max_d, format!("time step {dt_cfl:.3e} below the minimum {:.3e}", st.min_dt)));
            }
            let dt = dt_cfl.min(st.max_dt).min(t_out - t);
            for k in 0..n {
                tmp[k] = u[k] + 0.5 * dt * k1[k];
            }
            rd_rhs(d, g, &geo, &tmp, &mut k2).map_err(|e| wrap(step, t, e))?;
            for k in 0..n {
                tmp[k] = u[k] + 0.5 * dt * k2[k];
            }
            rd_rhs(d, g, &geo, &tmp, &mut k3).map_err(|e| wrap(step, t, e))?;
            for k in 0..n {
                tmp[k] = u[k] + dt * k3[k];
            }
            rd_rhs(d, g, &geo, &tmp, &mut k4).map_err(|e| wrap(step, t, e))?;
            let mut clamped = 0.0;
            for k in 0..n {
                u[k] += dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
                if u[k] < 0.0 {
                    clamped -= u[k];
                    u[k] = 0.0;
                }
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(instability(step, t, max_d, "non-finite density"));
            }
            step += 1;
            t = if t_out - (t + dt) <= 1e-12 * t_out.abs().max(1.0) { t_out } else { t + dt };
            clamped_total += clamped;
            steps.push(StepRecord {
                step,
                t,
                dt,
                max_d,
                clamped_mass: clamped,
                total_mass: u.iter().sum(),
            });
        }
        frames.push(u.clone());
    }
    if clamped_total > 0.0 {
        log::info!("solver clamped {clamped_total:.3e} cells of negative density");
    }
    let field = DensityField::from_frames(spec.domain, geo.dx1, geo.dx2, spec.times.clone(), &frames)?;
    Ok(Solution {
        field,
        steps,
        clamped_mass: clamped_total,
    })
}

/// The density network at scaled time zero, evaluated at every bin centre of
/// `grid` and returned in cells per bin as a one-frame field.
pub fn ic_from_density_net(u_net: &NetworkParams, scaling: &Scaling, grid: &DensityField) -> Result<DensityField> {
    if u_net.role() != Role::U {
        return Err(Error::InvalidInput("initial condition needs the density network".into()));
    }
    let mut values = Vec::with_capacity(grid.n_x1() * grid.n_x2());
    for i in 0..grid.n_x1() {
        let x1 = scaling.scale_x1(grid.center_x1(i));
        for j in 0..grid.n_x2() {
            let x2 = scaling.scale_x2(grid.center_x2(j));
            values.push(scaling.unscale_density(u_net.forward(&[x1, x2, 0.0])));
        }
    }
    let (b1, b2) = grid.bin_sizes();
    DensityField::new(*grid.domain(), b1, b2, vec![scaling.unscale_t(0.0)], values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_spec(n: usize, initial: impl Fn(f64, f64) -> f64, times: Vec<f64>) -> SolveSpec {
        let h = 1.0 / n as f64;
        let mut init = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                init.push(initial((i as f64 + 0.5) * h, (j as f64 + 0.5) * h));
            }
        }
        SolveSpec {
            domain: Domain::new((0.0, 1.0), (0.0, 1.0), (0.0, 10.0)).unwrap(),
            geometry: Geometry { n_x1: n, n_x2: n, dx1: h, dx2: h },
            initial: init,
            t0: 0.0,
            times,
            stepper: StepperSettings::default(),
        }
    }

    fn bump(x: f64, y: f64) -> f64 {
        1.0 + 0.5 * (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos()
    }

    #[test]
    fn zero_rates_leave_the_field_unchanged() {
        let spec = square_spec(6, bump, vec![0.0, 0.5, 1.0]);
        let sol = solve_rd(&RateFn::Constant(0.0), &RateFn::Constant(0.0), &spec).unwrap();
        for s in 0..3 {
            assert_eq!(sol.field.frame(s), &spec.initial[..]);
        }
    }

    #[test]
    fn pure_diffusion_conserves_mass() {
        let spec = square_spec(10, |x, y| (-20.0 * ((x - 0.3).powi(2) + (y - 0.6).powi(2))).exp() * 30.0, vec![0.0, 1.0, 2.0, 5.0]);
        let d = RateFn::custom(|u| 0.01 + 0.002 * u);
        let sol = solve_rd(&d, &RateFn::Constant(0.0), &spec).unwrap();
        let m0: f64 = spec.initial.iter().sum();
        for s in 0..4 {
            let m: f64 = sol.field.frame(s).iter().sum();
            assert!(((m - m0) / m0).abs() < 1e-8, "frame {s}: {m} vs {m0}");
        }
        assert_eq!(sol.clamped_mass, 0.0);
    }

    #[test]
    fn uniform_logistic_matches_closed_form() {
        let (r, k, u0) = (1.0, 25.0, 3.0);
        let spec = square_spec(4, |_, _| u0, vec![0.0, 0.5, 1.0, 2.5]);
        let g = RateFn::custom(move |u| r * (1.0 - u / k));
        let sol = solve_rd(&RateFn::Constant(0.02), &g, &spec).unwrap();
        for (s, &t) in spec.times.iter().enumerate() {
            let exact = k * u0 * (r * t).exp() / (k + u0 * ((r * t).exp() - 1.0));
            for v in sol.field.frame(s) {
                assert!(((v - exact) / exact).abs() < 1e-4, "t = {t}: {v} vs {exact}");
            }
        }
    }

    #[test]
    fn exponential_growth_without_diffusion() {
        let r = 0.7;
        let spec = square_spec(3, bump, vec![0.0, 1.0, 2.0]);
        let sol = solve_rd(&RateFn::Constant(0.0), &RateFn::Constant(r), &spec).unwrap();
        let n0: f64 = spec.initial.iter().sum();
        for (s, &t) in spec.times.iter().enumerate() {
            let n: f64 = sol.field.frame(s).iter().sum();
            assert!(((n - n0 * (r * t).exp()) / n).abs() < 1e-8);
        }
    }

    fn restrict(fine: &[f64], nf: usize, nc: usize) -> Vec<f64> {
        let f = nf / nc;
        let mut out = vec![0.0; nc * nc];
        for i in 0..nf {
            for j in 0..nf {
                out[(i / f) * nc + j / f] += fine[i * nf + j] / (f * f) as f64;
            }
        }
        out
    }

    #[test]
    fn second_order_in_space() {
        let d = RateFn::custom(|u| 0.02 + 0.03 * u);
        let g = RateFn::custom(|u| 0.5 * (1.0 - u / 3.0));
        let t_end = 0.5;
        let ic = |x: f64, y: f64| 1.0 + 0.5 * (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos() + 0.3 * (2.0 * std::f64::consts::PI * x).cos();
        let run = |n: usize| {
            let mut spec = square_spec(n, ic, vec![t_end]);
            // cell averages of the smooth initial condition (midpoint rule on a 4x4 sub-grid)
            let h = 1.0 / n as f64;
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for a in 0..4 {
                        for b in 0..4 {
                            acc += ic((i as f64 + (a as f64 + 0.5) / 4.0) * h, (j as f64 + (b as f64 + 0.5) / 4.0) * h);
                        }
                    }
                    spec.initial[i * n + j] = acc / 16.0;
                }
            }
            spec.stepper.max_dt = 1e-3;
            solve_rd(&d, &g, &spec).unwrap().field.frame(0).to_vec()
        };
        let reference = run(64);
        let err = |n: usize| {
            let c = run(n);
            let r = restrict(&reference, 64, n);
            (c.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n * n) as f64).sqrt()
        };
        let (e8, e16) = (err(8), err(16));
        let p = (e8 / e16).log2();
        assert!(p > 1.8, "order {p:.3} (errors {e8:.3e} {e16:.3e})");
    }

    #[test]
    fn symmetric_initial_data_stays_symmetric() {
        let n = 9;
        let spec = square_spec(n, |x, y| 10.0 * (-30.0 * ((x - 0.5).powi(2) + (y - 0.3).powi(2))).exp(), vec![0.5, 1.0]);
        let d = RateFn::custom(|u| 0.01 + 0.02 * (u / 10.0).exp());
        let g = RateFn::custom(|u| 1.0 - u / 25.0);
        let sol = solve_rd(&d, &g, &spec).unwrap();
        for s in 0..2 {
            let f = sol.field.frame(s);
            for i in 0..n {
                for j in 0..n {
                    assert!((f[i * n + j] - f[(n - 1 - i) * n + j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn conservative_rhs_matches_expanded_form() {
        // manufactured u = 1 + 0.5 cos(pi x) cos(pi y) has zero normal derivative on the boundary
        let pi = std::f64::consts::PI;
        let dfun = |u: f64| 0.02 + 0.03 * u * u;
        let dprime = |u: f64| 0.06 * u;
        let gfun = |u: f64| 0.5 - 0.1 * u;
        let err = |n: usize| {
            let spec = square_spec(n, bump, vec![0.0]);
            let mut out = vec![0.0; n * n];
            rd_rhs(&RateFn::custom(dfun), &RateFn::custom(gfun), &spec.geometry, &spec.initial, &mut out).unwrap();
            let h = 1.0 / n as f64;
            let mut worst: f64 = 0.0;
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                    let u = bump(x, y);
                    let ux = -0.5 * pi * (pi * x).sin() * (pi * y).cos();
                    let uy = -0.5 * pi * (pi * x).cos() * (pi * y).sin();
                    let lap = -2.0 * pi * pi * (u - 1.0);
                    let exact = dprime(u) * (ux * ux + uy * uy) + dfun(u) * lap + gfun(u) * u;
                    worst = worst.max((out[i * n + j] - exact).abs());
                }
            }
            worst
        };
        let (a, b) = (err(32), err(64));
        assert!((a / b).log2() > 1.8, "{a:e} {b:e}");
    }

    #[test]
    fn negative_diffusivity_is_reported() {
        let spec = square_spec(4, bump, vec![1.0]);
        let r = solve_rd(&RateFn::custom(|u| 0.5 - u), &RateFn::Constant(0.0), &spec);
        assert!(matches!(r, Err(Error::Instability { .. })));
    }

    #[test]
    fn exploding_diffusivity_underflows_dt() {
        let spec = square_spec(4, bump, vec![1.0]);
        let r = solve_rd(&RateFn::Constant(1e12), &RateFn::Constant(0.0), &spec);
        match r {
            Err(Error::Instability { max_d, .. }) => assert_eq!(max_d, 1e12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn symbolic_rates_use_the_density_scale() {
        let r = RateFn::Symbolic {
            expr: SymbolicExpr::parse("1 - U").unwrap(),
            density_scale: 25.0,
        };
        assert!((r.eval(5.0).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_density_net_gives_ln2_times_scale() {
        let grid = DensityField::zeros(Domain::new((0.0, 1.5), (0.0, 1.1), (0.0, 2.0)).unwrap(), 0.1, 0.1, vec![0.0, 2.0]).unwrap();
        let net = NetworkParams::zeros(Role::U, &[4, 4]).unwrap();
        let scaling = Scaling { density: 40.0, ..Scaling::identity() };
        let ic = ic_from_density_net(&net, &scaling, &grid).unwrap();
        assert_eq!(ic.shape(), (15, 11, 1));
        for v in ic.values() {
            assert!((v - 40.0 * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn diagnostics_csv_has_a_header() {
        let spec = square_spec(3, bump, vec![0.02]);
        let sol = solve_rd(&RateFn::Constant(0.01), &RateFn::Constant(0.0), &spec).unwrap();
        let mut buf = Vec::new();
        sol.write_diagnostics_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("step,t,dt,max_d,clamped_mass,total_mass\n"));
        assert_eq!(s.lines().count(), 1 + sol.steps.len());
    }
}
