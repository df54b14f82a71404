//! Ground-truth synthetic data: a known (D, G) pair solved forward, then
//! corrupted with seeded Gaussian observation noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, Domain, Point, PointCloud};
use crate::rng::rng_from;
use crate::solver::{solve_rd, Geometry, RateFn, SolveSpec, StepperSettings};
use crate::sr::SymbolicExpr;

/// Reference diffusivity in mm^2/day, with `U = u / density_scale`.
pub const REFERENCE_DIFFUSION: &str = "0.01 + 0.02*exp(2*U)";
/// Reference per-capita growth in 1/day.
pub const REFERENCE_GROWTH: &str = "1 - U";
pub const REFERENCE_DENSITY_SCALE: f64 = 40.0;

/// Rate expressions in the variable `U = u / density_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub diffusion: String,
    pub growth: String,
    pub density_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            diffusion: REFERENCE_DIFFUSION.into(),
            growth: REFERENCE_GROWTH.into(),
            density_scale: REFERENCE_DENSITY_SCALE,
        }
    }
}

/// One Gaussian cluster; position in mm, amplitude in cells per bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub x1: f64,
    pub x2: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// A disc with the density forced to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Void {
    pub x1: f64,
    pub x2: f64,
    pub radius: f64,
}

/// Initial density: background plus Gaussian bumps, with voids cut out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialCondition {
    pub background: f64,
    pub bumps: Vec<Bump>,
    pub voids: Vec<Void>,
}

impl Default for InitialCondition {
    /// Three clusters and one void on the 1.5 x 1.1 mm reference window.
    fn default() -> Self {
        let k = REFERENCE_DENSITY_SCALE;
        InitialCondition {
            background: 0.05 * k,
            bumps: vec![
                Bump { x1: 0.35, x2: 0.35, sigma: 0.15, amplitude: 0.75 * k },
                Bump { x1: 1.05, x2: 0.75, sigma: 0.2, amplitude: 0.6 * k },
                Bump { x1: 0.45, x2: 0.85, sigma: 0.12, amplitude: 0.45 * k },
            ],
            voids: vec![Void { x1: 1.15, x2: 0.2, radius: 0.2 }],
        }
    }
}

impl InitialCondition {
    pub fn density_at(&self, x1: f64, x2: f64) -> f64 {
        if self.voids.iter().any(|v| (x1 - v.x1).hypot(x2 - v.x2) < v.radius) {
            return 0.0;
        }
        let bumps: f64 = self
            .bumps
            .iter()
            .map(|b| b.amplitude * (-((x1 - b.x1).powi(2) + (x2 - b.x2).powi(2)) / (2.0 * b.sigma * b.sigma)).exp())
            .sum();
        (self.background + bumps).max(0.0)
    }

    /// One frame at `t0`, sampled at bin centres.
    pub fn on_grid(&self, domain: Domain, bin_size_x1: f64, bin_size_x2: f64, t0: f64) -> Result<DensityField> {
        let grid = DensityField::zeros(domain, bin_size_x1, bin_size_x2, vec![t0])?;
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.n_x1() {
            for j in 0..grid.n_x2() {
                values.push(self.density_at(grid.center_x1(i), grid.center_x2(j)));
            }
        }
        grid.with_values(values)
    }
}

/// Known rates plus the initial frame they are solved from.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub diffusion: RateFn,
    pub growth: RateFn,
    /// Single-frame field; its time is the start of the solve.
    pub ic: DensityField,
    pub descriptor: ModelSpec,
}

impl TrueModel {
    pub fn from_spec(spec: &ModelSpec, ic: DensityField) -> Result<Self> {
        if !(spec.density_scale > 0.0 && spec.density_scale.is_finite()) {
            return Err(Error::InvalidInput("density_scale must be positive".into()));
        }
        if ic.n_t() != 1 {
            return Err(Error::InvalidInput(format!("initial condition must have one frame, got {}", ic.n_t())));
        }
        let rate = |text: &str| -> Result<RateFn> {
            Ok(RateFn::Symbolic {
                expr: SymbolicExpr::parse(text)?,
                density_scale: spec.density_scale,
            })
        };
        Ok(TrueModel {
            diffusion: rate(&spec.diffusion)?,
            growth: rate(&spec.growth)?,
            ic,
            descriptor: spec.clone(),
        })
    }
}

/// Observation noise `u + omega * u^gamma * eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub gamma: f64,
    pub omega: f64,
    pub seed: u64,
}

/// Solves the true model from its initial frame through `times`.
pub fn generate_clean(model: &TrueModel, times: &[f64], stepper: StepperSettings) -> Result<DensityField> {
    let ic = &model.ic;
    let domain = *ic.domain();
    let t0 = ic.times()[0];
    if times.iter().any(|&t| t < domain.t_min || t > domain.t_max) {
        return Err(Error::InvalidInput("output times must lie inside the domain".into()));
    }
    let (b1, b2) = ic.bin_sizes();
    let spec = SolveSpec {
        domain,
        geometry: Geometry {
            n_x1: ic.n_x1(),
            n_x2: ic.n_x2(),
            dx1: b1,
            dx2: b2,
        },
        initial: ic.values().to_vec(),
        t0,
        times: times.to_vec(),
        stepper,
    };
    let sol = solve_rd(&model.diffusion, &model.growth, &spec)?;
    let total: f64 = sol.field.values().iter().sum();
    if sol.clamped_mass > 0.0 {
        log::warn!("clean generator clamped {:.3e} of {:.3e} total density", sol.clamped_mass, total);
    }
    Ok(sol.field)
}

pub fn apply_noise(field: &DensityField, spec: &NoiseSpec) -> Result<DensityField> {
    if !(spec.omega >= 0.0 && spec.omega.is_finite() && spec.gamma.is_finite()) {
        return Err(Error::InvalidInput("noise needs finite gamma and omega >= 0".into()));
    }
    if spec.omega == 0.0 {
        return Ok(field.clone());
    }
    let mut rng = rng_from(spec.seed);
    let values = field
        .values()
        .iter()
        .map(|&u| {
            let eps: f64 = rng.sample(StandardNormal);
            (u + spec.omega * u.powf(spec.gamma) * eps).max(0.0)
        })
        .collect();
    field.with_values(values)
}

/// Emits `round(value)` points per bin and frame, uniformly inside the bin.
pub fn sample_points(field: &DensityField, seed: u64) -> Result<PointCloud> {
    let mut rng = rng_from(seed);
    let mut records = Vec::new();
    for (s, &t) in field.times().iter().enumerate() {
        for i in 0..field.n_x1() {
            for j in 0..field.n_x2() {
                let n = field.get(i, j, s).round() as usize;
                let ((a1, b1), (a2, b2)) = field.bin_bounds(i, j);
                // stay clear of the shared edges so binning is unambiguous
                let inside = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
                    let m = 1e-6 * (hi - lo);
                    lo + m + rng.random::<f64>() * (hi - lo - 2.0 * m)
                };
                for _ in 0..n {
                    let x1 = inside(&mut rng, a1, b1);
                    let x2 = inside(&mut rng, a2, b2);
                    records.push(Point { x1, x2, t });
                }
            }
        }
    }
    PointCloud::new(records, field.times().to_vec())
}
