use std::io::Write;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::{
    bio_loss, data_loss, pde_loss, sample_boundary, sample_collocation, total_loss_grad, BoundaryPoint, BinnNets, DataSet,
    LossComponents, LossWeights, PdeWorkspace,
};
use super::split::{tv_split, TvSplit};
use crate::error::{Error, Result};
use crate::grid::{make_scaling, DensityField, Scaling};
use crate::mlp::{NetworkParams, Role};
use crate::rng::derive_seed;

/// Upper bound on the default collocation count.
pub const MAX_DEFAULT_COLLOCATION: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Collocation points per epoch; `None` means 10 per data entry, capped at 10 000.
    pub n_collocation: Option<usize>,
    /// Fixed validation collocation points; `None` uses the per-epoch count.
    pub n_val_collocation: Option<usize>,
    /// Side-face points per epoch for the flux penalty; `None` means a quarter of the collocation count.
    pub n_boundary: Option<usize>,
    pub es_patience: usize,
    /// Relative validation-loss drop that counts as an improvement.
    pub es_improvement: f64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub train_fraction: f64,
    pub u_hidden: Vec<usize>,
    pub rate_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            n_collocation: None,
            n_val_collocation: None,
            n_boundary: None,
            es_patience: 500,
            es_improvement: 0.05,
            adam: AdamConfig::default(),
            max_epochs: 50_000,
            train_fraction: 0.8,
            u_hidden: Role::U.default_hidden().to_vec(),
            rate_hidden: Role::D.default_hidden().to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.data >= 0.0 && w.pde >= 0.0 && w.bio >= 0.0 && w.flux >= 0.0) {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        if !(self.es_improvement > 0.0 && self.es_improvement < 1.0) {
            return Err(Error::InvalidInput("es_improvement must lie in (0, 1)".into()));
        }
        if self.n_collocation == Some(0) || self.n_val_collocation == Some(0) || self.n_boundary == Some(0) {
            return Err(Error::InvalidInput("collocation count must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidInput("max_epochs must be at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn collocation_count(&self, n_entries: usize) -> usize {
        self.n_collocation
            .unwrap_or_else(|| (10 * n_entries).clamp(1, MAX_DEFAULT_COLLOCATION))
    }

    pub fn val_collocation_count(&self, n_entries: usize) -> usize {
        self.n_val_collocation
            .unwrap_or_else(|| self.collocation_count(n_entries))
    }
}

/// Losses recorded after each epoch's parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_data: f64,
    pub train_pde: f64,
    pub val_data: f64,
    pub val_pde: f64,
    pub total_val: f64,
}

pub fn write_trace_csv<W: Write>(w: W, trace: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_data", "train_pde", "val_data", "val_pde", "total_val"])?;
    for r in trace {
        out.write_record(&[
            r.epoch.to_string(),
            r.train_data.to_string(),
            r.train_pde.to_string(),
            r.val_data.to_string(),
            r.val_pde.to_string(),
            r.total_val.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Early-stopping bookkeeping: relative-improvement threshold against the best loss so far.
#[derive(Debug, Clone)]
pub struct EsState {
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub best_params: Option<BinnNets>,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub improvement: f64,
    /// Every snapshotted best loss, in order.
    pub history: Vec<f64>,
}

impl EsState {
    pub fn new(patience: usize, improvement: f64) -> Self {
        EsState {
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            best_params: None,
            epochs_since_improvement: 0,
            patience,
            improvement,
            history: Vec::new(),
        }
    }

    /// Records one epoch; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64, nets: &BinnNets) -> bool {
        if val_loss < (1.0 - self.improvement) * self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.best_params = Some(nets.clone());
            self.epochs_since_improvement = 0;
            self.history.push(val_loss);
        } else {
            self.epochs_since_improvement += 1;
        }
        self.epochs_since_improvement >= self.patience
    }
}

/// One trained split: best-snapshot networks plus everything needed to reproduce them.
#[derive(Debug, Clone)]
pub struct BinnModel {
    pub nets: BinnNets,
    pub scaling: Scaling,
    pub split: TvSplit,
    pub trace: Vec<TraceRow>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Persisted description of a [`BinnModel`] (networks are stored separately).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub seed: u64,
    pub scaling: Scaling,
    pub split: TvSplit,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub config: TrainConfig,
    pub residual_form: String,
    pub validation_loss: String,
}

impl BinnModel {
    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            seed: self.seed,
            scaling: self.scaling,
            split: self.split.clone(),
            stopped_epoch: self.stopped_epoch,
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val_loss,
            config: self.config.clone(),
            residual_form: RESIDUAL_FORM.into(),
            validation_loss: VALIDATION_LOSS.into(),
        }
    }

    pub fn from_manifest(m: ModelManifest, nets: BinnNets, trace: Vec<TraceRow>) -> Self {
        BinnModel {
            nets,
            scaling: m.scaling,
            split: m.split,
            trace,
            stopped_epoch: m.stopped_epoch,
            best_epoch: m.best_epoch,
            best_val_loss: m.best_val_loss,
            seed: m.seed,
            config: m.config,
        }
    }

    /// Scaled training densities of this split.
    pub fn training_densities(&self, field: &DensityField) -> Vec<f64> {
        self.split
            .train_idx
            .iter()
            .map(|&k| self.scaling.scale_density(field.values()[k]))
            .collect()
    }

    /// Diffusivity in mm²/day at a physical density.
    pub fn diffusion(&self, u: f64) -> f64 {
        self.scaling
            .unscale_diffusivity(self.nets.d.forward(&[self.scaling.scale_density(u)]))
    }

    /// Per-capita growth in 1/day at a physical density.
    pub fn growth(&self, u: f64) -> f64 {
        self.scaling
            .unscale_growth(self.nets.g.forward(&[self.scaling.scale_density(u)]))
    }
}

pub const RESIDUAL_FORM: &str = "expanded: u_t - D'(u)|grad u|^2 - D(u) lap u - G(u) u";
pub const VALIDATION_LOSS: &str = "lambda_data * L_data(val) + lambda_pde * L_pde(fixed val collocation)";

pub fn init_nets(cfg: &TrainConfig, seed: u64) -> Result<BinnNets> {
    BinnNets::new(
        NetworkParams::with_hidden(Role::U, &cfg.u_hidden, derive_seed(seed, 1))?,
        NetworkParams::with_hidden(Role::D, &cfg.rate_hidden, derive_seed(seed, 2))?,
        NetworkParams::with_hidden(Role::G, &cfg.rate_hidden, derive_seed(seed, 3))?,
    )
}

/// Trains one split with early stopping; deterministic per `(field, cfg, seed)`.
pub fn train(field: &DensityField, cfg: &TrainConfig, seed: u64) -> Result<BinnModel> {
    train_with_observer(field, cfg, seed, |_| {})
}

pub fn train_with_observer(
    field: &DensityField,
    cfg: &TrainConfig,
    seed: u64,
    mut observer: impl FnMut(&TraceRow),
) -> Result<BinnModel> {
    cfg.validate()?;
    let scaling = make_scaling(field)?;
    let split = tv_split(field, cfg.train_fraction, seed)?;
    let data = DataSet::from_field(field, &scaling);
    let scaled_box = scaling.scaled_box(field.domain());
    let n_c = cfg.collocation_count(field.len());
    let val_points = sample_collocation(scaled_box, cfg.val_collocation_count(field.len()), derive_seed(seed, 4), 0)?;
    let colloc_seed = derive_seed(seed, 5);
    let boundary_seed = derive_seed(seed, 6);
    // the flux penalty is off by default; skip its sampling then
    let n_b = cfg.n_boundary.unwrap_or(n_c.div_ceil(4));
    let boundary = |stream: u64| -> Result<Vec<BoundaryPoint>> {
        if cfg.weights.flux > 0.0 {
            sample_boundary(scaled_box, n_b, boundary_seed, stream)
        } else {
            Ok(Vec::new())
        }
    };

    let mut nets = init_nets(cfg, seed)?;
    let mut opt_u = Adam::new(nets.u.n_params(), cfg.adam);
    let mut opt_d = Adam::new(nets.d.n_params(), cfg.adam);
    let mut opt_g = Adam::new(nets.g.n_params(), cfg.adam);
    let mut ws = PdeWorkspace::default();
    let mut es = EsState::new(cfg.es_patience, cfg.es_improvement);
    let mut trace = Vec::new();
    let mut stopped_epoch = cfg.max_epochs;
    let w = cfg.weights;

    for epoch in 1..=cfg.max_epochs {
        let points = sample_collocation(scaled_box, n_c, colloc_seed, epoch as u64)?;
        let edge = boundary(epoch as u64)?;
        let (train_loss, grads) = total_loss_grad(&nets, &data, &split.train_idx, &points, &edge, &w, &mut ws)?;
        check_finite(epoch, &train_loss, "training")?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                component: "gradient".into(),
            });
        }
        opt_u.step(nets.u.mlp_mut().params_mut(), &grads.u);
        opt_d.step(nets.d.mlp_mut().params_mut(), &grads.d);
        opt_g.step(nets.g.mlp_mut().params_mut(), &grads.g);

        let val = LossComponents::combine(
            &w,
            data_loss(&nets.u, &data, &split.val_idx)?,
            pde_loss(&nets, &val_points)?,
            bio_loss(&nets),
            // the stopping criterion stays on the data and PDE terms
            0.0,
        );
        check_finite(epoch, &val, "validation")?;
        let row = TraceRow {
            epoch,
            train_data: train_loss.data,
            train_pde: train_loss.pde,
            val_data: val.data,
            val_pde: val.pde,
            total_val: val.total,
        };
        observer(&row);
        trace.push(row);
        if es.observe(epoch, val.total, &nets) {
            stopped_epoch = epoch;
            break;
        }
    }

    let best = es.best_params.take().expect("first epoch always improves on infinity");
    Ok(BinnModel {
        nets: best,
        scaling,
        split,
        trace,
        stopped_epoch,
        best_epoch: es.best_epoch,
        best_val_loss: es.best_val_loss,
        seed,
        config: cfg.clone(),
    })
}

fn check_finite(epoch: usize, c: &LossComponents, which: &str) -> Result<()> {
    for (name, v) in [("data", c.data), ("pde", c.pde), ("bio", c.bio), ("total", c.total)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                component: format!("{which} {name}"),
            });
        }
    }
    Ok(())
}
