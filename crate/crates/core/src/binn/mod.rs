//! Joint training of the density, diffusion and growth networks.

mod adam;
mod loss;
mod split;
mod train;

pub use adam::{Adam, AdamConfig};
pub use loss::{
    bio_loss, data_loss, data_loss_grad, data_loss_with, flux_loss, flux_loss_grad, pde_loss, pde_loss_grad,
    pde_residual, residual_parts, sample_boundary, sample_collocation, total_loss, total_loss_grad, BinnGrads,
    BinnNets, BoundaryPoint, DataSet, LossComponents, LossWeights, PdeWorkspace, ResidualParts,
};
pub use split::{split_indices, tv_split, TvSplit};
pub use train::{
    init_nets, train, train_with_observer, write_trace_csv, BinnModel, EsState, ModelManifest,
    TraceRow, TrainConfig, MAX_DEFAULT_COLLOCATION, RESIDUAL_FORM, VALIDATION_LOSS,
};
