//! DenseNet encoder-decoder emulator: configuration, parameters, forward
//! prediction, land masking and receptive-field geometry.

mod arch;
mod model;
mod receptive;

pub use arch::{
    Activation, ArchConfig, BlockConfig, HeadConfig, ParamKind, ParamSpec, Plan, Stage, StemConfig,
};
pub use model::{
    apply_mask, apply_mask_cells, build_model, count_params, ForwardTrace, LandMask, ModelParams,
    NormStats, ParamCounts,
};
pub use receptive::{receptive_field, ReceptiveFieldMap, RfBox};
