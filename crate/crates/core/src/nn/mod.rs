//! Encoder/decoder networks, parameter initialisation, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod model;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{
    init_params, Architecture, AutoencoderModel, BoundParams, DecoderKind, ParamSet,
    DEFAULT_HIDDEN, LAYER_NORM_EPS,
};
