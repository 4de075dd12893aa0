//! Dense feed-forward networks with hand-written reverse passes, plain SGD
//! with step decay, and checkpoint files.

mod checkpoint;
mod layer;
mod model;
mod network;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_into, save_checkpoint};
pub use layer::{branch_specs, predictor_specs, LayerKind, LayerSpec};
pub use model::{ArchConfig, ModelParams, NETWORK_NAMES};
pub use network::{ForwardCache, Gradients, LayerGrad, Mode, Network, BN_EPSILON, BN_MOMENTUM};
pub use optim::{sgd_step, OptimizerState};
