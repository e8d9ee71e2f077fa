//! The encoder/decoder nowcasting CNN: configuration, shape planning,
//! construction, multi-scale loss, and weight files.

mod config;
mod model;
mod plan;
pub mod weights;

pub use config::{hash_bytes, hash_str, EncoderStage, ModelConfig};
pub use model::{build_model, multiscale_loss, MultiScaleOutput, NowcastModel};
pub use plan::{infer_shapes, nearest_valid_sizes, HeadExtent, LayerExtent, ShapePlan};
pub use weights::{load_weights, save_weights};
