//! Precipitation nowcasting with a fully convolutional encoder/decoder and
//! synchronous data-parallel training, on synthetic radar mosaics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod error;
pub mod eval;
pub mod graph;
pub mod net;
pub mod pipeline;
pub mod sim;
pub mod tensor;
pub mod trainer;

pub use binio::write_atomic;
pub use error::{Error, Result};
pub use eval::{HistMatchConfig, LeadTimeMse, SpeedupTable};
pub use graph::{Activations, Graph, GradientSet, NodeId, ParamId, ParameterSet};
pub use net::{build_model, infer_shapes, ModelConfig, MultiScaleOutput, NowcastModel, ShapePlan};
pub use pipeline::{NormStats, PatchDataset, PipelineConfig};
pub use sim::{CoverageMask, Mosaic, MosaicSequence, SimConfig};
pub use tensor::Tensor;
pub use trainer::{LrPolicy, MetricsRecord, TrainConfig, TrainerState, TrainingReport};
