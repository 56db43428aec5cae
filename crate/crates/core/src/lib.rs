pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod io;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod postprocess;
pub mod regions;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{ParamVars, Tape, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use losses::{LossWeights, Phase, Prediction};
pub use mask::Mask;
pub use metrics::MatchReport;
pub use model::NetworkConfig;
pub use params::ParameterSet;
pub use postprocess::{InstanceSegResult, PostprocessParams};
pub use regions::{AdjacencyGraph, LayerAssignment, RegionDecomposition, TargetStack};
pub use synth::{Scene, SceneSpec, ShapeKind};
pub use tensor::{Scalar, Tensor};
pub use train::{TrainConfig, TrainState};
