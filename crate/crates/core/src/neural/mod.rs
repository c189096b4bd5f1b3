//! Reverse-mode autodiff, layers, the trajectory and heatmap models, training
//! and weight persistence.

pub mod heatmap_model;
pub mod layers;
pub mod params;
pub mod persist;
pub mod tensor;
pub mod train;
pub mod trajectory;

pub use heatmap_model::{Fusion, HeatmapModel, HeatmapModelConfig, HeatmapSample};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Graph, Tensor, Var};
pub use train::{train, TrainConfig, TrainReport, Trainable};
pub use trajectory::{TrajectoryConfig, TrajectoryModel, TrajectorySample, TrajectoryVariant};
