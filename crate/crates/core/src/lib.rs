//! Structure-aware spatial gene-expression diffusion.
//!
//! The crate holds the numerical core: a small reverse-mode autodiff engine,
//! the variance-exploding SDE, spatial graph construction, the dual-stream
//! graph transformer, the joint node/edge diffusion baseline, the FLAG model,
//! data handling, evaluation metrics and the curse-of-dimensionality
//! experiments.

pub mod autograd;
pub mod checkpoint;
pub mod curse;
pub mod data;
pub mod error;
pub mod flag;
pub mod graph_transformer;
pub mod io;
pub mod joint;
pub mod metrics;
pub mod nn;
pub mod runner;
pub mod sde;
pub mod spatial;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use error::{FlagError, Result};
pub use flag::{DiTConfig, FlagConfig, FlagLossReport, FlagModel, GfmEmbeddings};
pub use graph_transformer::{BackboneMode, GraphBackbone, GraphBackboneConfig};
pub use joint::{JointConfig, JointLossReport, JointModel, NodeOnlyModel};
pub use runner::{AnyModel, Method, StepReport};
pub use nn::{AdamW, AdamWConfig, ParamId, ParamStore, Session};
pub use sde::{DiffusionBatch, NoiseSchedule};
pub use spatial::{EdgeCondition, SlideSample, SpatialWeightGraph};
pub use tensor::Tensor;
pub use training::{TrainExample, Trainer};
