//! Diffusion transformer with per-block learned routing: blocks can be
//! skipped, reuse a cached residual, or run with a reduced MLP width.
//!
//! The crate is self-contained: a small reverse-mode tape over `f64`
//! tensors, the rectified-flow objective and sampler, the dense backbone,
//! routers and their losses, a cached inference engine, FLOP and sample
//! quality metrics, and a two-phase trainer.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod gradcheck;
pub mod params;
pub mod flow;
pub mod model;
pub mod elastic;
pub mod infer;
pub mod metrics;
pub mod train;
pub mod checkpoint;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use params::{Graph, ParamGroup, ParamId, ParamStore};
pub use model::{DiTConfig, ElasticDit};
pub use elastic::{ElasticConfig, RouterOutput, WidthMenu};
pub use flow::{FlowSample, SynthConfig, SyntheticData};
pub use infer::{BlockAction, InferenceConfig, TraceRecord};
pub use metrics::FlopModel;
pub use train::{TrainConfig, TrainSnapshot};
