//! JPEG restoration toolkit: a compression simulator, image quality metrics,
//! a small reverse-mode autodiff engine, and the two-stage residual-dense
//! restoration networks built on top of it.
//!
//! The pipeline is deterministic end to end: every random choice flows
//! through a caller-seeded [`rand_chacha`] generator, floating point work is
//! ordered identically from run to run, and persisted artifacts (weights,
//! CSV reports) are byte-stable for a fixed seed.

// Training allocates and frees multi-megabyte activation buffers at a high
// rate; the system allocator hands those back to the kernel each time and the
// page faults dominate. A caching allocator keeps them in process.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod error;
pub mod eval;
pub mod image;
pub mod jpeg;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{ColorSpace, Image};
pub use jpeg::{QualityFactor, QuantTable};
pub use metrics::MetricReport;
pub use model::{restore, Model, NetworkSpec, Variant};
pub use tensor::{Graph, Tensor, Var};
pub use train::TrainConfig;
