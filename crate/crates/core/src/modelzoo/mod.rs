//! Feature extractors (standard, residual, multiscale) and classifier heads
//! (softmax, one-vs-rest), plus their on-disk format.

mod model;
mod persist;
mod spec;

pub use model::{Forward, Model, ParamStore, TrainingMetadata};
pub use persist::{MODEL_FORMAT, MODEL_VERSION};
pub use spec::{ExtractorKind, HeadKind, ModelSpec};
