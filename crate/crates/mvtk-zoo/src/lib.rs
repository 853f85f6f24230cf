//! Model zoo: declarative specs for every named MobileViT variant and the
//! builders that turn them into runnable networks.

pub mod model;
pub mod spec;

pub use model::{build, load_bundle, save_bundle, Model, StageBlocks};
pub use spec::{named_spec, spec_from_text, spec_to_text, ModelSpec, StageSpec, NAMED_MODELS};
