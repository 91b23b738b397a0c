//! Synthetic benchmark: task generation, corruptions, model zoos and the
//! experiment drivers.

pub mod corrupt;
pub mod manifest;
pub mod pipeline;
pub mod post;
pub mod task;
pub mod zoo;

pub use task::{gen_domain, gen_task, glyph, DomainStyle, TaskData, TaskSpec};
pub use corrupt::{corrupt, corrupt_with_strength, CorruptionSpec, Family};
