//! Compiles the guide's code listings as doc-tests.
//!
//! mdbook cannot resolve crate dependencies in its own test runner, so each
//! chapter is pulled in here and `cargo test` runs the snippets.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/objectives.md")]
pub mod objectives {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
