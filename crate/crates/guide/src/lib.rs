//! The chapters of `book/` as modules, so `cargo test` runs every snippet.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/signal.md")]
pub mod signal {}
#[doc = include_str!("../../../book/src/echo_profiles.md")]
pub mod echo_profiles {}
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/quantized.md")]
pub mod quantized {}
#[doc = include_str!("../../../book/src/streaming.md")]
pub mod streaming {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
