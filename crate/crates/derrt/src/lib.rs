#![allow(clippy::needless_range_loop)]

//! DeRRT*: sampling-based motion planning with learned steering.
//!
//! This crate implements RRT* together with a variant whose steering function
//! is biased by a co-evolving sequence model — a Gaussian-emission hidden
//! Markov model or a recurrent (GRU) network with an optional convolutional
//! observation encoder. It ships the planners, the sequence models and their
//! training pipelines, three procedural benchmark environments, and a
//! benchmark harness behind the `derrt` command-line tool.
//!
//! The guide under `book/` walks through each subsystem; its code snippets
//! are compiled and run as doc-tests.

pub mod bench;
pub mod env;
pub mod error;
pub mod hmm;
pub mod neural;
pub mod numerics;
pub mod planner;
pub mod training;
pub mod util;

pub use error::{Error, Result};

// Every fenced Rust block in the guide compiles and runs under
// `cargo test --doc`; the book cannot drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/hmm.md")]
    mod hmm {}
    #[doc = include_str!("../../../book/src/neural.md")]
    mod neural {}
    #[doc = include_str!("../../../book/src/planner.md")]
    mod planner {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
}
