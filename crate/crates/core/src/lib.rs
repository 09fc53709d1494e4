extern crate blas_src;

pub mod error;
pub mod expfam;
pub mod linalg;
pub mod penalty;

pub use error::{Error, Result};
pub mod solver;
pub mod dispersion;
pub mod selection;
pub mod simulate;
pub mod evaluate;
pub mod experiment;
pub mod io;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/fitting.md")]
    struct Fitting;
    #[doc = include_str!("../../../book/src/penalties.md")]
    struct Penalties;
    #[doc = include_str!("../../../book/src/dispersion.md")]
    struct Dispersion;
    #[doc = include_str!("../../../book/src/selection.md")]
    struct Selection;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
