//! Pipelines behind the `hdt` command-line tool.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/encoding.md")]
    mod encoding {}
    #[doc = include_str!("../../../book/src/subspace.md")]
    mod subspace {}
    #[doc = include_str!("../../../book/src/generator.md")]
    mod generator {}
    #[doc = include_str!("../../../book/src/inversion.md")]
    mod inversion {}
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    mod reconstruction {}
    #[doc = include_str!("../../../book/src/coefficient.md")]
    mod coefficient {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
