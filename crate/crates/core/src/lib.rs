//! Training-free structured sparsification for windowed vision transformers.
//!
//! Tokens are reordered once by a Sobel-saliency-ranked Z-order scan that is
//! stripe-interleaved into `G` blocks ([`stripesort`]). In that order a static
//! A-shaped block mask (a dense prefix of key tiles plus the diagonal tile)
//! keeps long-range context while skipping most tile pairs ([`attention`]),
//! and the MLP runs only on a prefix keep-set of the same order ([`mlp`]).
//! [`encoder`] composes these into a toy local/global ViT with a dense twin.

pub mod attention;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod mlp;
pub mod oracle;
pub mod pgm;
pub mod saliency;
pub mod stripesort;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{GridShape, Permutation};
pub use tensor::{Rng, Tensor};

// Chapters of the guide in `book/src` run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/zorder.md")]
    mod zorder {}
    #[doc = include_str!("../../../book/src/saliency.md")]
    mod saliency {}
    #[doc = include_str!("../../../book/src/stripe-sort.md")]
    mod stripe_sort {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/mlp.md")]
    mod mlp {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/performance.md")]
    mod performance {}
}
