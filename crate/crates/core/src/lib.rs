//! Discover interacting communities in tweet-like data, train one language
//! model per community while exchanging corpus samples along the community
//! retweet graph, and probe each model's stance toward named targets.
//!
//! The pipeline runs in stages, each backed by one module:
//!
//! 1. [`ingest`] parses JSON-lines tweets into a [`TweetStore`](ingest::TweetStore).
//! 2. [`graph`] builds the user/outlet co-sharing network and the directed
//!    community retweet network.
//! 3. [`community`] runs Louvain on the co-sharing network.
//! 4. [`ideology`] labels users and computes per-community liberal/conservative
//!    tweet fractions.
//! 5. [`corpus`] holds community corpora and the stratified message passing
//!    update between them.
//! 6. [`lm`] trains a smoothed n-gram model per community on a schedule with
//!    message passing rounds.
//! 7. [`probe`] prompts every model about every target and aggregates sentiment
//!    into a stance matrix.
//! 8. [`eval`] reweights survey ground truth by each community's ideology mix
//!    and scores the two rank-correlation tasks.
//!
//! [`synth`] generates planted scenarios for end-to-end verification and
//! [`pipeline`] ties the stages together with resumable, hashed artifacts.
//!
//! The guide in `book/` walks through each stage; its code blocks are compiled
//! and run as doc-tests of this crate.

pub mod community;
pub mod corpus;
pub mod eval;
pub mod graph;
pub mod ideology;
pub mod ingest;
pub mod lm;
pub mod pipeline;
pub mod probe;
pub mod seed;
pub mod synth;

mod apportion;

pub use apportion::largest_remainder;

/// Identifier of a detected community. Ids start at 1 and follow descending
/// community size.
pub type CommunityId = u32;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/communities.md")]
    mod communities {}
    #[doc = include_str!("../../../book/src/ideology.md")]
    mod ideology {}
    #[doc = include_str!("../../../book/src/message_passing.md")]
    mod message_passing {}
    #[doc = include_str!("../../../book/src/language_models.md")]
    mod language_models {}
    #[doc = include_str!("../../../book/src/probing.md")]
    mod probing {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
