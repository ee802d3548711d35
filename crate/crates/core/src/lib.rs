//! Few-shot segmentation by prototype alignment.
//!
//! Query features attend to masked support features at two granularities:
//! point-to-point ([`p2p`]) via a linear attention whose cost grows with the
//! number of tokens rather than its square, and point-to-block ([`p2b`]) over
//! the most mask-covered support blocks. A class-agnostic prior ([`ckmm`])
//! built from base-class prototypes is joined with the aligned prototypes and
//! decoded into a mask ([`aggregation`]). [`pipeline`] runs whole episodes,
//! [`metrics`] scores them and [`bench`] times the attention variants.

pub mod aggregation;
pub mod bench;
pub mod ckmm;
pub mod episode;
pub mod error;
pub mod jcat;
pub mod metrics;
pub mod p2b;
pub mod p2p;
pub mod pipeline;
pub mod pyramid;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
