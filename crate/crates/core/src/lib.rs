//! Variational masked autoencoding for domain-adaptive language understanding.
//!
//! A masked-LM whose per-token context vectors pass through a Gaussian
//! latent layer (shared mean head, separate variance heads for masked and
//! unmasked tokens, batch-normalized means) before the LM head, trained with a
//! reconstruction + KL objective. Everything runs on the small `f64`
//! reverse-mode core in [`diffcore`].
//!
//! ```text
//! text -> corpus (vocab, masking, collate) -> encoder -> cul -> LM head -> objective
//!                                                            \-> task heads (downstream)
//! ```

pub mod corpus;
pub mod cul;
pub mod diffcore;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod model;
pub mod objective;
pub mod pretrain;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Objective};
