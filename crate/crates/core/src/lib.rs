//! Cooperative iterative receivers for a K-user interference channel.
//!
//! Each receiver runs a local message-passing loop (mean-field updates for
//! channel and noise, belief propagation for demapping and decoding) and
//! periodically trades bit messages with the other receivers.

pub mod coop;
pub mod channel;
pub mod error;
pub mod msg;
pub mod rx;
pub mod seeding;
pub mod sim;
pub mod tx;

pub use error::{Error, Result};
