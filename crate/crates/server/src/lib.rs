//! HTTP/JSON front end for interactive neuron dissection.
//!
//! [`session::Session`] owns the model, activation index, image corpus and
//! concept log; [`api::router`] exposes it over axum.

pub mod api;
pub mod demo;
pub mod error;
pub mod session;

pub use error::{ApiError, ErrorCode};
pub use session::{Session, SessionConfig, SessionPaths};
