//! Rating service: hands pending pair queries to human raters in sessions,
//! collects two slider ratings per pair and turns them back into
//! `PairResponse` records the estimation stage can consume.
//!
//! * [`store`] holds the queue, sessions and the append-only journal.
//! * [`server`] exposes the store over HTTP + JSON.
//! * [`client`] is the pipeline side: an `Evaluator` that posts queries to a
//!   running service and polls until they are answered.

pub mod client;
pub mod server;
pub mod store;

pub use client::RemoteEvaluator;
pub use store::{RatingStore, ServiceError, StoreConfig};
