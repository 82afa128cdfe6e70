//! Incremental text-to-speech serving engine.
//!
//! Requests enter a shared pool the moment they arrive and are advanced one
//! audio chunk per loop iteration, with each module (frontend, encoder,
//! decoder, vocoder) batching exactly the pool items that need it. The
//! neural models are replaced by deterministic arithmetic stand-ins with the
//! same state layout, so scheduling behaviour can be tested exactly.

pub mod acoustic;
pub mod baseline;
pub mod config;
pub mod cost;
pub mod domain;
pub mod frontend;
pub mod harness;
pub mod pipeline;
pub mod scheduler;
pub mod server;
pub mod vocoder;
