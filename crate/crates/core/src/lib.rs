//! Block-level hidden-state pruning for long-prompt decoder inference, with a
//! two-tier KV store and overlap-aware block swapping during decode.
//!
//! The crate is organised bottom-up: [`kernels`] (dense math), [`model`]
//! (seeded toy decoder), [`blockindex`] (blocks, representative keys,
//! scoring), [`swap`] (overlap-threshold swap plans), [`tiermem`] (fast/slow
//! KV tiers with a transfer thread), [`engine`] (prefill and decode),
//! [`costmodel`] (closed-form memory, FLOPs and timeline), [`trace`] (NDJSON
//! event log), [`probe`] and [`cli`].

pub mod blockindex;
pub mod cli;
pub mod config;
pub mod costmodel;
pub mod engine;
pub mod kernels;
pub mod model;
pub mod probe;
pub mod swap;
pub mod tiermem;
pub mod trace;
