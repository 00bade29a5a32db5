//! Core runtime for inter-model communication via activation grafting.
//!
//! A decoder-only transformer can be paused at any residual-stream boundary,
//! have its last-token activation combined with another model's activation,
//! and then resume decoding. This crate carries everything that is pure
//! computation: the inference engine with splittable forward passes and
//! KV-cached decoding ([`engine`]), the combine functions ([`grafting`]),
//! the learned linear map between activation spaces ([`mapper`]), analytical
//! FLOP cost models ([`costmodel`]), synthetic coordination games ([`tasks`]),
//! and the communication protocols that tie two agents together
//! ([`protocols`]).
//!
//! The crate is `no_std` (with `alloc`); file formats, persistence, and the
//! command-line interface live in the companion `acomm` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod costmodel;
pub mod engine;
pub mod grafting;
pub mod mapper;
pub mod matrix;
pub mod protocols;
pub mod rng;
pub mod tasks;

pub use matrix::Matrix;
