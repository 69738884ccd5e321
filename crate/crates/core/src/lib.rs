#![cfg_attr(not(feature = "std"), no_std)]

//! Core algorithms for a desk-scale cooperative perception workbench.
//!
//! Connected vehicles and roadside units each carry a spinning LiDAR and a
//! forward 4D (range + velocity) radar. This crate simulates small scenes,
//! casts rays, corrupts the LiDAR returns with fog or snow, accounts for the
//! feature broadcast between agents, and runs a bird's-eye-view fusion
//! pipeline with an optional diffusion-style feature denoiser in front of the
//! detection head. Everything is deterministic given a seed.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, configs on
//! disk and the command-line front end live in the companion `v2x-cli` crate.

extern crate alloc;

pub mod bev;
pub mod comms;
pub mod detection;
pub mod evaluation;
pub mod geometry;
pub mod mdd;
pub mod nn;
pub mod perception;
pub mod scene;
pub mod sensing;
pub mod training;
pub mod weather;
pub mod math;
