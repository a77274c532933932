//! Hybrid compression for simulated 3D-parallel training.

mod bits;
pub mod codec;
pub mod collectives;
pub mod netsim;
pub mod parallel3d;
pub mod toymodel;
pub mod cli;
