//! Multi-size permeability regression with Fourier neural operators.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`porous_gen`] synthesizes binary porous cubes by thresholding a
//!    smoothed Gaussian random field.
//! 2. [`stokes_lbm`] labels each cube with its Darcy permeability from a
//!    D3Q19 lattice Boltzmann Stokes solve.
//! 3. [`fno_model`] maps a cube of any admissible edge length to a scalar
//!    through lifting, Fourier units and either a channel-wise pooling head
//!    or the adaptive spatial pooling baseline.
//! 4. [`train_engine`] differentiates the model by hand, optimizes it with
//!    Adam over size-homogeneous mini-batches and scores it with R².
//!
//! [`io`] holds the binary dataset/checkpoint formats and run configuration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fno_model;
pub mod grid;
pub mod io;
pub mod porous_gen;
pub mod spectral;
pub mod stokes_lbm;
pub mod train_engine;

pub use error::{Error, Result};
pub use grid::{Field3, VoxelGrid};
