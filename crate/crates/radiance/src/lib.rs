//! A differentiable radiance-field engine.
//!
//! Four trainable scene representations (plain MLP, spherical-harmonic voxel
//! grid, vector-matrix low-rank tensors, multiresolution hash tables) share a
//! single two-stage interface: an encoder that maps a spatial point to a
//! feature vector and a decoder that turns the feature into density and
//! view-dependent color. On top of that sit a volume renderer, a hand-rolled
//! reverse-mode gradient engine with Adam, and a teacher/student distillation
//! pipeline that converts any trained representation into any other.
//!
//! All batch work (ray rendering, point losses, gradient reduction) runs
//! through [`exec`], which is data-parallel with the `parallel` feature
//! (default) and plain sequential without it. Results are bit-identical either
//! way: batches are split into fixed chunks and reduced in chunk order.

pub mod config;
pub mod distill;
pub mod encodings;
pub mod error;
pub mod exec;
pub mod fields;
pub mod grad;
pub mod real;
pub mod render;
pub mod rng;
pub mod scene;
pub mod verify;

pub use error::{Error, Result};
pub use real::Real;
