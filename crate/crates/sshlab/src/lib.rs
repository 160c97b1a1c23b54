//! Numerical laboratory for the disordered Su-Schrieffer-Heeger model.
//!
//! The pipeline: exact diagonalization of clean and disordered SSH chains
//! ([`ssh`]), winding-number ground truth ([`topology`]), eigenstate-image
//! datasets ([`dataio`]), a small from-scratch CNN ([`tinycnn`]), CAM and
//! Grad-CAM explanations ([`explain`]), PCA latent analysis ([`latent`]), and
//! out-of-distribution generalization audits ([`evalgen`]).

pub mod dataio;
pub mod error;
pub mod evalgen;
pub mod explain;
pub mod latent;
pub mod rng;
pub mod ssh;
pub mod tinycnn;
pub mod topology;

pub use error::{Result, SshError};
