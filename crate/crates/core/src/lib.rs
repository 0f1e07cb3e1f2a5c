//! Sparse-view CT simulation toolkit.
//!
//! The pipeline runs phantom (or HU volume) → forward projection at a full
//! view count → reconstruction from the full set and from evenly subsampled
//! sparse sets → windowing → residual targets, block and patch extraction for
//! training, and MSE/SSIM scoring of corrected reconstructions.

pub mod blocks;
pub mod error;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    make_clinical_geometry, BeamGeometry, BeamKind, Image, Sinogram, Unit, ViewSubset, VoxelVolume, WindowSpec,
    CLINICAL_SDD_MM, CLINICAL_SOD_MM, FULL_VIEWS, SPARSE_VIEWS,
};
