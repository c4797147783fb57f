//! Animatable avatar reconstruction with coupled multi-resolution
//! Gaussians-on-Mesh.
//!
//! A low-resolution skinned mesh carries articulation and learned vertex
//! updates. Its midpoint subdivision carries one Gaussian per face, and the
//! subdivided vertices are always a fixed sparse linear function of the
//! low-resolution ones. Reconstruction runs a small feed-forward network for
//! a fixed number of feedback steps, each of which re-renders the source
//! views from the current estimate.

pub mod diff;
pub mod error;
pub mod geometry;
pub mod gom;
pub mod io;
pub mod reconstruct;
pub mod rig;
pub mod splat;
pub mod trainkit;

pub use error::{Error, Result};

/// Worker count taken from `LGOM_THREADS`, defaulting to the number of
/// available cores. Results never depend on this value.
pub fn worker_count() -> usize {
    std::env::var("LGOM_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}
