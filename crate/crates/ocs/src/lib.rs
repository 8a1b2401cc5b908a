//! Object-centric crop sampling for classifier training.
//!
//! When a classifier is trained on fixed-size crops drawn uniformly from an
//! image, most crops land on background. This crate implements the
//! alternative: detect the object of interest once, then draw training crops
//! with probability proportional to their pixel overlap with the detected
//! box. The sampler is exactly separable (one 1-D multinomial per axis), so
//! sampling is O(log n) per draw with integer-exact weights.
//!
//! The crate ships the full apparatus needed to measure whether this helps:
//!
//! - [`geometry`] — integer rectangles, 8-bit image buffers, integral images
//! - [`sampling`] — the overlap-proportional crop sampler and its uniform
//!   fallback
//! - [`detector`] — a scale-aware boosted cascade over window-relative
//!   regionlet features, with max-response selection and ridge box refinement
//! - [`dataset`] — saliency-aware ground-truth selection, manifest and pixmap
//!   I/O, and a synthetic cluttered-scene generator
//! - [`classifier`] — a small multinomial logistic classifier trained on
//!   sampled crops, with the 20-crop test-time ensemble
//! - [`eval`] — average precision at a configurable overlap threshold,
//!   top-k accuracy, score-versus-size curves and comparison tables
//! - [`cli`] — the batch entry points used by the `ocs` binary
//!
//! See the crate `examples/` directory for one runnable program per
//! capability.

pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod detector;
pub mod eval;
pub mod geometry;
pub mod pixmap;
pub mod sampling;
pub mod synth;

pub use geometry::{ImageBuffer, IntegralImage, Rect};

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum OcsError {
    /// A geometric precondition was violated (out-of-bounds rect, crop
    /// larger than the image, and so on).
    #[error("geometry: {0}")]
    Geometry(String),

    /// Invalid configuration or unsatisfiable training precondition.
    #[error("config: {0}")]
    Config(String),

    /// A text artifact (manifest, model, detection file) failed to parse.
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl OcsError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        OcsError::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<String>,
        line: usize,
        message: impl Into<String>,
    ) -> Self {
        OcsError::Format {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, OcsError>;
