//! Primitive-to-polygon building contour extraction.
//!
//! The pipeline segments geometric primitives (vertices, lines, or corners)
//! inside a building's ROI with a group-query transformer decoder, classifies
//! each primitive into a cyclic order slot, and assembles a closed polygon by
//! connecting the retained primitives in predicted order. No mask
//! vectorization or simplification post-processing is involved.
//!
//! Module map:
//! - [`geom`]: rings, primitives, contour sampling, order labels, assembly
//! - [`data`]: synthetic scene generation, COCO ingestion, ROI construction
//! - [`nn`]: double-precision tape autodiff and layers used by the model
//! - [`model`]: backbone, ROI extraction, primitive segmenter, order decoder
//! - [`train`]: bipartite matching, set-prediction losses, optimization loop
//! - [`eval`]: polygon rasterization and COCO-style AP/AR metrics

pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod model;
pub mod nn;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use geom::{OrderedPrimitiveSet, Point2, PolygonRing, Primitive, PrimitiveKind, SampledContour};
pub use model::{Model, ModelConfig, PrimitivePrediction};
pub use train::{LossReport, MatchResult, TrainConfig};
