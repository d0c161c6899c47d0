//! Dense correspondence machinery on descriptor grids.
//!
//! The pipeline mirrors how sparse keypoint supervision is turned into dense
//! pseudo-labels:
//!
//! 1. [`matching`]: mutual nearest neighbours between teacher grids, restricted
//!    to a mask or keypoint box, merged with the annotated pairs into a seed set.
//! 2. [`densify`]: Delaunay triangulation of the seed sources and one affine map
//!    per triangle give a dense displacement field.
//! 3. [`anchor`]: k-means over displacement vectors, greedy BIC merging, and
//!    retention of the clusters whose source/target regions contain an
//!    annotated keypoint pair.
//!
//! [`objectives`] holds the training losses with analytic gradients,
//! [`metrics`] the PCK engine, and [`io`] the on-disk formats.

pub mod anchor;
pub mod densify;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod objectives;

pub use error::{Error, Result};
pub use grid::{BBox, CellIndex, CellMask, FeatureGrid, Lattice, PixelPoint, PixelRegion, Real, SimilarityMap};
pub use matching::{Correspondence, CorrespondenceSet, Provenance};
