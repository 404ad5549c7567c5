//! Lung nodule candidate processing with location history images.
//!
//! Volumes are read from MetaImage files, candidates are thresholded and
//! deduplicated with 3-D NMS, each candidate is summarized as a location
//! history image (LHI) and classified by the HS² network, and detection
//! quality is measured with FROC analysis.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod candidates;
pub mod froc;
pub mod geometry;
pub mod hs2;
pub mod lhi;
pub mod phantom;
pub mod pipeline;
pub mod volume_io;

pub use candidates::{BlobParams, CandidateError, GroundTruthNodule, NoduleCandidate};
pub use froc::{EvalError, FpReduction, FrocReport, FP_LEVELS};
pub use geometry::{Box3, Frame, GeometryError, ScoredBox};
pub use hs2::{Architecture, Hs2Error, Hs2Model, Hs2Net, Label, LabeledImage, Prediction, TrainConfig};
pub use lhi::{Grid, LhiError, LhiParams, LocationHistoryImage};
pub use phantom::{Phantom, PhantomError, PhantomSpec};
pub use pipeline::{PipelineConfig, PipelineError, Scan};
pub use volume_io::{CtVolume, VolumeError, VolumeGeometry};
