//! Unsupervised lung CT pathology segmentation from a radiomics-distilled
//! 3D diffusion model.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity,
    clippy::too_many_arguments
)]

pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod distill;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod filters;
pub mod hu;
pub mod inference;
pub mod io;
pub mod nn;
pub mod phantom;
pub mod radiomics;
pub mod segment;
pub mod volume;

pub use config::ExperimentConfig;
pub use embedding::{Embedding, EMBED_DIM};
pub use error::{Error, Result};
pub use eval::MetricReport;
pub use hu::{HuBand, HuThresholds};
pub use phantom::{generate_phantom, PhantomSpec};
pub use radiomics::{RadiomicScaler, RadiomicVector, TeacherHeadParams};
pub use volume::{CtVolume, HuWindow, LabelVolume, NormalizedVolume, Patch, PathologyLabel};
