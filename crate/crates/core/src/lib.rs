//! Exemplar-based image-to-image translation at desk scale.
//!
//! The pipeline has two stages. First, a target exemplar is warped onto the
//! layout of a source image using dense cosine correspondence between
//! centralized feature maps ([`correspondence`]). Second, the warped guide is
//! inverted into a frozen generator under several composing-layer
//! hypotheses ([`inversion`]), and the hypothesis whose output has the
//! smallest Fréchet distance to the generator's own sample distribution is
//! chosen ([`selection`]).

pub mod config;
pub mod correspondence;
pub mod error;
pub mod features;
pub mod generator;
pub mod image;
pub mod inversion;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod selection;
pub mod selftest;
pub mod synth;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use image::Image;
pub use pipeline::{run_pipeline, PipelineOutput};
