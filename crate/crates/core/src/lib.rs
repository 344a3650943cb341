//! Promptable segmentation whose image encoder is conditioned, through
//! adapters, on vision-language features of the prompted class.
//!
//! The pipeline for one `(image, class)` pair:
//!
//! 1. encode the class prompt with the text encoder (cached per class),
//! 2. encode the image with the vision-language image encoder,
//! 3. score every patch against the text embedding (cosine similarity),
//! 4. upsample, min-max normalize and threshold the scores into a prompt mask,
//! 5. derive a dense prompt and point prompts from that mask (or from
//!    ground truth / user clicks in manual mode),
//! 6. run the segmentation encoder with semantic adapters fed by the text
//!    embedding, the patch embeddings and the scores,
//! 7. decode a mask from the prompts and the conditioned features.
//!
//! [`model::ClipGuidedSam`] holds the network, [`training`] and
//! [`evaluation`] drive experiments, [`service`] backs the HTTP endpoint.

pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod params;
pub mod resize;
pub mod rng;
pub mod seg_head;
pub mod semantic;
pub mod service;
pub mod training;

pub use error::{Error, Result};
pub use model::{Architecture, ClipGuidedSam, ModelConfig};
pub use seg_head::PromptMode;
