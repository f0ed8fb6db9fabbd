//! Core building blocks of the MSEVA pipeline: media preparation, silence
//! segmentation, transcription, the annotation protocol and evaluation
//! metrics.

pub mod annotation;
pub mod audio;
pub mod avi;
pub mod eval;
pub mod media;
pub mod riff;
pub mod segmenter;
pub mod synth;
pub mod transcriber;
