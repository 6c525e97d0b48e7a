//! Corpus curation and evaluation toolkit for text-to-music training data.
//!
//! The pipeline turns a directory of tracks into captioned 10-30 s clips:
//! decode ([`audio`]), energy-novelty segmentation ([`segment`]), feature
//! tagging ([`tags`]), caption construction ([`caption`]) and manifest
//! persistence with statistics and stage exports ([`corpus`]). Model-backed
//! steps go through the subprocess protocol in [`adapter`]. [`eval`]
//! compares generated and reference corpora.

pub mod adapter;
pub mod audio;
pub mod caption;
pub mod corpus;
pub mod dsp;
pub mod eval;
pub mod pipeline;
pub mod segment;
pub mod tags;
