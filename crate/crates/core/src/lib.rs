//! Multi-modal, topology-preserving embedding of spatial transcriptomics
//! data: graph convolution encoders per modality, fused into one embedding
//! and trained to preserve each modality's neighbourhood structure.

pub mod cli;
pub mod dataio;
pub mod downstream;
pub mod evaluate;
pub mod network;
pub mod objective;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod topology;
