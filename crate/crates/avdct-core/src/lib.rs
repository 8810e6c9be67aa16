//! Trainable multi-channel transform codec with an asymmetric split: a
//! low-complexity encoder meant for an edge gateway and a heavier decoder
//! meant for a fog gateway, connected by a framed bitstream.
//!
//! The crate is organized around the pipeline:
//!
//! ```text
//! recording -> frames -> encoder -> latent -> quantize -> RLE+LZMA -> wire
//!     wire -> parse -> dequantize -> decoder -> frames -> reconstruction
//! ```
//!
//! plus the variational training objective, evaluation metrics and a
//! streaming transport harness.

// index arithmetic mirrors the matrix formulas throughout the kernels
#![allow(clippy::needless_range_loop)]

pub mod bitstream;
pub mod config;
pub mod decoder;
pub mod diffnet;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fognet;
pub mod objective;
pub mod tensor;
pub mod transform;

pub use bitstream::{
    dequantize, frame_parse, frame_serialize, quantize, rle_decode, rle_encode, QuantFrame,
    WireHeader,
};
pub use config::ModelConfig;
pub use decoder::{
    decode_frame, decode_frame_backward, decode_frame_cached, filter_bank, irmha, DecoderGrads,
    DecoderParams, FeatureMap,
};
pub use diffnet::{
    adamw_step, conv1x1, grad_check, hard_threshold, linear_forward, mha_forward, scale,
    AdamWConfig, AdamWState, GradCheckReport, MhaParams,
};
pub use encoder::{
    dcu, encode_frame, encode_frame_backward, encode_frame_cached, encode_frame_per_channel,
    model_stats, EncoderGrads, EncoderParams, Frame, LatentFrame,
};
pub use error::{BitstreamError, CheckpointError, CodecError, Result};
pub use evalkit::{
    average_metrics, compute_metrics, load_recording, reassemble_frames, save_recording,
    segment_frames, standardize_recording, Checkpoint, MetricsAverages, MetricsRecord, Recording,
    RecordingFormat,
};
pub use fognet::{
    assemble_reconstruction, edge_stream, fog_receive, loopback_session, receive_frames,
    simulate_link, stream_frames, LinkReport, SessionConfig, SessionMode,
};
pub use objective::{
    elbo_gradients, elbo_loss, kl_divergence, mle_scale, train, zero_fraction, EpochRecord,
    KlDirection, LossBreakdown, LossConfig, TrainHistory,
};
pub use tensor::Tensor;
pub use transform::{symmetric_convolve, ConvWeightVectors, Dct};
