//! Attention-based sound-source localization.
//!
//! A 1-D convolutional sound encoder and a 2-D convolutional visual encoder
//! are joined by a cosine-similarity attention module over the visual
//! feature grid. The crate covers the encoders and their gradients, the
//! training objectives and loop, consensus-IoU evaluation, cross-modal
//! retrieval, and saliency-driven camera paths on 360-degree frames.

pub mod attention;
pub mod audio;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pano;
pub mod raster;
pub mod retrieval;
pub mod sound_net;
pub mod trainer;
pub mod visual_net;

pub use attention::{
    attention_scores, context_vector, full_resolution_response, softmax_normalize, AttentionMap,
    ContextVector, GridMap, Mechanism, ResponseMap, ScoreMap,
};
pub use audio::{extract_window, load_audio, resample, AudioClip, WaveformWindow};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use evaluation::{
    auc, ciou, consensus_map, evaluate, per_subject_iou, success_rate, Annotation, BoundingBox,
    ConsensusMap, EvalConfig, EvalReport, SubjectAnnotation, SuccessRate, Tag,
};
pub use model::{localize, Localization, TripletInput, TwoStreamConfig, TwoStreamParams};
pub use objectives::{
    combined_loss, distance_ratio_loss, gradient_check, supervised_attention_loss,
    triplet_distances, GroundTruthAttention, LossBreakdown, LossWeights, TripletDistances,
};
pub use pano::{
    load_sequence, render_nfov, saliency_sequence, smooth_trajectory, weighted_center, EquirectFrame, HoldPolicy,
    NFoVTrajectory, ViewCenter,
};
pub use raster::{load_raster, Raster};
pub use retrieval::{
    knn, retrieval_report, retrieval_success, EmbeddingIndex, Metric, Modality, PseudoLabelSet,
    RetrievalReport,
};
pub use sound_net::{sound_forward, SoundContext, SoundEmbedding, SoundNetConfig, SoundNetParams};
pub use trainer::{
    generate_synthetic, sample_triplet, train, Checkpoint, DatasetManifest, SyntheticSpec,
    TrainConfig, Trainer,
};
pub use visual_net::{
    embed_context, visual_forward, FeatureGrid, VisualConfig, VisualEmbedding, VisualNetParams,
};
