//! Post-hoc slot tooling and frozen-encoder evaluations.

pub mod attn;
pub mod knn;
pub mod mask;
pub mod probe;
pub mod retrieval;
pub mod slots;

pub use attn::{export_attention, AttnFilter, AttnItem, AttnReport, SlotAttention};
pub use knn::{knn_classify, knn_predict, KNN_TEMPERATURE};
pub use mask::{train_mask, MaskParams, MaskTrainConfig, MaskTrainReport, MASK_SCALE_FLOOR};
pub use probe::{linear_probe, LinearClassifier, ProbeConfig, ProbeReport, WEIGHT_DECAY_GRID};
pub use retrieval::{hit_at_k, in_batch_retrieval, retrieval_at_k, RetrievalReport};
pub use slots::{
    apply_mask, apply_mask_renormalized, score_slots_retrieval, score_slots_zero_shot, select_top_k, Granularity,
    MaskSource, SlotMask, SlotScores,
};
