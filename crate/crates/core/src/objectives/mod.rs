//! Contrastive image-text training with slot normalization, and toy
//! self-distillation with an EMA teacher.

pub mod clip;
pub mod dino;

pub use clip::{
    clip_normalize, clip_normalize_var, clip_similarity, contrastive_loss, initial_logit_scale, ClipForward, ClipState,
    MAX_LOGIT_SCALE,
};
pub use dino::{
    dino_ema_update, dino_encoder_output, dino_loss, make_views, update_center, DinoConfig, DinoForward, DinoHead,
    DinoNet, DinoState,
};
