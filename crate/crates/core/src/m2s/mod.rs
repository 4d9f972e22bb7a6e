//! Mesh-to-speech regression used as a differentiable audio consistency
//! loss, plus its inversion by analysis-by-audio-synthesis.

pub mod abas;
pub mod model;
pub mod train;

pub use abas::{analysis_by_audio_synthesis, AbasOptions, AbasResult};
pub use model::{
    input_features, input_features_var, m2s_forward, m2s_loss, m2s_loss_var, InputSpace, M2SConfig, M2SLoss,
    M2SModel, M2SOutput, W_MEL, W_UNIT,
};
pub use train::{eval_m2s, fit_m2s, train_m2s, M2SEval, M2SHistory, M2SSample, M2STrainOptions};
