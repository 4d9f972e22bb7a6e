//! Evaluation metrics and the sampling-based evaluation protocol.

pub mod evaluate;
pub mod ops;

pub use evaluate::{
    evaluate_model, format_table, sample_seed, DiffusionSampler, EvalOptions, MetricReport, Sampler, METRIC_NAMES,
};
pub use ops::{
    distance_block, diversity, dtw, dtw_lip, fdd, lip_correlation, lip_opening, lve, pcc_ccc, DistanceTensor,
    DiversityAccumulator,
};
