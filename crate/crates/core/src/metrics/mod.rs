//! Localization, similarity and generative metrics.

pub mod frechet;
pub mod generative;
pub mod localization;
pub mod probe;
pub mod ssim;

pub use frechet::{frechet_distance, FeatureExtractor, FEATURE_DIM};
pub use generative::{diversity, generate, generation_probe_auc, SamplingOptions};
pub use localization::{
    auc_roc, cnr, cnr_abs, score_case, score_cases, top1, write_scores_csv, CaseScores, ScoreSummary, CNR_EPS,
};
pub use probe::{nan_mean, probe_auc, probe_input, samples_labels, ProbeClassifier, ProbeConfig};
pub use ssim::{mean_pairwise, ms_ssim, ms_ssim_with};
