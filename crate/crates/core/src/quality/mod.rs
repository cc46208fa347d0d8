//! Differentiable no-reference quality scorers and their calibration.

mod cnn;
mod logistic;
mod msliqe;
mod pyramid;
mod scorer;

pub use cnn::{train_cnn_scorer, CnnScorer, CnnTrainConfig, ScorerSample};
pub use logistic::{apply_logistic, fit_logistic, load_calibration_csv, normalize_targets, LogisticParams};
pub use msliqe::{
    batch_loss_grad, expected_quality, fidelity_loss, fidelity_loss_grad, level_probs, multiscale_logit,
    pairwise_accuracy, pairwise_label, pairwise_prob, train_msliqe, training_pair, MosDataset,
    MsLiqeConfig, MsLiqeModel, MsLiqeTrainConfig, MsLiqeTrainReport, PairIndex, QUALITY_LEVELS,
};
pub use pyramid::{build_pyramid, crop_windows, pyramid_sizes, CropWindow, PyramidConfig};
pub use scorer::{Calibrated, GradientSharpness, NegTotalVariation, QualityScorer};
