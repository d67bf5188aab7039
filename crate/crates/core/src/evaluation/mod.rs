//! Detection metrics (matching, AP/mAP, score error) and rater agreement
//! (confusion, Cohen's and Fleiss' kappa, concordance, F1, simulated mAP).

mod agreement;
mod metrics;
mod simulate;

pub use agreement::{
    accumulated_confusion, agreement_report, cohen_kappa, concordance_and_f1, concordance_f1_from,
    confusion, fleiss_kappa, rating_counts, AgreementReport, ConfusionMatrix, RaterAgreement,
};
pub use metrics::{
    average_precision, match_detections, mean_average_precision, score_error, ClassMatches,
    MatchReport, ScoreError, ScoreErrorMode,
};
pub use simulate::{
    adjacent_spillover_confusion, relabel, simulated_map_from_confusion, Confusion,
};
