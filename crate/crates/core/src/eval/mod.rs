//! Retrieval, zero-shot, selective-prediction, calibration and robustness
//! evaluation over encoded corpora.

pub mod calibration;
pub mod retrieval;
pub mod robustness;
pub mod selective;
pub mod stats;
pub mod zeroshot;

pub use calibration::ece;
pub use retrieval::{
    distance_matrix, evaluate_stores, recall_at_k, retrieval_report, rsum, Direction, RetrievalReport, STANDARD_KS,
};
pub use robustness::{robustness_report, RobustnessEntry, RobustnessReport};
pub use selective::{aurc, risk_coverage, selective_summary, ConfidenceSource, RiskCoverageCurve, SelectiveSummary};
pub use zeroshot::{zero_shot_eval, ZeroShotReport};
