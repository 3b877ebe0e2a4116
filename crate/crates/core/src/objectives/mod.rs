//! Training objectives and evaluation metrics.

mod ce;
mod cka;
mod eer;
mod score;

pub use ce::weighted_ce;
pub use cka::{
    cka_loss, hsic, linear_cka, linear_cka_on_tape, mean_off_diagonal, pairwise_cka, select_rows, CkaLoss, Matrix,
    HSIC_FLOOR,
};
pub use eer::{eer_from_scores, EerResult};
pub use score::{
    condition_breakdown, eer, format_scores, llr, parse_scores, read_scores, write_scores, Breakdown, BreakdownCell,
    ScoreRecord,
};

/// Per-step (or aggregated) loss values.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cka: f64,
    pub total: f64,
    pub pairwise_cka: Vec<Vec<f64>>,
}
