//! CTC acoustic model, forced alignment and alignment-based filtering.

mod cache;
mod ctc;
mod curriculum;
mod filter;
mod model;
mod viterbi;

pub use cache::{decode_cache, encode_cache, read_cache, write_cache, CacheRecord};
pub use ctc::{ctc_forward_backward, ctc_log_likelihood, ctc_log_likelihood_node, min_frames, CtcResult};
pub use curriculum::{curriculum_subset, Curriculum, CurriculumSchedule, CurriculumVocab};
pub use filter::{filter_alignment, DropReason, FilterConfig, FilterDecision};
pub use model::{train_aligner, AlignerConfig, AlignerReport, CtcAligner, TrainExample, SCORE_GRID};
pub use viterbi::{viterbi_align, viterbi_score};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `[T, V+1]` per-frame log-probabilities; the last column is blank.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcLogits {
    scores: Tensor<f64>,
}

impl CtcLogits {
    /// Wraps scores that are already log-softmax normalized per row.
    pub fn new(scores: Tensor<f64>) -> Result<Self> {
        if scores.rank() != 2 || scores.rows() == 0 || scores.cols() < 2 {
            return Err(Error::shape(
                "ctc_logits",
                format!("expected [T>=1, C>=2], got {:?}", scores.shape()),
            ));
        }
        for t in 0..scores.rows() {
            let lse = scores.row(t).iter().map(|v| v.exp()).sum::<f64>().ln();
            if !(lse.abs() <= 1e-6) {
                return Err(Error::InvalidAlignment(format!(
                    "row {t} is not log-normalized (logsumexp {lse})"
                )));
            }
        }
        Ok(Self { scores })
    }

    /// Normalizes raw scores with a row-wise log-softmax.
    pub fn from_scores(raw: &Tensor<f64>) -> Result<Self> {
        if raw.rank() != 2 {
            return Err(Error::shape(
                "ctc_logits",
                format!("expected rank 2, got {:?}", raw.shape()),
            ));
        }
        let mut out = raw.clone();
        for t in 0..out.rows() {
            let row = out.row_mut(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Self::new(out)
    }

    pub fn scores(&self) -> &Tensor<f64> {
        &self.scores
    }

    pub fn frames(&self) -> usize {
        self.scores.rows()
    }

    /// Number of symbols including blank.
    pub fn classes(&self) -> usize {
        self.scores.cols()
    }

    pub fn blank(&self) -> usize {
        self.classes() - 1
    }
}

/// Token ids with their 1-based aligned frame positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub positions: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl Alignment {
    pub fn new(positions: Vec<usize>, tokens: Vec<usize>, t: usize) -> Result<Self> {
        if positions.len() != tokens.len() {
            return Err(Error::InvalidAlignment(format!(
                "{} positions for {} tokens",
                positions.len(),
                tokens.len()
            )));
        }
        crate::masks::validate_positions(&positions, t)?;
        Ok(Self { positions, tokens })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}
