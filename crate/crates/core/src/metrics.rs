//! AUROC and report rows.

use alloc::vec::Vec;

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::federation::{Mode, RunRecord};
use crate::matrix::Matrix;
use crate::nn::forward;

/// Model scores paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                found: labels.len(),
            });
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::NonFinite("scores"));
        }
        if let Some(row) = labels.iter().position(|&y| y > 1) {
            return Err(Error::InvalidLabel {
                row,
                value: alloc::format!("{}", labels[row]),
            });
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Mann–Whitney AUROC with midranks for tied scores.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let n = set.scores.len();
    let n_pos = set.labels.iter().filter(|&&y| y == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2.
    // Doubling keeps every quantity an integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| set.labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j;
    }
    let p = n_pos as u128;
    // 2U = 2R − p(p+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    pub n_sites: usize,
    pub auroc: f64,
    /// Largest per-site ε; `None` (rendered `n/a`) for non-private arms.
    pub max_epsilon: Option<f64>,
    pub steps: usize,
}

impl ReportRow {
    pub fn epsilon_label(&self) -> alloc::string::String {
        match self.max_epsilon {
            Some(e) => alloc::format!("{e:.4}"),
            None => "n/a".into(),
        }
    }
}

/// Scores the final weights on the pooled test sets.
pub fn summarize_run(record: &RunRecord, test: &[SiteDataset]) -> Result<ReportRow> {
    if test.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let features = Matrix::vstack(test.iter().map(|d| d.features()))?;
    let labels: Vec<u8> = test.iter().flat_map(|d| d.labels().iter().copied()).collect();
    let scores = forward(&record.final_params, &features)?;
    Ok(ReportRow {
        mode: record.mode,
        n_sites: record.n_sites,
        auroc: auroc(&ScoredSet::new(scores, labels)?)?,
        max_epsilon: record.max_epsilon(),
        steps: record.total_steps(),
    })
}
