//! Frame-level ROC AUC.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Scores with binary labels (1 = anomalous).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::validation(format!("label {bad} is not 0 or 1")));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Area under the ROC curve as the normalized Mann-Whitney statistic:
/// `P(s+ > s-) + P(s+ = s-) / 2`, computed from average ranks.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    if data.scores.len() != data.labels.len() {
        return Err(Error::validation("scores and labels differ in length"));
    }
    if data.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("non-finite score"));
    }
    let positives = data.labels.iter().filter(|&&l| l == 1).count();
    let negatives = data.labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {positives} anomalous and {negatives} normal"
        )));
    }
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    let mut positive_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let score = data.scores[order[i]];
        let mut j = i;
        while j < order.len() && data.scores[order[j]] == score {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let tied_positives = order[i..j].iter().filter(|&&k| data.labels[k] == 1).count();
        positive_rank_sum += avg_rank * tied_positives as f64;
        i = j;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Concatenates per-video scores in the given order.
pub fn micro_concat<'a>(per_video: impl IntoIterator<Item = &'a LabeledScores>) -> LabeledScores {
    let mut out = LabeledScores::default();
    for v in per_video {
        out.scores.extend_from_slice(&v.scores);
        out.labels.extend_from_slice(&v.labels);
    }
    out
}

/// Ground truth: video id to per-frame 0/1 labels.
pub type LabelMap = BTreeMap<String, Vec<u8>>;

pub fn read_labels<R: Read>(source: R) -> Result<LabelMap> {
    let labels: LabelMap = serde_json::from_reader(source)?;
    for (video, frames) in &labels {
        if frames.iter().any(|&l| l > 1) {
            return Err(Error::validation(format!("labels of {video} are not all 0/1")));
        }
    }
    Ok(labels)
}

pub fn write_labels<W: Write>(labels: &LabelMap, sink: W) -> Result<()> {
    serde_json::to_writer(sink, labels)?;
    Ok(())
}
