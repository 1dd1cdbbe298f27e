use serde::{Deserialize, Serialize};

use crate::encoding::TokenElement;
use crate::packing::{vision_spans, PackedSequence};
use crate::tensor::Matrix;

/// Target id at active position `t`, i.e. the next text token.
fn target(seq: &PackedSequence, t: usize) -> usize {
    match seq.elements[t + 1] {
        TokenElement::Text(id) => id as usize,
        ref other => panic!("loss mask active at {t} but target is {other:?}"),
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / z).collect();
    (row[target] - max - z.ln(), probs)
}

/// Sum of cross-entropy over active positions, and the active count.
pub fn masked_loss_sum(logits: &Matrix, seq: &PackedSequence) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    for t in (0..seq.len()).filter(|&t| seq.loss_mask[t]) {
        total -= log_softmax_at(logits.row(t), target(seq, t)).0;
        count += 1;
    }
    (total, count)
}

/// Mean next-token cross-entropy over positions where `loss_mask` is set;
/// zero when none are.
pub fn masked_loss(logits: &Matrix, seq: &PackedSequence) -> f64 {
    let (sum, count) = masked_loss_sum(logits, seq);
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Gradient of `sum(CE over active positions) / denom` w.r.t. the logits.
/// Inactive rows stay exactly zero.
pub fn masked_loss_grad(logits: &Matrix, seq: &PackedSequence, denom: f64) -> Matrix {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if denom == 0.0 {
        return grad;
    }
    for t in (0..seq.len()).filter(|&t| seq.loss_mask[t]) {
        let y = target(seq, t);
        let (_, probs) = log_softmax_at(logits.row(t), y);
        for (j, (g, p)) in grad.row_mut(t).iter_mut().zip(probs).enumerate() {
            *g = (p - if j == y { 1.0 } else { 0.0 }) / denom;
        }
    }
    grad
}

/// Loss split by whether the segment holding the position contains an image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sum: f64,
    pub count: usize,
    pub text_sum: f64,
    pub text_count: usize,
    pub vision_sum: f64,
    pub vision_count: usize,
}

impl LossParts {
    pub fn of(logits: &Matrix, seq: &PackedSequence) -> Self {
        let mut parts = Self::default();
        for seg in seq.segments() {
            let has_image = vision_spans(&seq.elements[seg.range.clone()]).is_ok_and(|s| !s.is_empty());
            for t in seg.range.filter(|&t| seq.loss_mask[t]) {
                let ce = -log_softmax_at(logits.row(t), target(seq, t)).0;
                parts.sum += ce;
                parts.count += 1;
                if has_image {
                    parts.vision_sum += ce;
                    parts.vision_count += 1;
                } else {
                    parts.text_sum += ce;
                    parts.text_count += 1;
                }
            }
        }
        parts
    }

    pub fn merge(&mut self, other: &LossParts) {
        self.sum += other.sum;
        self.count += other.count;
        self.text_sum += other.text_sum;
        self.text_count += other.text_count;
        self.vision_sum += other.vision_sum;
        self.vision_count += other.vision_count;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn text_mean(&self) -> Option<f64> {
        (self.text_count > 0).then(|| self.text_sum / self.text_count as f64)
    }

    pub fn vision_mean(&self) -> Option<f64> {
        (self.vision_count > 0).then(|| self.vision_sum / self.vision_count as f64)
    }
}
