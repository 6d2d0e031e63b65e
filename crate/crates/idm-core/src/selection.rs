//! Uncertainty-gated sample selection. Candidates are scored by the frozen
//! teacher only (no gradients): an entropy gate weights target-like images,
//! and a cosine gate against a memory bank of previously accepted outputs
//! rejects redundant ones. Acceptance is sequential in candidate order, so
//! a run is reproducible by replaying the gates.

use crate::error::{IdmError, Result};
use crate::model::{forward, ForwardOutput, TeacherState};
use crate::scalar::{up, Scalar};
use crate::styletx::StylizedSample;
use crate::tensor::{LabelMap, Tensor3, IGNORE_LABEL};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Running mean of the spatially-averaged softmax outputs of accepted
/// samples; the reference for the diversity gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub mean_output: Vec<f64>,
    pub count: usize,
}

impl MemoryBank {
    pub fn new(num_classes: usize) -> Self {
        MemoryBank {
            mean_output: vec![0.0; num_classes],
            count: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Fold one accepted output vector into the running mean.
    pub fn push(&mut self, output_vec: &[f64]) {
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for (m, &v) in self.mean_output.iter_mut().zip(output_vec) {
            *m += (v - *m) * inv;
        }
    }
}

/// Gate thresholds and the per-iteration acceptance budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub lambda_ent: f64,
    pub lambda_sim: f64,
    pub k: usize,
    pub batch_budget: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            lambda_ent: 0.015,
            lambda_sim: 0.5,
            k: 13,
            batch_budget: 2,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ent <= 0.0 {
            return Err(IdmError::Config("lambda_ent must be > 0".into()));
        }
        if !(self.lambda_sim > -1.0 && self.lambda_sim <= 1.0) {
            return Err(IdmError::Config("lambda_sim must lie in (-1, 1]".into()));
        }
        if self.k < 1 {
            return Err(IdmError::Config("k must be >= 1".into()));
        }
        if self.batch_budget < 1 {
            return Err(IdmError::Config("batch_budget must be >= 1".into()));
        }
        Ok(())
    }
}

/// Audit record for one scored candidate.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionRecord {
    pub sample_id: String,
    /// Mean per-pixel entropy normalized by log C, in [0, 1].
    pub entropy: f64,
    pub w_pred: f64,
    /// Cosine against the bank mean; 0.0 when the bank was empty.
    pub similarity: f64,
    pub class_count: usize,
    pub w_sim: u8,
    pub weight: f64,
    pub accepted: bool,
}

/// Spatial mean of per-pixel Shannon entropy, normalized by `log C`.
pub fn mean_entropy<T: Scalar>(probs: &Tensor3<T>) -> f64 {
    let n = probs.plane_len();
    let c = probs.ch;
    let mut total = 0.0f64;
    for i in 0..n {
        let mut h = 0.0f64;
        for ch in 0..c {
            let p = up(probs.plane(ch)[i]);
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / n as f64 / (c as f64).ln()
}

/// `exp(entropy - lambda_ent)` gated by the strict threshold.
pub fn prediction_weight(entropy: f64, lambda_ent: f64) -> f64 {
    if entropy > lambda_ent {
        (entropy - lambda_ent).exp()
    } else {
        0.0
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Diversity gate: passes iff the candidate's averaged output is dissimilar
/// to the bank mean (or the bank is empty) and the candidate contains
/// strictly more than `k` classes.
pub fn similarity_gate(
    output_vec: &[f64],
    class_count: usize,
    bank: &MemoryBank,
    cfg: &SelectionConfig,
) -> Result<(u8, f64)> {
    if output_vec.iter().all(|&v| v == 0.0) {
        return Err(IdmError::Contract(
            "similarity gate received a zero output vector".into(),
        ));
    }
    let similarity = if bank.is_empty() {
        0.0
    } else {
        cosine(output_vec, &bank.mean_output)
    };
    let diverse = bank.is_empty() || similarity < cfg.lambda_sim;
    let gate = u8::from(diverse && class_count > cfg.k);
    Ok((gate, similarity))
}

/// Distinct non-ignore classes present in a label map.
pub fn class_count(label: &LabelMap) -> usize {
    let mut seen = [false; 256];
    for &v in label.as_slice() {
        if v != IGNORE_LABEL {
            seen[v as usize] = true;
        }
    }
    seen.iter().filter(|&&s| s).count()
}

/// Spatially-averaged softmax output of a candidate.
pub fn averaged_output<T: Scalar>(output: &ForwardOutput<T>) -> Vec<f64> {
    let n = output.probs.plane_len() as f64;
    (0..output.probs.ch)
        .map(|c| {
            output.probs.plane(c).iter().map(|&v| up(v)).sum::<f64>() / n
        })
        .collect()
}

/// Outcome of scanning one candidate pool.
pub struct SelectionOutcome {
    /// Accepted candidates (indices into the input order) with weights.
    pub accepted: Vec<(usize, f64)>,
    pub records: Vec<SelectionRecord>,
    pub bank: MemoryBank,
}

/// Scan candidates in order against the frozen teacher: score every
/// candidate, accept those with positive weight until the budget fills,
/// folding each accepted output into the bank.
pub fn select_batch<T: Scalar>(
    candidates: &[StylizedSample],
    teacher: &TeacherState<T>,
    bank: &MemoryBank,
    cfg: &SelectionConfig,
) -> Result<SelectionOutcome> {
    cfg.validate()?;
    // teacher scoring is forward-only and order-independent, so candidates
    // can be evaluated in parallel; gating below stays sequential
    let outputs: Vec<Result<ForwardOutput<T>>> =
        crate::parallel::map_collect(candidates, |cand| forward(&teacher.model, &cand.image));
    let mut bank = bank.clone();
    let mut accepted = Vec::new();
    let mut records = Vec::with_capacity(candidates.len());
    for (idx, (cand, output)) in candidates.iter().zip(outputs).enumerate() {
        let output = output?;
        let entropy = mean_entropy(&output.probs);
        let w_pred = prediction_weight(entropy, cfg.lambda_ent);
        let n_classes = class_count(&cand.source_label);
        let avg = averaged_output(&output);
        let (w_sim, similarity) = similarity_gate(&avg, n_classes, &bank, cfg)?;
        let weight = w_pred * w_sim as f64;
        let take = weight > 0.0 && accepted.len() < cfg.batch_budget;
        if take {
            accepted.push((idx, weight));
            bank.push(&avg);
        }
        records.push(SelectionRecord {
            sample_id: cand.source_id.clone(),
            entropy,
            w_pred,
            similarity,
            class_count: n_classes,
            w_sim,
            weight,
            accepted: take,
        });
    }
    Ok(SelectionOutcome {
        accepted,
        records,
        bank,
    })
}

/// CSV columns: id, entropy, w_pred, similarity, class_count, weight.
pub fn write_records_csv<W: Write>(records: &[SelectionRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "id,entropy,w_pred,similarity,class_count,weight")?;
    for r in records {
        writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{},{:.9}",
            r.sample_id, r.entropy, r.w_pred, r.similarity, r.class_count, r.weight
        )?;
    }
    Ok(())
}
