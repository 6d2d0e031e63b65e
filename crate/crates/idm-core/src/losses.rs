//! Training objectives: weighted cross-entropy on selected stylized source
//! images, class prototypes, prototype-contrastive supervision on mixed
//! images, and an information-maximization term on class marginals.
//!
//! Every loss has a value form and a `_grad` form returning the cotangent
//! that [`crate::model::backward`] consumes. Prototypes and the running
//! source marginal are treated as constants by the gradients: the trainer
//! recomputes them each iteration from forward passes and detaches them.

use crate::error::{IdmError, Result};
use crate::model::ForwardOutput;
use crate::scalar::{s, up, Scalar};
use crate::tensor::{LabelMap, Tensor3, IGNORE_LABEL};
use serde::{Deserialize, Serialize};

/// Smallest probability fed to a logarithm.
const LOG_FLOOR: f64 = 1e-12;
/// Floor applied to target marginals inside the information term.
pub const MARGINAL_FLOOR: f64 = 1e-8;

/// Per-class mean feature vectors; classes absent from the defining batch
/// are invalid and excluded from every sum.
#[derive(Debug, Clone)]
pub struct Prototypes<T> {
    pub num_classes: usize,
    pub feat_dim: usize,
    vectors: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> Prototypes<T> {
    pub fn vector(&self, class: usize) -> &[T] {
        &self.vectors[class * self.feat_dim..(class + 1) * self.feat_dim]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Build directly from per-class vectors (test support).
    pub fn from_vectors(num_classes: usize, feat_dim: usize, vectors: Vec<T>, valid: Vec<bool>) -> Self {
        assert_eq!(vectors.len(), num_classes * feat_dim);
        assert_eq!(valid.len(), num_classes);
        Prototypes {
            num_classes,
            feat_dim,
            vectors,
            valid,
        }
    }
}

/// Masked per-class mean of feature pixels across the batch.
pub fn compute_prototypes<T: Scalar>(
    features: &[&Tensor3<T>],
    labels: &[&LabelMap],
    num_classes: usize,
) -> Result<Prototypes<T>> {
    if features.len() != labels.len() {
        return Err(IdmError::Contract(
            "feature/label batch lengths differ".into(),
        ));
    }
    let feat_dim = features.first().map(|f| f.ch).unwrap_or(0);
    let mut sums = vec![T::zero(); num_classes * feat_dim];
    let mut counts = vec![0u64; num_classes];
    for (feat, label) in features.iter().zip(labels) {
        if feat.h != label.h || feat.w != label.w {
            return Err(IdmError::Contract(
                "feature and label spatial dims differ".into(),
            ));
        }
        if feat.ch != feat_dim {
            return Err(IdmError::Contract("feature dims differ across batch".into()));
        }
        let n = feat.plane_len();
        for i in 0..n {
            let c = label.as_slice()[i];
            if c == IGNORE_LABEL || c as usize >= num_classes {
                continue;
            }
            counts[c as usize] += 1;
            let base = c as usize * feat_dim;
            for d in 0..feat_dim {
                sums[base + d] = sums[base + d] + feat.plane(d)[i];
            }
        }
    }
    let mut valid = vec![false; num_classes];
    for c in 0..num_classes {
        if counts[c] > 0 {
            valid[c] = true;
            let inv: T = s(1.0 / counts[c] as f64);
            for d in 0..feat_dim {
                sums[c * feat_dim + d] = sums[c * feat_dim + d] * inv;
            }
        }
    }
    Ok(Prototypes {
        num_classes,
        feat_dim,
        vectors: sums,
        valid,
    })
}

/// Weighted cross-entropy over selected stylized images: per image the mean
/// over non-ignore pixels of `-log p(true class)`, scaled by the selection
/// weight, summed over the batch.
pub fn ssm_loss<T: Scalar>(
    labels: &[&LabelMap],
    weights: &[f64],
    outputs: &[&ForwardOutput<T>],
) -> Result<T> {
    Ok(ssm_loss_grad(labels, weights, outputs)?.0)
}

/// Value plus per-image logit cotangents.
pub fn ssm_loss_grad<T: Scalar>(
    labels: &[&LabelMap],
    weights: &[f64],
    outputs: &[&ForwardOutput<T>],
) -> Result<(T, Vec<Tensor3<T>>)> {
    if labels.len() != weights.len() || labels.len() != outputs.len() {
        return Err(IdmError::Contract("ssm batch lengths differ".into()));
    }
    if labels.is_empty() {
        log::warn!("ssm_loss called with an empty batch; returning 0");
        return Ok((T::zero(), Vec::new()));
    }
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(outputs.len());
    for ((label, &weight), out) in labels.iter().zip(weights).zip(outputs) {
        let probs = &out.probs;
        if probs.h != label.h || probs.w != label.w {
            return Err(IdmError::Contract(
                "ssm: probability map and label dims differ".into(),
            ));
        }
        let n = probs.plane_len();
        let valid = label
            .as_slice()
            .iter()
            .filter(|&&v| v != IGNORE_LABEL)
            .count();
        let mut grad = Tensor3::zeros(probs.ch, probs.h, probs.w);
        if valid == 0 || weight == 0.0 {
            grads.push(grad);
            continue;
        }
        let scale: T = s(weight / valid as f64);
        let mut img_loss = T::zero();
        for i in 0..n {
            let y = label.as_slice()[i];
            if y == IGNORE_LABEL {
                continue;
            }
            let p = probs.plane(y as usize)[i];
            img_loss = img_loss - p.max(s(LOG_FLOOR)).ln();
            for c in 0..probs.ch {
                let indicator = if c == y as usize { T::one() } else { T::zero() };
                grad.plane_mut(c)[i] = scale * (probs.plane(c)[i] - indicator);
            }
        }
        total = total + s::<T>(weight) * img_loss / s(valid as f64);
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Prototype-contrastive supervision on a mixed image: per non-ignore pixel
/// whose class has a valid prototype, cross-entropy of the softmax over
/// `prototype . feature / tau` restricted to valid classes.
pub fn scl_loss<T: Scalar>(
    features: &Tensor3<T>,
    label: &LabelMap,
    protos: &Prototypes<T>,
    tau: f64,
) -> Result<T> {
    Ok(scl_loss_grad(features, label, protos, tau)?.0)
}

/// Value plus the feature cotangent.
pub fn scl_loss_grad<T: Scalar>(
    features: &Tensor3<T>,
    label: &LabelMap,
    protos: &Prototypes<T>,
    tau: f64,
) -> Result<(T, Tensor3<T>)> {
    if tau <= 0.0 {
        return Err(IdmError::Config(format!("tau {tau} must be positive")));
    }
    if features.h != label.h || features.w != label.w {
        return Err(IdmError::Contract(
            "scl: feature and label dims differ".into(),
        ));
    }
    if features.ch != protos.feat_dim {
        return Err(IdmError::Contract(format!(
            "scl: feature dim {} vs prototype dim {}",
            features.ch, protos.feat_dim
        )));
    }
    let support: Vec<usize> = (0..protos.num_classes).filter(|&c| protos.valid[c]).collect();
    let mut grad = Tensor3::zeros(features.ch, features.h, features.w);
    let n = features.plane_len();
    let counted: Vec<usize> = (0..n)
        .filter(|&i| {
            let y = label.as_slice()[i];
            y != IGNORE_LABEL && (y as usize) < protos.num_classes && protos.valid[y as usize]
        })
        .collect();
    if counted.is_empty() || support.is_empty() {
        log::warn!("scl_loss: no supervisable pixels; returning 0");
        return Ok((T::zero(), grad));
    }
    let inv_tau: T = s(1.0 / tau);
    let inv_count: T = s(1.0 / counted.len() as f64);
    let mut total = T::zero();
    let mut logits = vec![T::zero(); support.len()];
    for &i in &counted {
        let y = label.as_slice()[i] as usize;
        // class-similarity logits over the valid support
        let mut max = T::neg_infinity();
        for (k, &c) in support.iter().enumerate() {
            let proto = protos.vector(c);
            let mut dot = T::zero();
            for d in 0..features.ch {
                dot = dot + proto[d] * features.plane(d)[i];
            }
            let z = dot * inv_tau;
            logits[k] = z;
            if z > max {
                max = z;
            }
        }
        let mut denom = T::zero();
        for z in logits.iter_mut() {
            *z = (*z - max).exp();
            denom = denom + *z;
        }
        for (k, &c) in support.iter().enumerate() {
            let sm = logits[k] / denom;
            let indicator = if c == y { T::one() } else { T::zero() };
            if c == y {
                total = total - (sm.max(s(LOG_FLOOR))).ln();
            }
            let coef = inv_count * inv_tau * (sm - indicator);
            let proto = protos.vector(c);
            for d in 0..features.ch {
                grad.plane_mut(d)[i] = grad.plane(d)[i] + coef * proto[d];
            }
        }
    }
    Ok((total * inv_count, grad))
}

/// Spatial mean of the per-pixel softmax: a C-dimensional distribution.
pub fn class_marginal<T: Scalar>(probs: &Tensor3<T>) -> Vec<T> {
    let n = probs.plane_len();
    let inv: T = s(1.0 / n as f64);
    (0..probs.ch)
        .map(|c| probs.plane(c).iter().fold(T::zero(), |acc, &v| acc + v) * inv)
        .collect()
}

/// Information term `sum_c source_c * log target_c`, maximized when the
/// target marginal matches the source marginal.
pub fn im_loss<T: Scalar>(source_marginal: &[T], target_marginal: &[T]) -> Result<T> {
    if source_marginal.len() != target_marginal.len() {
        return Err(IdmError::Contract(
            "im: marginal dimensions differ".into(),
        ));
    }
    let floor: T = s(MARGINAL_FLOOR);
    let mut total = T::zero();
    for (&p, &q) in source_marginal.iter().zip(target_marginal) {
        total = total + p * q.max(floor).ln();
    }
    Ok(total)
}

/// Value of the information term plus its cotangent on the logits that
/// produced `probs` (the target marginal is the spatial softmax mean).
pub fn im_loss_grad_logits<T: Scalar>(
    source_marginal: &[T],
    probs: &Tensor3<T>,
) -> Result<(T, Tensor3<T>)> {
    if source_marginal.len() != probs.ch {
        return Err(IdmError::Contract("im: marginal dimension mismatch".into()));
    }
    let q = class_marginal(probs);
    let value = im_loss(source_marginal, &q)?;
    let floor: T = s(MARGINAL_FLOOR);
    // dL/dq_c, zero where the floor clipped
    let g: Vec<T> = source_marginal
        .iter()
        .zip(&q)
        .map(|(&p, &qc)| if qc >= floor { p / qc } else { T::zero() })
        .collect();
    let n = probs.plane_len();
    let inv_n: T = s(1.0 / n as f64);
    let mut grad = Tensor3::zeros(probs.ch, probs.h, probs.w);
    for i in 0..n {
        // softmax Jacobian applied to g / n at each pixel
        let mut dot = T::zero();
        for c in 0..probs.ch {
            dot = dot + g[c] * probs.plane(c)[i];
        }
        for c in 0..probs.ch {
            grad.plane_mut(c)[i] = inv_n * probs.plane(c)[i] * (g[c] - dot);
        }
    }
    Ok((value, grad))
}

/// Scalarization weights and the sign convention for the mixed-image terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ssm: f64,
    pub lambda_scl: f64,
    pub lambda_im: f64,
    /// Flip to train the mixed-image objective with the opposite sign
    /// (ablation switch); the default rewards marginal diversity.
    pub literal_pim_sign: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ssm: 1.0,
            lambda_scl: 1.0,
            lambda_im: 1.0,
            literal_pim_sign: false,
        }
    }
}

/// Per-iteration scalarization record; `total` is recomputable from the
/// components under the recorded weights and sign.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ssm: f64,
    pub l_scl: f64,
    pub l_im: f64,
    pub l_pim: f64,
    pub total: f64,
    pub lambda_scl: f64,
    pub lambda_im: f64,
}

/// Combine component losses into the minimized objective
/// `l_ssm + lambda_scl * l_scl - lambda_im * l_im` (signs flipped on the
/// mixed terms when `literal_pim_sign` is set).
pub fn total_loss(l_ssm: f64, l_scl: f64, l_im: f64, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("l_ssm", l_ssm), ("l_scl", l_scl), ("l_im", l_im)] {
        if !v.is_finite() {
            return Err(IdmError::Diverged {
                iter: 0,
                report: format!("{name} is non-finite: {v}; l_ssm={l_ssm} l_scl={l_scl} l_im={l_im}"),
            });
        }
    }
    let sign = if weights.literal_pim_sign { -1.0 } else { 1.0 };
    let total =
        weights.lambda_ssm * l_ssm + sign * (weights.lambda_scl * l_scl - weights.lambda_im * l_im);
    Ok(LossReport {
        l_ssm,
        l_scl,
        l_im,
        l_pim: l_im - l_scl,
        total,
        lambda_scl: weights.lambda_scl,
        lambda_im: weights.lambda_im,
    })
}

/// All cotangents of the full objective for one iteration.
pub struct TotalGrads<T> {
    /// Per selected source image, on its logits.
    pub d_logits_source: Vec<Tensor3<T>>,
    /// Per mixed image, on its logits (information term).
    pub d_logits_mixed: Vec<Tensor3<T>>,
    /// Per mixed image, on its features (contrastive term).
    pub d_features_mixed: Vec<Tensor3<T>>,
}

/// Evaluate the full objective and its cotangents. Prototypes and the
/// source marginal enter as constants. Mixed-image terms are averaged over
/// the mixed batch.
#[allow(clippy::too_many_arguments)]
pub fn total_objective<T: Scalar>(
    source_labels: &[&LabelMap],
    source_weights: &[f64],
    source_outputs: &[&ForwardOutput<T>],
    mixed_labels: &[&LabelMap],
    mixed_outputs: &[&ForwardOutput<T>],
    protos: &Prototypes<T>,
    source_marginal: &[T],
    tau: f64,
    weights: &LossWeights,
) -> Result<(LossReport, TotalGrads<T>)> {
    let (l_ssm, mut d_logits_source) =
        ssm_loss_grad(source_labels, source_weights, source_outputs)?;
    if weights.lambda_ssm != 1.0 {
        let coef: T = s(weights.lambda_ssm);
        for g in &mut d_logits_source {
            for v in g.as_mut_slice() {
                *v = *v * coef;
            }
        }
    }

    let m = mixed_outputs.len();
    let mut l_scl = T::zero();
    let mut l_im = T::zero();
    let mut d_logits_mixed = Vec::with_capacity(m);
    let mut d_features_mixed = Vec::with_capacity(m);
    if m > 0 {
        let sign = if weights.literal_pim_sign { -1.0 } else { 1.0 };
        let scl_coef: T = s(sign * weights.lambda_scl / m as f64);
        let im_coef: T = s(-sign * weights.lambda_im / m as f64);
        let inv_m: T = s(1.0 / m as f64);
        for (label, out) in mixed_labels.iter().zip(mixed_outputs) {
            let (scl, d_feat) = scl_loss_grad(&out.features, label, protos, tau)?;
            let (im, d_logit) = im_loss_grad_logits(source_marginal, &out.probs)?;
            l_scl = l_scl + scl * inv_m;
            l_im = l_im + im * inv_m;
            d_features_mixed.push(d_feat.map(|g| g * scl_coef));
            d_logits_mixed.push(d_logit.map(|g| g * im_coef));
        }
    }

    let report = total_loss(up(l_ssm), up(l_scl), up(l_im), weights)?;
    Ok((
        report,
        TotalGrads {
            d_logits_source,
            d_logits_mixed,
            d_features_mixed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_traced, init_model, Arch};
    use crate::tensor::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot_output(label: &LabelMap, num_classes: usize) -> ForwardOutput<f64> {
        let mut probs = Tensor3::zeros(num_classes, label.h, label.w);
        for i in 0..label.h * label.w {
            let y = label.as_slice()[i];
            let y = if y == IGNORE_LABEL { 0 } else { y as usize };
            probs.plane_mut(y)[i] = 1.0;
        }
        ForwardOutput {
            logits: probs.clone(),
            probs: probs.clone(),
            features: Tensor3::zeros(1, label.h, label.w),
        }
    }

    #[test]
    fn ssm_zero_at_perfect_predictions() {
        let label = LabelMap::from_vec(2, 2, vec![0, 1, 2, 1]).unwrap();
        let out = one_hot_output(&label, 3);
        let loss = ssm_loss(&[&label], &[1.5], &[&out]).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn ssm_zero_weights_zero_loss() {
        let label = LabelMap::from_vec(2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut probs = Tensor3::zeros(3, 2, 2);
        probs.as_mut_slice().fill(1.0 / 3.0);
        let out = ForwardOutput {
            logits: probs.clone(),
            probs,
            features: Tensor3::zeros(1, 2, 2),
        };
        let (loss, grads) = ssm_loss_grad(&[&label], &[0.0], &[&out]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads[0].as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ssm_single_pixel_hand_value() {
        // one pixel, C=2, p=(0.5, 0.5), true class 0, weight 2 -> 2 ln 2
        let label = LabelMap::from_vec(1, 1, vec![0]).unwrap();
        let mut probs = Tensor3::zeros(2, 1, 1);
        probs.as_mut_slice().fill(0.5);
        let out = ForwardOutput {
            logits: probs.clone(),
            probs,
            features: Tensor3::zeros(1, 1, 1),
        };
        let loss: f64 = ssm_loss(&[&label], &[2.0], &[&out]).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ssm_empty_batch_is_zero() {
        let loss: f64 = ssm_loss(&[], &[], &[]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn prototypes_single_and_pair() {
        let mut feat = Tensor3::<f64>::zeros(2, 1, 2);
        *feat.at_mut(0, 0, 0) = 1.0;
        *feat.at_mut(1, 0, 0) = 2.0;
        *feat.at_mut(0, 0, 1) = 3.0;
        *feat.at_mut(1, 0, 1) = 4.0;
        // single pixel of class 1, single pixel of class 2
        let label = LabelMap::from_vec(1, 2, vec![1, 2]).unwrap();
        let protos = compute_prototypes(&[&feat], &[&label], 4).unwrap();
        assert!(!protos.valid[0]);
        assert_eq!(protos.vector(1), &[1.0, 2.0]);
        assert_eq!(protos.vector(2), &[3.0, 4.0]);
        assert!(!protos.valid[3]);

        // two pixels of the same class average
        let label2 = LabelMap::from_vec(1, 2, vec![1, 1]).unwrap();
        let protos2 = compute_prototypes(&[&feat], &[&label2], 4).unwrap();
        assert_eq!(protos2.vector(1), &[2.0, 3.0]);
    }

    #[test]
    fn prototypes_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let batch: Vec<(Tensor3<f64>, LabelMap)> = (0..4)
            .map(|_| {
                let feat = Tensor3::from_vec(
                    d,
                    16,
                    16,
                    (0..d * 256).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                )
                .unwrap();
                let label = LabelMap::from_vec(
                    16,
                    16,
                    (0..256)
                        .map(|_| {
                            if rng.gen_bool(0.1) {
                                IGNORE_LABEL
                            } else {
                                rng.gen_range(0..5)
                            }
                        })
                        .collect(),
                )
                .unwrap();
                (feat, label)
            })
            .collect();
        let feats: Vec<&Tensor3<f64>> = batch.iter().map(|(f, _)| f).collect();
        let labels: Vec<&LabelMap> = batch.iter().map(|(_, l)| l).collect();
        let protos = compute_prototypes(&feats, &labels, 5).unwrap();

        // brute-force accumulation, one pixel at a time
        for c in 0..5usize {
            let mut sum = vec![0.0f64; d];
            let mut count = 0u64;
            for (feat, label) in &batch {
                for y in 0..16 {
                    for x in 0..16 {
                        if label.at(y, x) as usize == c {
                            count += 1;
                            for k in 0..d {
                                sum[k] += feat.at(k, y, x);
                            }
                        }
                    }
                }
            }
            if count == 0 {
                assert!(!protos.valid[c]);
            } else {
                for k in 0..d {
                    assert!((protos.vector(c)[k] - sum[k] / count as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn scl_single_valid_class_is_zero() {
        let feat = Tensor3::<f64>::full(2, 2, 2, 0.3);
        let label = LabelMap::filled(2, 2, 1);
        let protos = Prototypes::from_vectors(
            3,
            2,
            vec![0.0; 6],
            vec![false, true, false],
        );
        let loss = scl_loss(&feat, &label, &protos, 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn scl_orthonormal_prototype_hand_value() {
        // feature equals its class prototype, prototypes orthonormal, tau=1:
        // -log(e / (e + 1))
        let mut feat = Tensor3::<f64>::zeros(2, 1, 1);
        *feat.at_mut(0, 0, 0) = 1.0;
        let label = LabelMap::filled(1, 1, 0);
        let protos =
            Prototypes::from_vectors(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![true, true]);
        let loss = scl_loss(&feat, &label, &protos, 1.0).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn scl_large_tau_approaches_log_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feat = Tensor3::from_vec(3, 2, 2, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let label = LabelMap::from_vec(2, 2, vec![0, 1, 2, 0]).unwrap();
        let vectors: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let protos = Prototypes::from_vectors(3, 3, vectors, vec![true; 3]);
        let loss = scl_loss(&feat, &label, &protos, 1e9).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn scl_all_ignore_is_zero() {
        let feat = Tensor3::<f64>::full(2, 2, 2, 0.3);
        let label = LabelMap::filled(2, 2, IGNORE_LABEL);
        let protos = Prototypes::from_vectors(2, 2, vec![0.0; 4], vec![true, true]);
        let (loss, grad) = scl_loss_grad(&feat, &label, &protos, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn marginal_uniform_and_onehot() {
        let uniform = Tensor3::<f64>::full(4, 2, 2, 0.25);
        let q = class_marginal(&uniform);
        assert!(q.iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let label = LabelMap::filled(2, 2, 2);
        let onehot = one_hot_output(&label, 4);
        let q2 = class_marginal(&onehot.probs);
        assert!((q2[2] - 1.0).abs() < 1e-12);
        assert!((q2[0]).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_two_pass_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor3::from_vec(
            5,
            8,
            8,
            (0..5 * 64).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let probs = crate::model::layers::softmax_channels(&logits);
        let q = class_marginal(&probs);
        for c in 0..5 {
            let mut sum = 0.0f64;
            for y in 0..8 {
                for x in 0..8 {
                    sum += probs.at(c, y, x);
                }
            }
            assert!((q[c] - sum / 64.0).abs() < 1e-7);
        }
    }

    #[test]
    fn im_identical_marginals_is_negative_entropy() {
        let q = vec![0.1, 0.2, 0.3, 0.4];
        let v: f64 = im_loss(&q, &q).unwrap();
        let neg_entropy: f64 = q.iter().map(|&p| p * p.ln()).sum();
        assert!((v - neg_entropy).abs() < 1e-12);
    }

    #[test]
    fn im_single_term_hand_value() {
        let p = vec![1.0, 0.0];
        let q = vec![0.5, 0.5];
        let v: f64 = im_loss(&p, &q).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn im_maximized_at_matching_marginal() {
        let p = vec![0.7, 0.2, 0.1];
        let at_p: f64 = im_loss(&p, &p).unwrap();
        for q in [
            vec![0.6, 0.3, 0.1],
            vec![0.8, 0.1, 0.1],
            vec![1.0 / 3.0; 3],
        ] {
            let v = im_loss(&p, &q).unwrap();
            assert!(v <= at_p + 1e-12, "{v} should not exceed {at_p}");
        }
    }

    #[test]
    fn total_loss_arithmetic_and_zero_weights() {
        let w0 = LossWeights {
            lambda_scl: 0.0,
            lambda_im: 0.0,
            ..LossWeights::default()
        };
        let r = total_loss(1.25, 9.0, -4.0, &w0).unwrap();
        assert_eq!(r.total, 1.25);

        let w1 = LossWeights::default();
        let r = total_loss(1.0, 0.5, -0.2, &w1).unwrap();
        assert!((r.total - 1.7).abs() < 1e-12);
        assert!((r.l_pim - (-0.7)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let w = LossWeights::default();
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, &w),
            Err(IdmError::Diverged { .. })
        ));
        assert!(total_loss(1.0, f64::INFINITY, 0.0, &w).is_err());
    }

    // -------- finite-difference checks through the real network --------

    struct FdSetup {
        model: crate::model::ModelState<f64>,
        source_imgs: Vec<Image>,
        source_labels: Vec<LabelMap>,
        source_weights: Vec<f64>,
        mixed_img: Image,
        mixed_label: LabelMap,
        protos: Prototypes<f64>,
        p_hat: Vec<f64>,
        tau: f64,
    }

    fn fd_setup(tau: f64) -> FdSetup {
        let arch = Arch {
            in_channels: 3,
            widths: [4, 6, 8],
            feat_dim: 5,
            num_classes: 4,
        };
        let model = init_model::<f64>(&arch, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rand_img = |seed_off: u64| {
            let _ = seed_off;
            Image::from_vec(3, 8, 8, (0..3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap()
        };
        let source_imgs = vec![rand_img(0), rand_img(1)];
        let mixed_img = rand_img(2);
        let mut label_rng = ChaCha8Rng::seed_from_u64(31);
        let mut rand_label = || {
            LabelMap::from_vec(
                8,
                8,
                (0..64)
                    .map(|_| {
                        if label_rng.gen_bool(0.05) {
                            IGNORE_LABEL
                        } else {
                            label_rng.gen_range(0..4)
                        }
                    })
                    .collect(),
            )
            .unwrap()
        };
        let source_labels = vec![rand_label(), rand_label()];
        let mixed_label = rand_label();
        let mut proto_rng = ChaCha8Rng::seed_from_u64(41);
        let protos = Prototypes::from_vectors(
            4,
            5,
            (0..20).map(|_| proto_rng.gen_range(-1.0..1.0)).collect(),
            vec![true, true, true, false],
        );
        let p_hat = vec![0.4, 0.3, 0.2, 0.1];
        FdSetup {
            model,
            source_imgs,
            source_labels,
            source_weights: vec![1.3, 0.8],
            mixed_img,
            mixed_label,
            protos,
            p_hat,
            tau,
        }
    }

    /// Central finite differences on randomly chosen parameters against the
    /// assembled analytic gradient of the full objective.
    fn check_total_gradient(weights: &LossWeights, tau: f64, tol: f64) {
        let mut setup = fd_setup(tau);
        let eval = |m: &crate::model::ModelState<f64>, su: &FdSetup| -> f64 {
            let source_outputs: Vec<_> = su
                .source_imgs
                .iter()
                .map(|img| crate::model::forward(m, img).unwrap())
                .collect();
            let mixed_out = crate::model::forward(m, &su.mixed_img).unwrap();
            let src_out_refs: Vec<_> = source_outputs.iter().collect();
            let src_lab_refs: Vec<_> = su.source_labels.iter().collect();
            let (report, _) = total_objective(
                &src_lab_refs,
                &su.source_weights,
                &src_out_refs,
                &[&su.mixed_label],
                &[&mixed_out],
                &su.protos,
                &su.p_hat,
                su.tau,
                weights,
            )
            .unwrap();
            report.total
        };

        // analytic gradient via the model's reverse pass
        let mut grads = crate::model::zero_grads(&setup.model);
        {
            let mut src_traces = Vec::new();
            let mut src_outputs = Vec::new();
            for img in &setup.source_imgs {
                let (out, trace) =
                    forward_traced(&setup.model, &img.cast::<f64>()).unwrap();
                src_outputs.push(out);
                src_traces.push(trace);
            }
            let (mixed_out, mixed_trace) =
                forward_traced(&setup.model, &setup.mixed_img.cast::<f64>()).unwrap();
            let src_out_refs: Vec<_> = src_outputs.iter().collect();
            let src_lab_refs: Vec<_> = setup.source_labels.iter().collect();
            let (_, total_grads) = total_objective(
                &src_lab_refs,
                &setup.source_weights,
                &src_out_refs,
                &[&setup.mixed_label],
                &[&mixed_out],
                &setup.protos,
                &setup.p_hat,
                setup.tau,
                weights,
            )
            .unwrap();
            for (i, trace) in src_traces.iter().enumerate() {
                crate::model::backward(
                    &setup.model,
                    trace,
                    &total_grads.d_logits_source[i],
                    None,
                    &mut grads,
                )
                .unwrap();
            }
            crate::model::backward(
                &setup.model,
                &mixed_trace,
                &total_grads.d_logits_mixed[0],
                Some(&total_grads.d_features_mixed[0]),
                &mut grads,
            )
            .unwrap();
        }

        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 12 {
            let pi = rng.gen_range(0..setup.model.params.len());
            let ei = rng.gen_range(0..setup.model.params[pi].data.len());
            let orig = setup.model.params[pi].data[ei];
            setup.model.params[pi].data[ei] = orig + h;
            let hi = eval(&setup.model, &setup);
            setup.model.params[pi].data[ei] = orig - h;
            let lo = eval(&setup.model, &setup);
            setup.model.params[pi].data[ei] = orig;
            let fd = (hi - lo) / (2.0 * h);
            let an = grads[pi][ei];
            let denom = fd.abs().max(an.abs());
            if denom > 1e-8 {
                let rel = ((fd - an) / denom).abs();
                assert!(rel < tol, "param {pi}[{ei}]: fd {fd} analytic {an} rel {rel}");
            }
            checked += 1;
        }
    }

    #[test]
    fn total_gradient_matches_fd_default_sign() {
        check_total_gradient(&LossWeights::default(), 10.0, 1e-4);
    }

    #[test]
    fn total_gradient_matches_fd_literal_sign() {
        let w = LossWeights {
            literal_pim_sign: true,
            ..LossWeights::default()
        };
        check_total_gradient(&w, 10.0, 1e-4);
    }

    #[test]
    fn total_gradient_matches_fd_ssm_only() {
        let w = LossWeights {
            lambda_scl: 0.0,
            lambda_im: 0.0,
            ..LossWeights::default()
        };
        check_total_gradient(&w, 10.0, 1e-4);
    }
}
