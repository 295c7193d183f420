//! Training objectives and their exact gradients.
//!
//! The concept-contrastive loss treats the positive concept set jointly:
//!
//! ```text
//! L = -log( sum_pos exp(s/tau) / (sum_pos exp(s/tau) + sum_neg exp(s/tau)) )
//! ```
//!
//! evaluated in log-space with max-subtraction over all scores. The overall
//! objective per sample is `L_cls + lambda * L_concept` where `L_cls` is
//! softmax cross-entropy on the head logits and `L_concept` is the
//! contrastive loss above or its per-concept BCE ablation. [`total_loss`]
//! returns the batch mean together with exact analytic partials with respect
//! to the queries, both projections, and the head; the frozen features and
//! text embeddings receive no gradient.
//!
//! Per-sample contributions are accumulated in ascending sample order so a
//! batch result is reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::coat::{self, CoatParams, FeatureSet};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::scoring::{self, Head, PosNegSplit};
use crate::tensor::{add_outer, dot, matvec_t, norm2, Tensor};
use crate::tensorio::ConceptBankFile;

/// Which concept-level objective accompanies the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Cco,
    Bce,
    None,
}

/// Objective hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the concept loss in the overall objective.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Temperature of the BCE ablation's sigmoid.
    pub tau_bce: f64,
    pub mode: LossMode,
    pub precision: Precision,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 0.07,
            tau_bce: 1.0,
            mode: LossMode::Cco,
            precision: Precision::F32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.tau_bce > 0.0) {
            return Err(Error::Config(format!("tau_bce {} must be > 0", self.tau_bce)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }

    /// True when the concept-loss branch contributes to the objective.
    fn concept_active(&self) -> bool {
        self.mode != LossMode::None && self.lambda != 0.0
    }
}

fn softmax<F: Scalar>(x: &[F]) -> Vec<F> {
    let max = x.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = out.iter().cloned().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Concept-contrastive loss over one score vector.
///
/// An empty positive set contributes 0 (callers count the skip); an empty
/// negative set gives exactly 0.
pub fn cco_loss<F: Scalar>(scores: &[F], split: &PosNegSplit, tau: F) -> F {
    if split.pos.is_empty() {
        return F::zero();
    }
    let max = split
        .pos
        .iter()
        .chain(split.neg.iter())
        .map(|&i| scores[i] / tau)
        .fold(F::neg_infinity(), F::max);
    let sum_pos: F = split.pos.iter().map(|&i| (scores[i] / tau - max).exp()).sum();
    let sum_neg: F = split.neg.iter().map(|&i| (scores[i] / tau - max).exp()).sum();
    (sum_pos + sum_neg).ln() - sum_pos.ln()
}

/// dL/ds of [`cco_loss`]; zero vector when the positive set is empty.
pub fn cco_grad<F: Scalar>(scores: &[F], split: &PosNegSplit, tau: F) -> Vec<F> {
    let n = scores.len();
    let mut grad = vec![F::zero(); n];
    if split.pos.is_empty() {
        return grad;
    }
    let max = split
        .pos
        .iter()
        .chain(split.neg.iter())
        .map(|&i| scores[i] / tau)
        .fold(F::neg_infinity(), F::max);
    let weight = |i: usize| (scores[i] / tau - max).exp();
    let sum_pos: F = split.pos.iter().map(|&i| weight(i)).sum();
    let sum_neg: F = split.neg.iter().map(|&i| weight(i)).sum();
    let sum_all = sum_pos + sum_neg;
    for &i in &split.pos {
        grad[i] = (weight(i) / sum_all - weight(i) / sum_pos) / tau;
    }
    for &j in &split.neg {
        grad[j] = weight(j) / sum_all / tau;
    }
    grad
}

/// Softmax cross-entropy `-log softmax(logits)[y]`, log-sum-exp stabilized.
pub fn cls_loss<F: Scalar>(logits: &[F], y: usize) -> Result<F> {
    if y >= logits.len() {
        return Err(Error::invalid(format!(
            "label {y} out of range [0, {})",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let lse: F = logits.iter().map(|&l| (l - max).exp()).sum::<F>().ln() + max;
    Ok(lse - logits[y])
}

/// BCE ablation: mean over concepts of binary cross-entropy between
/// `sigmoid(s_i / tau_bce)` and the positive-set indicator.
pub fn bce_loss<F: Scalar>(scores: &[F], split: &PosNegSplit, tau_bce: F) -> F {
    let n = scores.len();
    let mut total = F::zero();
    for (i, &s) in scores.iter().enumerate() {
        let z = s / tau_bce;
        let target = if split.pos.contains(&i) { F::one() } else { F::zero() };
        // Stable: max(z,0) - z*t + ln(1 + exp(-|z|)).
        total += z.max(F::zero()) - z * target + (F::one() + (-z.abs()).exp()).ln();
    }
    total / F::of(n as f64)
}

/// dL/ds of [`bce_loss`].
pub fn bce_grad<F: Scalar>(scores: &[F], split: &PosNegSplit, tau_bce: F) -> Vec<F> {
    let n = scores.len();
    let inv = F::one() / (tau_bce * F::of(n as f64));
    let mut is_pos = vec![false; n];
    for &i in &split.pos {
        is_pos[i] = true;
    }
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let z = s / tau_bce;
            let sig = F::one() / (F::one() + (-z).exp());
            let target = if is_pos[i] { F::one() } else { F::zero() };
            (sig - target) * inv
        })
        .collect()
}

/// Concept bank prepared for a training precision: text embeddings cast to
/// `F` and the per-class positive/negative splits precomputed.
#[derive(Debug, Clone)]
pub struct BankTensors<F> {
    pub text: Tensor<F>,
    pub splits: Vec<PosNegSplit>,
}

impl<F: Scalar> BankTensors<F> {
    pub fn from_bank(bank: &ConceptBankFile) -> Result<Self> {
        let splits = (0..bank.n_classes())
            .map(|y| PosNegSplit::from_bank(bank, y))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            text: bank.text_embeddings.cast(),
            splits,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.text.rows()
    }
}

/// Partials of the batch objective, mirroring the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<F> {
    pub queries: Tensor<F>,
    pub key_proj: Tensor<F>,
    pub value_proj: Tensor<F>,
    pub head_weight: Tensor<F>,
    pub head_bias: Vec<F>,
}

impl<F: Scalar> GradientBundle<F> {
    pub fn zeros_like(params: &CoatParams<F>, head: &Head<F>) -> Self {
        Self {
            queries: Tensor::zeros(params.queries.shape()),
            key_proj: Tensor::zeros(params.key_proj.shape()),
            value_proj: Tensor::zeros(params.value_proj.shape()),
            head_weight: Tensor::zeros(head.weight.shape()),
            head_bias: vec![F::zero(); head.bias.len()],
        }
    }

    pub fn scale(&mut self, c: F) {
        for t in [&mut self.queries, &mut self.key_proj, &mut self.value_proj, &mut self.head_weight]
        {
            for v in t.data_mut() {
                *v *= c;
            }
        }
        for v in &mut self.head_bias {
            *v *= c;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.queries.all_finite()
            && self.key_proj.all_finite()
            && self.value_proj.all_finite()
            && self.head_weight.all_finite()
            && self.head_bias.iter().all(|v| v.is_finite())
    }
}

/// Per-batch bookkeeping from [`total_loss`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub n_samples: usize,
    /// Samples whose class had an empty positive set, so the contrastive
    /// term was skipped.
    pub skipped_empty_pos: usize,
    pub mean_cls_loss: f64,
    pub mean_concept_loss: f64,
}

struct SampleForward<F: Scalar> {
    trace: coat::FullTrace<F>,
    scores: Vec<F>,
    logits: Vec<F>,
    cls: F,
    concept: F,
    skipped: bool,
}

fn forward_one<F: Scalar>(
    z: &FeatureSet<F>,
    label: usize,
    params: &CoatParams<F>,
    head: &Head<F>,
    bank: &BankTensors<F>,
    cfg: &LossConfig,
) -> Result<SampleForward<F>> {
    if label >= bank.splits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range [0, {})",
            bank.splits.len()
        )));
    }
    let trace = coat::attend_full(z, params)?;
    let scores = scoring::concept_scores(&trace.embeddings, &bank.text)?;
    let (logits, _) = scoring::predict(head, &scores)?;
    let cls = cls_loss(&logits, label)?;
    let split = &bank.splits[label];
    let mut skipped = false;
    let concept = if cfg.concept_active() {
        match cfg.mode {
            LossMode::Cco => {
                if split.pos.is_empty() {
                    skipped = true;
                    F::zero()
                } else {
                    cco_loss(&scores, split, F::of(cfg.tau))
                }
            }
            LossMode::Bce => bce_loss(&scores, split, F::of(cfg.tau_bce)),
            LossMode::None => unreachable!(),
        }
    } else {
        F::zero()
    };
    Ok(SampleForward {
        trace,
        scores,
        logits,
        cls,
        concept,
        skipped,
    })
}

/// Accumulates one sample's parameter gradient into `grads`.
fn backward_one<F: Scalar>(
    z: &FeatureSet<F>,
    label: usize,
    fwd: &SampleForward<F>,
    params: &CoatParams<F>,
    head: &Head<F>,
    bank: &BankTensors<F>,
    cfg: &LossConfig,
    grads: &mut GradientBundle<F>,
) {
    let n = bank.n_concepts();
    let d_c = params.concept_dim();
    let n_tokens = z.n_tokens();
    let start = fwd.trace.start;
    let split = &bank.splits[label];

    // Classification head.
    let probs = softmax(&fwd.logits);
    let mut dlogits = probs;
    dlogits[label] -= F::one();
    for (b, &dl) in grads.head_bias.iter_mut().zip(dlogits.iter()) {
        *b += dl;
    }
    add_outer(&mut grads.head_weight, F::one(), &dlogits, &fwd.scores);
    let mut dscores = matvec_t(&head.weight, &dlogits);

    // Concept loss contribution to dL/ds.
    if cfg.concept_active() && !fwd.skipped {
        let lambda = F::of(cfg.lambda);
        let cg = match cfg.mode {
            LossMode::Cco => cco_grad(&fwd.scores, split, F::of(cfg.tau)),
            LossMode::Bce => bce_grad(&fwd.scores, split, F::of(cfg.tau_bce)),
            LossMode::None => unreachable!(),
        };
        for (d, g) in dscores.iter_mut().zip(cg) {
            *d += lambda * g;
        }
    }

    // Cosine backward: ds_i -> de_i, folded into per-query adjoints.
    let guard = F::of(scoring::ZERO_NORM_GUARD);
    let mut d_per_query = Tensor::<F>::zeros(&[params.n_queries(), d_c]);
    for i in 0..n {
        let e = fwd.trace.embeddings.row(i);
        let t = bank.text.row(i);
        let ne = norm2(e);
        let nt = norm2(t);
        if ne < guard || nt < guard {
            continue; // dead embedding scored a constant 0
        }
        let s = fwd.scores[i];
        let inv = F::one() / (ne * nt);
        let inv_e2 = F::one() / (ne * ne);
        let ds = dscores[i];
        let drow = d_per_query.row_mut(params.group_of[i]);
        for ((d, &tv), &ev) in drow.iter_mut().zip(t.iter()).zip(e.iter()) {
            *d += ds * (tv * inv - s * ev * inv_e2);
        }
    }

    // Attention backward.
    let scale = F::one() / F::of((params.query_dim() as f64).sqrt());
    let mut d_keys = Tensor::<F>::zeros(&[n_tokens, params.query_dim()]);
    let mut d_values = Tensor::<F>::zeros(&[n_tokens, d_c]);
    for g in 0..params.n_queries() {
        let dhat = d_per_query.row(g);
        let arow = fwd.trace.alphas.row(g);
        // Softmax backward over the active tokens.
        let dalpha: Vec<F> = (start..n_tokens)
            .map(|j| dot(fwd.trace.values.row(j), dhat))
            .collect();
        let inner: F = dalpha
            .iter()
            .zip(arow[start..].iter())
            .map(|(&da, &a)| da * a)
            .sum();
        let q = params.queries.row(g);
        let dq = grads.queries.row_mut(g);
        for (j, &da) in dalpha.iter().enumerate() {
            let token = start + j;
            let a = arow[token];
            let dl = a * (da - inner) * scale;
            for (dqv, &kv) in dq.iter_mut().zip(fwd.trace.keys.row(token).iter()) {
                *dqv += dl * kv;
            }
            for (dkv, &qv) in d_keys.row_mut(token).iter_mut().zip(q.iter()) {
                *dkv += dl * qv;
            }
            for (dvv, &dh) in d_values.row_mut(token).iter_mut().zip(dhat.iter()) {
                *dvv += a * dh;
            }
        }
    }

    // Projections: dW_K += Z^T dK, dW_V += Z^T dV (frozen Z gets nothing).
    for j in start..n_tokens {
        let zrow = z.tokens().row(j);
        add_outer(&mut grads.key_proj, F::one(), zrow, d_keys.row(j));
        add_outer(&mut grads.value_proj, F::one(), zrow, d_values.row(j));
    }
}

/// Batch objective value only (no gradients); the finite-difference oracle
/// drives this.
pub fn total_loss_value<F: Scalar>(
    samples: &[(&FeatureSet<F>, usize)],
    params: &CoatParams<F>,
    head: &Head<F>,
    bank: &BankTensors<F>,
    cfg: &LossConfig,
) -> Result<F> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    cfg.validate()?;
    let lambda = F::of(cfg.lambda);
    let mut total = F::zero();
    for &(z, label) in samples {
        let fwd = forward_one(z, label, params, head, bank, cfg)?;
        total += if cfg.concept_active() {
            fwd.cls + lambda * fwd.concept
        } else {
            fwd.cls
        };
    }
    Ok(total / F::of(samples.len() as f64))
}

/// Batch objective with exact analytic gradients.
///
/// Loss and gradients are means over the batch; accumulation order is the
/// sample order, so identical batches give identical bits.
pub fn total_loss<F: Scalar>(
    samples: &[(&FeatureSet<F>, usize)],
    params: &CoatParams<F>,
    head: &Head<F>,
    bank: &BankTensors<F>,
    cfg: &LossConfig,
) -> Result<(F, GradientBundle<F>, BatchStats)> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    cfg.validate()?;
    let lambda = F::of(cfg.lambda);
    let mut grads = GradientBundle::zeros_like(params, head);
    let mut stats = BatchStats {
        n_samples: samples.len(),
        ..Default::default()
    };
    let mut total = F::zero();
    for (idx, &(z, label)) in samples.iter().enumerate() {
        let fwd = forward_one(z, label, params, head, bank, cfg)?;
        let sample_loss = if cfg.concept_active() {
            fwd.cls + lambda * fwd.concept
        } else {
            fwd.cls
        };
        if !sample_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at batch sample {idx} (cls={:?}, concept={:?})",
                fwd.cls, fwd.concept
            )));
        }
        total += sample_loss;
        stats.mean_cls_loss += fwd.cls.wide();
        stats.mean_concept_loss += fwd.concept.wide();
        if fwd.skipped {
            stats.skipped_empty_pos += 1;
        }
        backward_one(z, label, &fwd, params, head, bank, cfg, &mut grads);
    }
    let inv = F::one() / F::of(samples.len() as f64);
    grads.scale(inv);
    stats.mean_cls_loss /= samples.len() as f64;
    stats.mean_concept_loss /= samples.len() as f64;
    Ok((total * inv, grads, stats))
}
