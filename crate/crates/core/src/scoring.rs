//! Cosine concept scores, the linear bottleneck head, and interventions.
//!
//! Score `i` is the cosine between the concept-wise visual embedding `e_i`
//! and the frozen text embedding `t_i`; embeddings with near-zero norm score
//! exactly 0 instead of NaN. The classifier sees nothing but the score
//! vector. All tie-breaks are deterministic: argmax picks the lowest class
//! index, top-k orders ties by ascending concept index.

use std::collections::BTreeMap;

use crate::coat::{self, CoatParams, FeatureSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, matvec, norm2, Tensor};
use crate::tensorio::{ConceptBankFile, TensorBundle};

/// Norm threshold under which an embedding is considered dead and scores 0.
pub const ZERO_NORM_GUARD: f64 = 1e-12;

/// Linear classifier over the concept score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<F> {
    /// `(n_classes, n_concepts)`.
    pub weight: Tensor<F>,
    /// `(n_classes)`.
    pub bias: Vec<F>,
}

impl<F: Scalar> Head<F> {
    pub fn zeros(n_classes: usize, n_concepts: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_classes, n_concepts]),
            bias: vec![F::zero(); n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn n_concepts(&self) -> usize {
        self.weight.cols()
    }

    pub fn cast<G: Scalar>(&self) -> Head<G> {
        Head {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| G::of(b.wide())).collect(),
        }
    }

    /// Adds `head_W` / `head_b` entries (as f32) to a bundle.
    pub fn add_to_bundle(&self, bundle: &mut TensorBundle) -> Result<()> {
        bundle.insert("head_W", self.weight.cast())?;
        let bias: Vec<f32> = self.bias.iter().map(|&b| b.narrow()).collect();
        bundle.insert("head_b", Tensor::from_vec(&[bias.len()], bias)?)?;
        Ok(())
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let weight: Tensor<F> = bundle.get("head_W")?.cast();
        let bias_t = bundle.get("head_b")?;
        if bias_t.shape().len() != 1 || bias_t.len() != weight.rows() {
            return Err(Error::shape(format!(
                "head bias shape {:?} does not match {} classes",
                bias_t.shape(),
                weight.rows()
            )));
        }
        let bias = bias_t.data().iter().map(|&b| F::of_f32(b)).collect();
        Ok(Self { weight, bias })
    }
}

/// The class-conditional partition of concept indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosNegSplit {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

impl PosNegSplit {
    /// Positives are the bank's concepts for class `y`; negatives the rest.
    pub fn from_bank(bank: &ConceptBankFile, y: usize) -> Result<Self> {
        if y >= bank.n_classes() {
            return Err(Error::invalid(format!(
                "class {y} out of range [0, {})",
                bank.n_classes()
            )));
        }
        let pos = bank.positives(y).to_vec();
        let mut is_pos = vec![false; bank.n_concepts()];
        for &c in &pos {
            is_pos[c] = true;
        }
        let neg = (0..bank.n_concepts()).filter(|&c| !is_pos[c]).collect();
        Ok(Self { pos, neg })
    }

    pub fn n_concepts(&self) -> usize {
        self.pos.len() + self.neg.len()
    }
}

/// Per-concept cosine scores between visual and text embeddings.
pub fn concept_scores<F: Scalar>(embeddings: &Tensor<F>, text: &Tensor<F>) -> Result<Vec<F>> {
    if embeddings.shape() != text.shape() {
        return Err(Error::shape(format!(
            "embeddings {:?} vs text embeddings {:?}",
            embeddings.shape(),
            text.shape()
        )));
    }
    let guard = F::of(ZERO_NORM_GUARD);
    let n = embeddings.rows();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let e = embeddings.row(i);
        let t = text.row(i);
        let ne = norm2(e);
        let nt = norm2(t);
        if ne < guard || nt < guard {
            scores.push(F::zero());
        } else {
            scores.push(dot(e, t) / (ne * nt));
        }
    }
    Ok(scores)
}

/// Head logits and the predicted class (argmax, lowest index on ties).
pub fn predict<F: Scalar>(head: &Head<F>, scores: &[F]) -> Result<(Vec<F>, usize)> {
    if scores.len() != head.n_concepts() {
        return Err(Error::shape(format!(
            "{} scores for a head over {} concepts",
            scores.len(),
            head.n_concepts()
        )));
    }
    let mut logits = matvec(&head.weight, scores);
    for (l, &b) in logits.iter_mut().zip(head.bias.iter()) {
        *l += b;
    }
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    Ok((logits, best))
}

/// Returns a copy of the scores with the edits applied, values clamped to
/// `[-1, 1]`. Prediction after intervention is `predict(head, &edited)`.
pub fn intervene<F: Scalar>(scores: &[F], edits: &BTreeMap<usize, F>) -> Result<Vec<F>> {
    let mut out = scores.to_vec();
    for (&idx, &value) in edits {
        if idx >= out.len() {
            return Err(Error::invalid(format!(
                "edit index {idx} out of range [0, {})",
                out.len()
            )));
        }
        out[idx] = value.max(-F::one()).min(F::one());
    }
    Ok(out)
}

/// One ranked concept: index, bank text, score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedConcept<F> {
    pub index: usize,
    pub text: String,
    pub score: F,
}

/// The `k` highest-scoring concepts, ties broken by ascending index.
pub fn top_k<F: Scalar>(
    scores: &[F],
    bank: &ConceptBankFile,
    k: usize,
) -> Result<Vec<RankedConcept<F>>> {
    let n = scores.len();
    if n != bank.n_concepts() {
        return Err(Error::shape(format!(
            "{n} scores for a bank of {} concepts",
            bank.n_concepts()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} out of range [1, {n}]")));
    }
    Ok(ranked_indices(scores)
        .into_iter()
        .take(k)
        .map(|i| RankedConcept {
            index: i,
            text: bank.concepts[i].clone(),
            score: scores[i],
        })
        .collect())
}

/// All concept indices ordered by descending score, ties ascending index.
pub fn ranked_indices<F: Scalar>(scores: &[F]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Full inference path for one image: attend, score, predict.
pub fn forward<F: Scalar>(
    z: &FeatureSet<F>,
    params: &CoatParams<F>,
    head: &Head<F>,
    text: &Tensor<F>,
) -> Result<(Vec<F>, Vec<F>, usize)> {
    let trace = coat::attend(z, params)?;
    let scores = concept_scores(&trace.embeddings, text)?;
    let (logits, predicted) = predict(head, &scores)?;
    Ok((scores, logits, predicted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<F: Scalar>(shape: &[usize], data: Vec<F>) -> Tensor<F> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn tiny_bank(n: usize) -> ConceptBankFile {
        ConceptBankFile::new(
            (0..n).map(|i| format!("concept {i}")).collect(),
            Tensor::from_vec(&[n, 1], vec![1.0f32; n]).unwrap(),
            vec!["y0".into()],
            vec![vec![0]],
        )
        .unwrap()
    }

    #[test]
    fn self_similarity_is_one_antipodal_is_minus_one() {
        let e = t(&[2, 2], vec![0.3f64, -0.4, -0.3, 0.4]);
        let text = t(&[2, 2], vec![0.3, -0.4, 0.3, -0.4]);
        let s = concept_scores(&e, &text).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_hand_example() {
        let e = t(&[1, 2], vec![1.0f64, 0.0]);
        let text = t(&[1, 2], vec![1.0, 1.0]);
        let s = concept_scores(&e, &text).unwrap();
        assert!((s[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_scores_zero_not_nan() {
        let e = t(&[1, 2], vec![0.0f64, 0.0]);
        let text = t(&[1, 2], vec![1.0, 1.0]);
        let s = concept_scores(&e, &text).unwrap();
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn scores_are_scale_invariant() {
        let e = t(&[1, 3], vec![0.2f64, -0.7, 0.5]);
        let scaled = t(&[1, 3], vec![0.2 * 37.0, -0.7 * 37.0, 0.5 * 37.0]);
        let text = t(&[1, 3], vec![1.0, 2.0, -1.0]);
        let a = concept_scores(&e, &text).unwrap();
        let b = concept_scores(&scaled, &text).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-6);
    }

    #[test]
    fn predict_argmax_and_zero_input() {
        let head = Head {
            weight: t(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]),
            bias: vec![0.0, 0.0],
        };
        let (_, y) = predict(&head, &[0.1, 0.9]).unwrap();
        assert_eq!(y, 1);
        let head_b = Head {
            weight: t(&[2, 2], vec![0.0f64; 4]),
            bias: vec![-1.0, 2.0],
        };
        let (logits, _) = predict(&head_b, &[0.0, 0.0]).unwrap();
        assert_eq!(logits, vec![-1.0, 2.0]);
    }

    #[test]
    fn predict_hand_matrix_example() {
        let head = Head {
            weight: t(&[2, 2], vec![1.0f64, -1.0, -1.0, 1.0]),
            bias: vec![0.0, 0.0],
        };
        let (logits, y) = predict(&head, &[0.6, 0.2]).unwrap();
        assert!((logits[0] - 0.4).abs() < 1e-12);
        assert!((logits[1] + 0.4).abs() < 1e-12);
        assert_eq!(y, 0);
    }

    #[test]
    fn predict_ties_pick_lowest_class() {
        let head = Head::<f64>::zeros(3, 2);
        let (_, y) = predict(&head, &[0.5, -0.5]).unwrap();
        assert_eq!(y, 0);
    }

    #[test]
    fn intervene_identity_clamp_and_composition() {
        let s = vec![0.1f64, -0.2, 0.3];
        assert_eq!(intervene(&s, &BTreeMap::new()).unwrap(), s);

        let mut edit = BTreeMap::new();
        edit.insert(1, 2.0);
        let out = intervene(&s, &edit).unwrap();
        assert_eq!(out[1], 1.0);

        // Disjoint edits commute.
        let mut e1 = BTreeMap::new();
        e1.insert(0, -0.9);
        let mut e2 = BTreeMap::new();
        e2.insert(2, 0.4);
        let ab = intervene(&intervene(&s, &e1).unwrap(), &e2).unwrap();
        let ba = intervene(&intervene(&s, &e2).unwrap(), &e1).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn intervene_rejects_out_of_range_index() {
        let mut edit = BTreeMap::new();
        edit.insert(5, 0.0f64);
        assert!(intervene(&[0.0, 0.0], &edit).is_err());
    }

    #[test]
    fn intervention_can_force_the_prediction() {
        let n = 4;
        let head = Head {
            weight: {
                let mut w = Tensor::<f64>::zeros(&[n, n]);
                for i in 0..n {
                    w.set2(i, i, 1.0);
                }
                w
            },
            bias: vec![0.0; n],
        };
        let s = vec![0.5, 0.2, 0.1, 0.4];
        for k in 0..n {
            let mut edit = BTreeMap::new();
            edit.insert(k, 1.0);
            // Depress every other score so s_k is the unique maximum.
            let mut base = vec![0.0; n];
            base.clone_from_slice(&s);
            for (i, v) in base.iter_mut().enumerate() {
                if i != k {
                    *v = 0.0;
                }
            }
            let edited = intervene(&base, &edit).unwrap();
            let (_, y) = predict(&head, &edited).unwrap();
            assert_eq!(y, k);
        }
    }

    #[test]
    fn top_k_orders_scores_descending_with_index_ties() {
        let bank = tiny_bank(3);
        let ranked = top_k(&[0.2f64, 0.9, 0.5], &bank, 2).unwrap();
        assert_eq!(ranked[0].index, 1);
        assert_eq!(ranked[1].index, 2);

        let all = top_k(&[0.2f64, 0.9, 0.5], &bank, 3).unwrap();
        let mut idx: Vec<usize> = all.iter().map(|r| r.index).collect();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2]);

        let tied = top_k(&[0.7f64, 0.7, 0.7], &bank, 2).unwrap();
        assert_eq!(tied[0].index, 0);
        assert_eq!(tied[1].index, 1);
    }

    #[test]
    fn top_k_rejects_out_of_range_k() {
        let bank = tiny_bank(3);
        assert!(top_k(&[0.0f64; 3], &bank, 0).is_err());
        assert!(top_k(&[0.0f64; 3], &bank, 4).is_err());
    }

    #[test]
    fn split_partitions_all_concepts() {
        let bank = ConceptBankFile::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            Tensor::from_vec(&[4, 1], vec![1.0f32; 4]).unwrap(),
            vec!["y0".into(), "y1".into()],
            vec![vec![1, 3], vec![0]],
        )
        .unwrap();
        let split = PosNegSplit::from_bank(&bank, 0).unwrap();
        assert_eq!(split.pos, vec![1, 3]);
        assert_eq!(split.neg, vec![0, 2]);
        assert_eq!(split.n_concepts(), 4);
    }
}
