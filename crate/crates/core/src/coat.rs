//! Concept-wise attention over frozen visual tokens.
//!
//! Learnable queries (one per concept, or one per concept group) attend over
//! the joint token set `[global; patches]` through shared key/value
//! projections. For query `q`, attention is `softmax(K q / sqrt(d_k))`
//! computed with max-subtraction, and the concept-wise visual embedding is
//! the attention-weighted sum of value rows. No bias terms, no output
//! projection, single head per query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{dot, matmul, Tensor};
use crate::tensorio::TensorBundle;

/// RNG substream for parameter initialization.
const PARAM_STREAM: u64 = 0x70;

/// Frozen encoder output for one image: row 0 is the global token, the
/// remaining rows are patch tokens. All values must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<F> {
    tokens: Tensor<F>,
}

impl<F: Scalar> FeatureSet<F> {
    pub fn new(tokens: Tensor<F>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] < 1 {
            return Err(Error::shape(format!(
                "feature set must be (tokens, dim) with at least one token, got {:?}",
                tokens.shape()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::Numeric("feature set contains non-finite values".into()));
        }
        Ok(Self { tokens })
    }

    pub fn from_flat(flat: &[f32], n_tokens: usize, dim: usize) -> Result<Self> {
        let data = flat.iter().map(|&v| F::of_f32(v)).collect();
        Self::new(Tensor::from_vec(&[n_tokens, dim], data)?)
    }

    pub fn tokens(&self) -> &Tensor<F> {
        &self.tokens
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Learnable attention parameters plus the concept -> query grouping map.
#[derive(Debug, Clone, PartialEq)]
pub struct CoatParams<F> {
    /// Queries, one row per query group: `(n_q, d_k)`.
    pub queries: Tensor<F>,
    /// Key projection `(d, d_k)`, shared across queries.
    pub key_proj: Tensor<F>,
    /// Value projection `(d, d_c)`, shared across queries.
    pub value_proj: Tensor<F>,
    /// `group_of[i]` is the query index serving concept `i`.
    pub group_of: Vec<usize>,
    /// When false, the global token is excluded from keys and values.
    pub include_global: bool,
}

/// Grouping sidecar persisted next to the parameter bundle.
#[derive(Debug, Serialize, Deserialize)]
pub struct GroupSidecar {
    pub group_of: Vec<usize>,
    pub include_global: bool,
}

impl<F: Scalar> CoatParams<F> {
    pub fn n_queries(&self) -> usize {
        self.queries.rows()
    }

    pub fn n_concepts(&self) -> usize {
        self.group_of.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.key_proj.rows()
    }

    pub fn query_dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn concept_dim(&self) -> usize {
        self.value_proj.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_concepts();
        let n_q = self.n_queries();
        if n_q > n {
            return Err(Error::invalid(format!("{n_q} queries for {n} concepts")));
        }
        if self.key_proj.cols() != self.queries.cols() {
            return Err(Error::shape(format!(
                "key projection width {} vs query dim {}",
                self.key_proj.cols(),
                self.queries.cols()
            )));
        }
        if self.key_proj.rows() != self.value_proj.rows() {
            return Err(Error::shape(format!(
                "key/value projections disagree on feature dim: {} vs {}",
                self.key_proj.rows(),
                self.value_proj.rows()
            )));
        }
        let mut hit = vec![false; n_q];
        for (i, &g) in self.group_of.iter().enumerate() {
            if g >= n_q {
                return Err(Error::invalid(format!(
                    "concept {i} mapped to query {g}, but only {n_q} queries exist"
                )));
            }
            hit[g] = true;
        }
        if let Some(unused) = hit.iter().position(|&h| !h) {
            return Err(Error::invalid(format!("query {unused} serves no concept")));
        }
        if n_q == n && self.group_of.iter().enumerate().any(|(i, &g)| g != i) {
            return Err(Error::invalid(
                "with one query per concept the grouping must be the identity",
            ));
        }
        if !self.queries.all_finite() || !self.key_proj.all_finite() || !self.value_proj.all_finite()
        {
            return Err(Error::Numeric("attention parameters are not finite".into()));
        }
        Ok(())
    }

    /// Adds the parameter tensors (as f32) to a bundle under the canonical
    /// entry names `Q`, `W_K`, `W_V`.
    pub fn add_to_bundle(&self, bundle: &mut TensorBundle) -> Result<()> {
        bundle.insert("Q", self.queries.cast())?;
        bundle.insert("W_K", self.key_proj.cast())?;
        bundle.insert("W_V", self.value_proj.cast())?;
        Ok(())
    }

    pub fn from_bundle(bundle: &TensorBundle, sidecar: &GroupSidecar) -> Result<Self> {
        let params = Self {
            queries: bundle.get("Q")?.cast(),
            key_proj: bundle.get("W_K")?.cast(),
            value_proj: bundle.get("W_V")?.cast(),
            group_of: sidecar.group_of.clone(),
            include_global: sidecar.include_global,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn cast<G: Scalar>(&self) -> CoatParams<G> {
        CoatParams {
            queries: self.queries.cast(),
            key_proj: self.key_proj.cast(),
            value_proj: self.value_proj.cast(),
            group_of: self.group_of.clone(),
            include_global: self.include_global,
        }
    }
}

/// Attention weights and the per-concept embeddings of one forward pass.
///
/// `alphas` row `g` holds the attention of query `g` over all tokens
/// (masked tokens get exactly zero). `embeddings` row `i` is the embedding
/// of query `group_of(i)`, so concepts sharing a query share a row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<F> {
    pub alphas: Tensor<F>,
    pub embeddings: Tensor<F>,
}

/// Full forward record kept for the backward pass.
pub(crate) struct FullTrace<F> {
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
    pub alphas: Tensor<F>,
    /// Per-query embeddings `(n_q, d_c)` before group expansion.
    pub per_query: Tensor<F>,
    pub embeddings: Tensor<F>,
    /// First token row that participates (1 when the global token is excluded).
    pub start: usize,
}

/// Initializes parameters: `n_q = max(1, round(group_ratio * n))` queries,
/// Gaussian entries with std `1/sqrt(fan_in)` (fan-in `d_k` for queries,
/// `d` for the projections), and concept `i` assigned to query
/// `floor(i * n_q / n)`. Deterministic in `seed`.
pub fn init_params<F: Scalar>(
    seed: u64,
    n_concepts: usize,
    feature_dim: usize,
    query_dim: usize,
    concept_dim: usize,
    group_ratio: f64,
) -> Result<CoatParams<F>> {
    if n_concepts == 0 || feature_dim == 0 || query_dim == 0 || concept_dim == 0 {
        return Err(Error::Config(format!(
            "dimensions must be positive: n={n_concepts} d={feature_dim} d_k={query_dim} d_c={concept_dim}"
        )));
    }
    if !(group_ratio > 0.0 && group_ratio <= 1.0) {
        return Err(Error::Config(format!("group_ratio {group_ratio} not in (0, 1]")));
    }
    let n_q = ((group_ratio * n_concepts as f64).round() as usize).clamp(1, n_concepts);
    let mut rng = SplitMix64::stream(seed, PARAM_STREAM);
    let mut fill = |shape: &[usize], std: f64| -> Tensor<F> {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| F::of(rng.normal() * std)).collect();
        Tensor::from_vec(shape, data).expect("shape/len agree")
    };
    let queries = fill(&[n_q, query_dim], 1.0 / (query_dim as f64).sqrt());
    let key_proj = fill(&[feature_dim, query_dim], 1.0 / (feature_dim as f64).sqrt());
    let value_proj = fill(&[feature_dim, concept_dim], 1.0 / (feature_dim as f64).sqrt());
    let group_of = (0..n_concepts).map(|i| i * n_q / n_concepts).collect();
    let params = CoatParams {
        queries,
        key_proj,
        value_proj,
        group_of,
        include_global: true,
    };
    params.validate()?;
    Ok(params)
}

pub(crate) fn attend_full<F: Scalar>(
    z: &FeatureSet<F>,
    params: &CoatParams<F>,
) -> Result<FullTrace<F>> {
    if z.dim() != params.feature_dim() {
        return Err(Error::shape(format!(
            "tokens have dim {}, parameters expect {}",
            z.dim(),
            params.feature_dim()
        )));
    }
    let n_tokens = z.n_tokens();
    let start = if params.include_global { 0 } else { 1 };
    if start >= n_tokens {
        return Err(Error::Config(
            "global token excluded but no patch tokens remain".into(),
        ));
    }
    let keys = matmul(z.tokens(), &params.key_proj);
    let values = matmul(z.tokens(), &params.value_proj);
    let n_q = params.n_queries();
    let d_c = params.concept_dim();
    let scale = F::one() / F::of((params.query_dim() as f64).sqrt());

    let mut alphas = Tensor::zeros(&[n_q, n_tokens]);
    let mut per_query = Tensor::zeros(&[n_q, d_c]);
    for g in 0..n_q {
        let q = params.queries.row(g);
        // Scaled dot-product logits over the active tokens.
        let logits: Vec<F> = (start..n_tokens)
            .map(|j| dot(keys.row(j), q) * scale)
            .collect();
        let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut weights: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: F = weights.iter().cloned().sum();
        for w in &mut weights {
            *w /= sum;
        }
        let arow = alphas.row_mut(g);
        for (j, &w) in weights.iter().enumerate() {
            arow[start + j] = w;
        }
        let erow = per_query.row_mut(g);
        for (j, &w) in weights.iter().enumerate() {
            for (e, &v) in erow.iter_mut().zip(values.row(start + j).iter()) {
                *e += w * v;
            }
        }
    }

    let mut embeddings = Tensor::zeros(&[params.n_concepts(), d_c]);
    for (i, &g) in params.group_of.iter().enumerate() {
        embeddings.row_mut(i).copy_from_slice(per_query.row(g));
    }
    Ok(FullTrace {
        keys,
        values,
        alphas,
        per_query,
        embeddings,
        start,
    })
}

/// Runs concept-wise attention for one image.
pub fn attend<F: Scalar>(z: &FeatureSet<F>, params: &CoatParams<F>) -> Result<AttentionTrace<F>> {
    let full = attend_full(z, params)?;
    Ok(AttentionTrace {
        alphas: full.alphas,
        embeddings: full.embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<F: Scalar>(shape: &[usize], data: Vec<F>) -> Tensor<F> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn grouping_full_ratio_is_identity() {
        let p = init_params::<f64>(0, 5, 4, 3, 2, 1.0).unwrap();
        assert_eq!(p.n_queries(), 5);
        assert_eq!(p.group_of, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn grouping_half_ratio_of_four() {
        let p = init_params::<f64>(0, 4, 4, 3, 2, 0.5).unwrap();
        assert_eq!(p.n_queries(), 2);
        // floor(i * 2 / 4) for i = 0..3
        assert_eq!(p.group_of, vec![0, 0, 1, 1]);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_params::<f32>(9, 6, 8, 4, 4, 0.5).unwrap();
        let b = init_params::<f32>(9, 6, 8, 4, 4, 0.5).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f32>(10, 6, 8, 4, 4, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_token_attention_is_exactly_one() {
        let z = FeatureSet::new(t(&[1, 2], vec![3.0f64, -1.0])).unwrap();
        let params = CoatParams {
            queries: t(&[1, 2], vec![0.4, 0.6]),
            key_proj: t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            value_proj: t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            group_of: vec![0],
            include_global: true,
        };
        let trace = attend(&z, &params).unwrap();
        assert_eq!(trace.alphas.data(), &[1.0]);
        // The embedding is exactly that token's value row.
        assert_eq!(trace.embeddings.data(), &[3.0, -1.0]);
    }

    /// Builds a two-token instance whose attention logits are [0, ln 3].
    fn ln3_instance() -> (FeatureSet<f64>, CoatParams<f64>) {
        let ln3 = 3.0f64.ln();
        // d = 2, d_k = 1 so the softmax scale is 1; keys read the first
        // feature column, values are the raw tokens.
        let z = FeatureSet::new(t(&[2, 2], vec![0.0, 5.0, ln3, 7.0])).unwrap();
        let params = CoatParams {
            queries: t(&[1, 1], vec![1.0]),
            key_proj: t(&[2, 1], vec![1.0, 0.0]),
            value_proj: t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            group_of: vec![0],
            include_global: true,
        };
        (z, params)
    }

    #[test]
    fn softmax_of_zero_and_ln3_is_quarter_three_quarters() {
        let (z, params) = ln3_instance();
        let trace = attend(&z, &params).unwrap();
        assert!((trace.alphas.at2(0, 0) - 0.25).abs() < 1e-12);
        assert!((trace.alphas.at2(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn embedding_is_the_attention_weighted_value_sum() {
        let (z, params) = ln3_instance();
        let trace = attend(&z, &params).unwrap();
        // e = 0.25 * v0 + 0.75 * v1 with v0 = (0, 5), v1 = (ln 3, 7).
        let expect = [0.75 * 3.0f64.ln(), 0.25 * 5.0 + 0.75 * 7.0];
        for (got, want) in trace.embeddings.data().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn excluding_the_global_token_zeroes_its_weight() {
        let (z, mut params) = ln3_instance();
        params.include_global = false;
        let trace = attend(&z, &params).unwrap();
        assert_eq!(trace.alphas.at2(0, 0), 0.0);
        assert_eq!(trace.alphas.at2(0, 1), 1.0);
        assert_eq!(trace.embeddings.data(), &[3.0f64.ln(), 7.0]);
    }

    #[test]
    fn excluding_global_with_single_token_errors() {
        let z = FeatureSet::new(t(&[1, 2], vec![1.0f64, 2.0])).unwrap();
        let (_, mut params) = ln3_instance();
        params.include_global = false;
        assert!(attend(&z, &params).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (_, params) = ln3_instance();
        let z = FeatureSet::new(t(&[2, 3], vec![0.0f64; 6])).unwrap();
        assert!(attend(&z, &params).is_err());
    }

    #[test]
    fn non_finite_tokens_are_rejected() {
        assert!(FeatureSet::new(t(&[1, 2], vec![f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn grouped_concepts_share_embedding_rows() {
        let mut rng = crate::rng::SplitMix64::new(4);
        let tokens = t(&[3, 4], (0..12).map(|_| rng.normal()).collect());
        let z = FeatureSet::new(tokens).unwrap();
        let params = init_params::<f64>(1, 4, 4, 2, 3, 0.5).unwrap();
        let trace = attend(&z, &params).unwrap();
        assert_eq!(trace.embeddings.row(0), trace.embeddings.row(1));
        assert_eq!(trace.embeddings.row(2), trace.embeddings.row(3));
        assert_ne!(trace.embeddings.row(1), trace.embeddings.row(2));
    }
}
