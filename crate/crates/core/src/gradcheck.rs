//! Finite-difference verification of the analytic gradients.
//!
//! The oracle perturbs every trainable coordinate by a central step and
//! differences the batch objective *value*; it never touches the analytic
//! backward pass it judges. Instances are tiny (dims capped) and run in f64.

use crate::cco::{self, BankTensors, GradientBundle, LossConfig, LossMode};
use crate::coat::{self, CoatParams, FeatureSet};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::scalar::Precision;
use crate::scoring::{Head, PosNegSplit};
use crate::tensor::Tensor;

const GRADCHECK_STREAM: u64 = 0x6C;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the worst relative error.
pub const REL_TOLERANCE: f64 = 1e-4;

/// Upper bounds for randomly drawn instance dimensions.
#[derive(Debug, Clone, Copy)]
pub struct DimCaps {
    pub n_concepts: usize,
    pub feature_dim: usize,
    pub query_dim: usize,
    pub concept_dim: usize,
    pub n_patches: usize,
    pub batch: usize,
}

/// The standard small caps: n <= 4, d <= 8, d_k <= 4, d_c <= 4, N_p <= 3.
pub const SMALL: DimCaps = DimCaps {
    n_concepts: 4,
    feature_dim: 8,
    query_dim: 4,
    concept_dim: 4,
    n_patches: 3,
    batch: 3,
};

/// A randomly drawn, fully materialized training micro-problem.
pub struct SmallInstance {
    pub samples: Vec<(FeatureSet<f64>, usize)>,
    pub params: CoatParams<f64>,
    pub head: Head<f64>,
    pub bank: BankTensors<f64>,
    pub cfg: LossConfig,
}

impl SmallInstance {
    pub fn generate(seed: u64) -> Self {
        Self::with_caps(seed, SMALL, LossMode::Cco)
    }

    pub fn with_caps(seed: u64, caps: DimCaps, mode: LossMode) -> Self {
        let mut rng = SplitMix64::stream(seed, GRADCHECK_STREAM);
        let n_classes = 2 + rng.next_below(2);
        let n = n_classes + rng.next_below(caps.n_concepts - n_classes + 1);
        let d = 2 + rng.next_below(caps.feature_dim - 1);
        let d_k = 1 + rng.next_below(caps.query_dim);
        let d_c = 1 + rng.next_below(caps.concept_dim);
        let n_patches = 1 + rng.next_below(caps.n_patches);
        let batch = 1 + rng.next_below(caps.batch);
        let group_ratio = [1.0, 1.0, 0.7, 0.5][rng.next_below(4)];

        let mut params = coat::init_params::<f64>(rng.next_u64(), n, d, d_k, d_c, group_ratio)
            .expect("valid dims");
        // Exercise the masked-global code path now and then.
        params.include_global = rng.next_below(4) != 0;

        let mut head = Head::<f64>::zeros(n_classes, n);
        for w in head.weight.data_mut() {
            *w = rng.normal() * 0.5;
        }
        for b in &mut head.bias {
            *b = rng.normal() * 0.1;
        }

        let text_data: Vec<f64> = (0..n * d_c).map(|_| rng.normal()).collect();
        let text = Tensor::from_vec(&[n, d_c], text_data).expect("shape");
        // Concept i belongs to class i mod n_classes: every class nonempty.
        let splits = (0..n_classes)
            .map(|y| {
                let pos: Vec<usize> = (0..n).filter(|i| i % n_classes == y).collect();
                let neg: Vec<usize> = (0..n).filter(|i| i % n_classes != y).collect();
                PosNegSplit { pos, neg }
            })
            .collect();
        let bank = BankTensors { text, splits };

        let tokens = n_patches + 1;
        let samples = (0..batch)
            .map(|_| {
                let data: Vec<f64> = (0..tokens * d).map(|_| rng.normal()).collect();
                let z = FeatureSet::new(Tensor::from_vec(&[tokens, d], data).expect("shape"))
                    .expect("finite");
                (z, rng.next_below(n_classes))
            })
            .collect();

        let cfg = LossConfig {
            lambda: 0.5,
            tau: 0.07,
            tau_bce: 1.0,
            mode,
            precision: Precision::F64,
        };
        Self {
            samples,
            params,
            head,
            bank,
            cfg,
        }
    }

    pub fn into_parts(
        self,
    ) -> (
        Vec<(FeatureSet<f64>, usize)>,
        CoatParams<f64>,
        Head<f64>,
        BankTensors<f64>,
    ) {
        (self.samples, self.params, self.head, self.bank)
    }

    fn sample_refs(&self) -> Vec<(&FeatureSet<f64>, usize)> {
        self.samples.iter().map(|(z, y)| (z, *y)).collect()
    }

    /// Batch objective at the given parameter setting.
    fn loss_at(&self, params: &CoatParams<f64>, head: &Head<f64>) -> Result<f64> {
        cco::total_loss_value(&self.sample_refs(), params, head, &self.bank, &self.cfg)
    }

    pub fn analytic_grads(&self) -> Result<GradientBundle<f64>> {
        let (_, grads, _) =
            cco::total_loss(&self.sample_refs(), &self.params, &self.head, &self.bank, &self.cfg)?;
        Ok(grads)
    }

    /// Central finite differences over every trainable coordinate.
    pub fn finite_diff_grads(&self, step: f64) -> Result<GradientBundle<f64>> {
        let mut params = self.params.clone();
        let mut head = self.head.clone();
        let mut fd = GradientBundle::zeros_like(&params, &head);
        for field in 0..5 {
            let len = field_slice(&fd, field).len();
            for k in 0..len {
                let orig = field_slice_mut(&mut params, &mut head, field, k, None);
                field_slice_mut(&mut params, &mut head, field, k, Some(orig + step));
                let plus = self.loss_at(&params, &head)?;
                field_slice_mut(&mut params, &mut head, field, k, Some(orig - step));
                let minus = self.loss_at(&params, &head)?;
                field_slice_mut(&mut params, &mut head, field, k, Some(orig));
                set_grad(&mut fd, field, k, (plus - minus) / (2.0 * step));
            }
        }
        Ok(fd)
    }
}

fn field_slice<'a>(g: &'a GradientBundle<f64>, field: usize) -> &'a [f64] {
    match field {
        0 => g.queries.data(),
        1 => g.key_proj.data(),
        2 => g.value_proj.data(),
        3 => g.head_weight.data(),
        _ => &g.head_bias,
    }
}

/// Reads coordinate `k` of the chosen field, writing `v` first when given.
fn field_slice_mut(
    params: &mut CoatParams<f64>,
    head: &mut Head<f64>,
    field: usize,
    k: usize,
    v: Option<f64>,
) -> f64 {
    let slot = match field {
        0 => &mut params.queries.data_mut()[k],
        1 => &mut params.key_proj.data_mut()[k],
        2 => &mut params.value_proj.data_mut()[k],
        3 => &mut head.weight.data_mut()[k],
        _ => &mut head.bias[k],
    };
    if let Some(v) = v {
        *slot = v;
    }
    *slot
}

fn set_grad(g: &mut GradientBundle<f64>, field: usize, k: usize, v: f64) {
    match field {
        0 => g.queries.data_mut()[k] = v,
        1 => g.key_proj.data_mut()[k] = v,
        2 => g.value_proj.data_mut()[k] = v,
        3 => g.head_weight.data_mut()[k] = v,
        _ => g.head_bias[k] = v,
    }
}

/// Worst relative error `|a-b| / max(1, |a|, |b|)` over all coordinates.
pub fn max_rel_error(a: &GradientBundle<f64>, b: &GradientBundle<f64>) -> f64 {
    let mut worst = 0.0f64;
    for field in 0..5 {
        let xs = field_slice(a, field);
        let ys = field_slice(b, field);
        assert_eq!(xs.len(), ys.len(), "gradient field {field} length");
        for (&x, &y) in xs.iter().zip(ys.iter()) {
            let rel = (x - y).abs() / 1.0f64.max(x.abs()).max(y.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

/// Outcome of a multi-instance gradient sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Checks `instances` random instances derived from `seed`.
pub fn run(seed: u64, instances: usize, caps: DimCaps, mode: LossMode) -> Result<GradcheckReport> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let inst = SmallInstance::with_caps(seed.wrapping_add(k as u64), caps, mode);
        let analytic = inst.analytic_grads()?;
        let numeric = inst.finite_diff_grads(FD_STEP)?;
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(GradcheckReport {
        instances,
        max_rel_error: worst,
        threshold: REL_TOLERANCE,
    })
}
