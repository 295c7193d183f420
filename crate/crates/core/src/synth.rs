//! Planted-concept synthetic datasets with known ground truth.
//!
//! Each concept gets a unit direction in feature space and a unit text
//! embedding (Gram-Schmidt orthonormalized when the dimension allows,
//! otherwise raw random unit vectors). An image of class `y` plants
//! `planted_patches_per_concept` patches per positive concept at
//! `signal_scale * u_c` plus Gaussian noise; every remaining patch and the
//! global token are pure noise. Because the global token carries no signal,
//! a model that only reads it cannot separate the classes: solutions must
//! attend to patches.
//!
//! Everything is a deterministic function of the config, including the seed
//! substreams, so regeneration is bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::tensorio::{ConceptBankFile, DatasetFile, DatasetMeta};
use crate::Tensor32;

const DIRECTION_STREAM: u64 = 0x01;
const TEXT_STREAM: u64 = 0x02;
const DATA_STREAM: u64 = 0x03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub concepts_per_class: usize,
    /// Visual feature dimension `d`.
    pub dim: usize,
    /// Text embedding dimension `d_c`.
    pub concept_dim: usize,
    pub n_patches: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub signal_scale: f64,
    pub noise_std: f64,
    pub planted_patches_per_concept: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 10,
            concepts_per_class: 5,
            dim: 32,
            concept_dim: 16,
            n_patches: 16,
            train_per_class: 50,
            test_per_class: 20,
            signal_scale: 1.0,
            noise_std: 0.3,
            planted_patches_per_concept: 3,
        }
    }
}

impl SynthConfig {
    pub fn n_concepts(&self) -> usize {
        self.n_classes * self.concepts_per_class
    }

    /// Dedicated validation set size: 20% of the train count, at least one
    /// image per class.
    pub fn val_per_class(&self) -> usize {
        ((self.train_per_class as f64) * 0.2).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.concepts_per_class == 0
            || self.dim == 0
            || self.concept_dim == 0
            || self.n_patches == 0
            || self.train_per_class == 0
            || self.test_per_class == 0
            || self.planted_patches_per_concept == 0
        {
            return Err(Error::Config("all synthetic sizes must be positive".into()));
        }
        if self.planted_patches_per_concept * self.concepts_per_class > self.n_patches {
            return Err(Error::Config(format!(
                "{} planted patches per concept x {} concepts exceed {} patches",
                self.planted_patches_per_concept, self.concepts_per_class, self.n_patches
            )));
        }
        if !(self.signal_scale > 0.0) {
            return Err(Error::Config(format!(
                "signal_scale {} must be > 0",
                self.signal_scale
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "noise_std {} must be >= 0",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Oracle relevance judgments for the generated data: an image's relevant
/// concepts are exactly its class's positive concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per class, the relevant concept indices (same as the bank's map).
    pub class_relevance: Vec<Vec<usize>>,
    /// Per split name, per image, the relevant concept indices.
    pub image_relevance: BTreeMap<String, Vec<Vec<usize>>>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Everything one synthetic run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train: DatasetFile,
    pub val: DatasetFile,
    pub test: DatasetFile,
    pub bank: ConceptBankFile,
    pub truth: GroundTruth,
}

/// Draws `count` unit vectors of dimension `dim`; orthonormalized via
/// Gram-Schmidt when `dim >= count`, raw random unit vectors otherwise.
fn unit_directions(rng: &mut SplitMix64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    let orthogonalize = dim >= count;
    for _ in 0..count {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            if orthogonalize {
                for prev in &dirs {
                    let proj: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                    for (x, p) in v.iter_mut().zip(prev.iter()) {
                        *x -= proj * p;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for x in &mut v {
                    *x /= norm;
                }
                dirs.push(v);
                break;
            }
            // Degenerate draw after projection; redraw.
        }
    }
    dirs
}

/// Generates the train/val/test splits, the concept bank, and the ground
/// truth for a config. Deterministic given the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let n = cfg.n_concepts();

    let mut dir_rng = SplitMix64::stream(cfg.seed, DIRECTION_STREAM);
    let directions = unit_directions(&mut dir_rng, n, cfg.dim);
    let mut text_rng = SplitMix64::stream(cfg.seed, TEXT_STREAM);
    let text_dirs = unit_directions(&mut text_rng, n, cfg.concept_dim);

    let mut text_data = Vec::with_capacity(n * cfg.concept_dim);
    for t in &text_dirs {
        text_data.extend(t.iter().map(|&x| x as f32));
    }
    let text_embeddings: Tensor32 = Tensor::from_vec(&[n, cfg.concept_dim], text_data)?;

    let class_to_concepts: Vec<Vec<usize>> = (0..cfg.n_classes)
        .map(|y| (y * cfg.concepts_per_class..(y + 1) * cfg.concepts_per_class).collect())
        .collect();
    let concepts = (0..n)
        .map(|i| {
            format!(
                "class {} marker {}",
                i / cfg.concepts_per_class,
                i % cfg.concepts_per_class
            )
        })
        .collect();
    let class_names = (0..cfg.n_classes).map(|y| format!("class {y}")).collect();
    let bank = ConceptBankFile::new(concepts, text_embeddings, class_names, class_to_concepts)?;

    let mut data_rng = SplitMix64::stream(cfg.seed, DATA_STREAM);
    let meta = DatasetMeta {
        n_patches: cfg.n_patches,
        dim: cfg.dim,
        n_classes: cfg.n_classes,
    };
    let mut make_split = |per_class: usize| -> Result<DatasetFile> {
        let m = per_class * cfg.n_classes;
        let tokens = cfg.n_patches + 1;
        let mut features = Vec::with_capacity(m * tokens * cfg.dim);
        let mut labels = Vec::with_capacity(m);
        for y in 0..cfg.n_classes {
            for _ in 0..per_class {
                // Global token: pure noise.
                for _ in 0..cfg.dim {
                    features.push((data_rng.normal() * cfg.noise_std) as f32);
                }
                // Planted patches, in positive-list order.
                for &c in bank.positives(y) {
                    for _ in 0..cfg.planted_patches_per_concept {
                        for u in &directions[c] {
                            features.push(
                                (cfg.signal_scale * u + data_rng.normal() * cfg.noise_std) as f32,
                            );
                        }
                    }
                }
                // Remaining patches: pure noise.
                let planted = cfg.concepts_per_class * cfg.planted_patches_per_concept;
                for _ in planted..cfg.n_patches {
                    for _ in 0..cfg.dim {
                        features.push((data_rng.normal() * cfg.noise_std) as f32);
                    }
                }
                labels.push(y);
            }
        }
        DatasetFile::new(Tensor::from_vec(&[m, tokens, cfg.dim], features)?, labels, meta)
    };

    let train = make_split(cfg.train_per_class)?;
    let val = make_split(cfg.val_per_class())?;
    let test = make_split(cfg.test_per_class)?;

    let mut image_relevance = BTreeMap::new();
    for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
        let sets: Vec<Vec<usize>> = ds
            .labels
            .iter()
            .map(|&y| bank.positives(y).to_vec())
            .collect();
        image_relevance.insert(name.to_string(), sets);
    }
    let truth = GroundTruth {
        class_relevance: bank.class_to_concepts.clone(),
        image_relevance,
    };

    Ok(SynthOutput {
        train,
        val,
        test,
        bank,
        truth,
    })
}
