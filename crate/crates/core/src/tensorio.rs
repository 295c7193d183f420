//! Bit-exact persistence for all numeric data.
//!
//! A *bundle* is a directory holding `manifest.json` plus one raw binary
//! file per entry. Values are IEEE-754 binary32, little-endian, row-major,
//! no header, no padding, regardless of host. Datasets and concept banks
//! are bundles with a JSON sidecar (`meta.json` / `bank.json`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Tensor32;

pub const DTYPE_F32: &str = "f32";

/// Named map of f32 tensors, the unit of on-disk persistence.
///
/// Ordered by name so serialization is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    entries: BTreeMap<String, Tensor32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_order: String,
    layout: String,
    data_file: String,
    elements: usize,
}

fn valid_entry_name(name: &str) -> bool {
    !name.is_empty() && !name.contains('/') && !name.contains('\\')
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry; the name must be nonempty and path-safe.
    pub fn insert(&mut self, name: &str, tensor: Tensor32) -> Result<()> {
        if !valid_entry_name(name) {
            return Err(Error::invalid(format!(
                "bundle entry name {name:?} is empty or contains a path separator"
            )));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor32> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("bundle has no entry {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Raw little-endian bytes of every entry, in name order.
    ///
    /// This is the byte stream checkpoint hashes are computed over.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, tensor) in &self.entries {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Writes `manifest.json` plus one raw f32-LE binary per entry.
///
/// NaN/Inf values are written verbatim.
pub fn write_bundle(bundle: &TensorBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(bundle.len());
    for (name, tensor) in &bundle.entries {
        let data_file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&data_file), &bytes)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            dtype: DTYPE_F32.to_string(),
            shape: tensor.shape().to_vec(),
            byte_order: "little".to_string(),
            layout: "row-major".to_string(),
            data_file,
            elements: tensor.len(),
        });
    }
    let manifest = Manifest { entries };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Reads a bundle back, validating dtype, layout, and byte lengths.
pub fn read_bundle(dir: &Path) -> Result<TensorBundle> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Format(format!(
            "missing manifest: {}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut bundle = TensorBundle::new();
    for entry in &manifest.entries {
        if entry.dtype != DTYPE_F32 {
            return Err(Error::Format(format!(
                "entry {:?}: unknown dtype {:?} (only {DTYPE_F32:?} is supported)",
                entry.name, entry.dtype
            )));
        }
        if entry.byte_order != "little" {
            return Err(Error::Format(format!(
                "entry {:?}: unsupported byte order {:?}",
                entry.name, entry.byte_order
            )));
        }
        if entry.layout != "row-major" {
            return Err(Error::Format(format!(
                "entry {:?}: unsupported layout {:?}",
                entry.name, entry.layout
            )));
        }
        let count: usize = entry.shape.iter().product();
        if count != entry.elements {
            return Err(Error::Format(format!(
                "entry {:?}: manifest says {} elements but shape {:?} implies {}",
                entry.name, entry.elements, entry.shape, count
            )));
        }
        let bytes = fs::read(dir.join(&entry.data_file))?;
        if bytes.len() != 4 * count {
            return Err(Error::Format(format!(
                "entry {:?}: data file holds {} bytes, shape {:?} requires {}",
                entry.name,
                bytes.len(),
                entry.shape,
                4 * count
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_vec(&entry.shape, values)?;
        bundle.insert(&entry.name, tensor)?;
    }
    Ok(bundle)
}

/// Dataset metadata sidecar (`meta.json`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_patches: usize,
    pub dim: usize,
    pub n_classes: usize,
}

/// A labeled feature dataset: `features` is `(M, n_patches+1, dim)` with
/// row 0 of every sample holding the global token.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub features: Tensor32,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl DatasetFile {
    pub fn new(features: Tensor32, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let shape = self.features.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "features must be rank 3 (samples, tokens, dim), got {shape:?}"
            )));
        }
        let (m, tokens, dim) = (shape[0], shape[1], shape[2]);
        if tokens != self.meta.n_patches + 1 {
            return Err(Error::shape(format!(
                "feature tensors have {tokens} token rows, expected n_patches+1 = {} \
                 (row 0 is the global token)",
                self.meta.n_patches + 1
            )));
        }
        if dim != self.meta.dim {
            return Err(Error::shape(format!(
                "feature dim {dim} does not match meta dim {}",
                self.meta.dim
            )));
        }
        if self.labels.len() != m {
            return Err(Error::shape(format!(
                "{} labels for {m} samples",
                self.labels.len()
            )));
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= self.meta.n_classes {
                return Err(Error::invalid(format!(
                    "sample {i}: label {y} out of range [0, {})",
                    self.meta.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    /// Flat `(n_patches+1) * dim` feature slice of sample `i`.
    pub fn sample_features(&self, i: usize) -> &[f32] {
        let stride = (self.meta.n_patches + 1) * self.meta.dim;
        &self.features.data()[i * stride..(i + 1) * stride]
    }
}

/// Writes a dataset as a bundle (`features`, `labels`) plus `meta.json`.
pub fn save_dataset(ds: &DatasetFile, dir: &Path) -> Result<()> {
    let mut bundle = TensorBundle::new();
    bundle.insert("features", ds.features.clone())?;
    let labels: Vec<f32> = ds.labels.iter().map(|&y| y as f32).collect();
    bundle.insert(
        "labels",
        Tensor::from_vec(&[ds.labels.len()], labels)?,
    )?;
    write_bundle(&bundle, dir)?;
    let mut f = fs::File::create(dir.join("meta.json"))?;
    serde_json::to_writer_pretty(&mut f, &ds.meta)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Loads and eagerly validates a dataset directory.
///
/// Labels are stored as f32 and must be integral; any invariant violation is
/// a load error naming the offending sample.
pub fn load_dataset(dir: &Path) -> Result<DatasetFile> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let bundle = read_bundle(dir)?;
    let features = bundle.get("features")?.clone();
    let labels_raw = bundle.get("labels")?;
    if labels_raw.shape().len() != 1 {
        return Err(Error::shape(format!(
            "labels must be rank 1, got {:?}",
            labels_raw.shape()
        )));
    }
    let mut labels = Vec::with_capacity(labels_raw.len());
    for (i, &v) in labels_raw.data().iter().enumerate() {
        if !v.is_finite() || v.fract() != 0.0 || v < 0.0 {
            return Err(Error::invalid(format!(
                "sample {i}: label {v} is not a non-negative integer"
            )));
        }
        labels.push(v as usize);
    }
    DatasetFile::new(features, labels, meta)
}

/// Concept bank: texts, frozen text embeddings, and the class -> positive
/// concept map that defines the positive/negative split.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBankFile {
    pub concepts: Vec<String>,
    pub text_embeddings: Tensor32,
    pub class_names: Vec<String>,
    pub class_to_concepts: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankSidecar {
    concepts: Vec<String>,
    class_names: Vec<String>,
    class_to_concepts: Vec<Vec<usize>>,
}

impl ConceptBankFile {
    pub fn new(
        concepts: Vec<String>,
        text_embeddings: Tensor32,
        class_names: Vec<String>,
        class_to_concepts: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let bank = Self {
            concepts,
            text_embeddings,
            class_names,
            class_to_concepts,
        };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        let n = self.concepts.len();
        let shape = self.text_embeddings.shape();
        if shape.len() != 2 || shape[0] != n {
            return Err(Error::shape(format!(
                "text_embeddings shape {shape:?} does not match {n} concepts"
            )));
        }
        if self.class_to_concepts.len() != self.class_names.len() {
            return Err(Error::invalid(format!(
                "{} class entries for {} class names",
                self.class_to_concepts.len(),
                self.class_names.len()
            )));
        }
        for (y, positives) in self.class_to_concepts.iter().enumerate() {
            if positives.is_empty() {
                return Err(Error::invalid(format!(
                    "class {y}: positive concept list is empty"
                )));
            }
            let mut seen = vec![false; n];
            for &c in positives {
                if c >= n {
                    return Err(Error::invalid(format!(
                        "class {y}: concept index {c} out of range [0, {n})"
                    )));
                }
                if seen[c] {
                    return Err(Error::invalid(format!(
                        "class {y}: concept index {c} listed twice"
                    )));
                }
                seen[c] = true;
            }
        }
        Ok(())
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn concept_dim(&self) -> usize {
        self.text_embeddings.shape()[1]
    }

    /// Positive concept indices of class `y`.
    pub fn positives(&self, y: usize) -> &[usize] {
        &self.class_to_concepts[y]
    }
}

/// Writes a concept bank as `bank.json` plus a bundle with `text_embeddings`.
pub fn save_concept_bank(bank: &ConceptBankFile, dir: &Path) -> Result<()> {
    let mut bundle = TensorBundle::new();
    bundle.insert("text_embeddings", bank.text_embeddings.clone())?;
    write_bundle(&bundle, dir)?;
    let sidecar = BankSidecar {
        concepts: bank.concepts.clone(),
        class_names: bank.class_names.clone(),
        class_to_concepts: bank.class_to_concepts.clone(),
    };
    let mut f = fs::File::create(dir.join("bank.json"))?;
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Loads and eagerly validates a concept bank directory.
pub fn load_concept_bank(dir: &Path) -> Result<ConceptBankFile> {
    let sidecar: BankSidecar = serde_json::from_str(&fs::read_to_string(dir.join("bank.json"))?)?;
    let bundle = read_bundle(dir)?;
    let text_embeddings = bundle.get("text_embeddings")?.clone();
    ConceptBankFile::new(
        sidecar.concepts,
        text_embeddings,
        sidecar.class_names,
        sidecar.class_to_concepts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn t32(shape: &[usize], data: Vec<f32>) -> Tensor32 {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn one_point_zero_encodes_to_golden_bytes() {
        let dir = tempdir().unwrap();
        let mut bundle = TensorBundle::new();
        bundle.insert("x", t32(&[1, 1], vec![1.0])).unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("x.bin")).unwrap();
        assert_eq!(bytes, vec![0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempdir().unwrap();
        let mut bundle = TensorBundle::new();
        bundle
            .insert("a", t32(&[2, 3], vec![0.1, -2.5, 3e-12, 7.0, -0.0, 1e20]))
            .unwrap();
        bundle.insert("b", t32(&[4], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn empty_bundle_round_trips() {
        let dir = tempdir().unwrap();
        let bundle = TensorBundle::new();
        write_bundle(&bundle, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_data_file_is_a_length_error() {
        let dir = tempdir().unwrap();
        let mut bundle = TensorBundle::new();
        bundle.insert("x", t32(&[3], vec![1.0, 2.0, 3.0])).unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let path = dir.path().join("x.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("8 bytes"), "{err}");
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempdir().unwrap();
        let mut bundle = TensorBundle::new();
        bundle.insert("x", t32(&[1], vec![1.0])).unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        fs::write(
            dir.path().join("manifest.json"),
            manifest.replace("\"f32\"", "\"f64\""),
        )
        .unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unknown dtype"), "{err}");
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempdir().unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing manifest"), "{err}");
    }

    #[test]
    fn path_separator_entry_names_are_rejected() {
        let mut bundle = TensorBundle::new();
        assert!(bundle.insert("a/b", t32(&[1], vec![0.0])).is_err());
        assert!(bundle.insert("", t32(&[1], vec![0.0])).is_err());
    }

    #[test]
    fn nan_values_round_trip_verbatim() {
        let dir = tempdir().unwrap();
        let mut bundle = TensorBundle::new();
        bundle
            .insert("x", t32(&[2], vec![f32::NAN, f32::INFINITY]))
            .unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        let data = back.get("x").unwrap().data();
        assert!(data[0].is_nan());
        assert_eq!(data[1], f32::INFINITY);
    }

    fn tiny_dataset() -> DatasetFile {
        let meta = DatasetMeta {
            n_patches: 2,
            dim: 2,
            n_classes: 2,
        };
        let features = t32(&[2, 3, 2], (0..12).map(|i| i as f32).collect());
        DatasetFile::new(features, vec![0, 1], meta).unwrap()
    }

    #[test]
    fn dataset_round_trips() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn out_of_range_label_names_the_sample() {
        let meta = DatasetMeta {
            n_patches: 2,
            dim: 2,
            n_classes: 2,
        };
        let features = t32(&[2, 3, 2], vec![0.0; 12]);
        let err = DatasetFile::new(features, vec![0, 2], meta).unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn missing_global_row_is_a_shape_error() {
        let meta = DatasetMeta {
            n_patches: 2,
            dim: 2,
            n_classes: 2,
        };
        // Only n_patches rows per sample: the global row is missing.
        let features = t32(&[2, 2, 2], vec![0.0; 8]);
        let err = DatasetFile::new(features, vec![0, 1], meta).unwrap_err();
        assert!(err.to_string().contains("global"), "{err}");
    }

    #[test]
    fn non_integral_label_is_rejected_on_load() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        // Corrupt the labels file with a fractional value.
        let mut bytes = fs::read(dir.path().join("labels.bin")).unwrap();
        bytes[..4].copy_from_slice(&0.5f32.to_le_bytes());
        fs::write(dir.path().join("labels.bin"), bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("sample 0"), "{err}");
    }

    fn tiny_bank() -> ConceptBankFile {
        ConceptBankFile::new(
            vec!["red".into(), "round".into(), "striped".into()],
            t32(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            vec!["apple".into(), "tiger".into()],
            vec![vec![0, 1], vec![2]],
        )
        .unwrap()
    }

    #[test]
    fn bank_round_trips_and_reads_positive_sets() {
        let dir = tempdir().unwrap();
        let bank = tiny_bank();
        save_concept_bank(&bank, dir.path()).unwrap();
        let back = load_concept_bank(dir.path()).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.positives(0).len(), 2);
        assert_eq!(back.positives(1), &[2]);
    }

    #[test]
    fn bank_invariants_are_checked() {
        let emb = t32(&[2, 2], vec![0.0; 4]);
        // Out-of-range concept index.
        let err = ConceptBankFile::new(
            vec!["a".into(), "b".into()],
            emb.clone(),
            vec!["y0".into()],
            vec![vec![0, 2]],
        )
        .unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
        // Empty positive list.
        let err = ConceptBankFile::new(
            vec!["a".into(), "b".into()],
            emb.clone(),
            vec!["y0".into()],
            vec![vec![]],
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
        // Duplicate entry.
        let err = ConceptBankFile::new(
            vec!["a".into(), "b".into()],
            emb,
            vec!["y0".into()],
            vec![vec![1, 1]],
        )
        .unwrap_err();
        assert!(err.to_string().contains("twice"), "{err}");
    }

    #[test]
    fn degenerate_bank_with_fewer_concepts_than_classes_loads() {
        // n >= |Y| is deliberately not required.
        let bank = ConceptBankFile::new(
            vec!["only".into()],
            t32(&[1, 2], vec![1.0, 0.0]),
            vec!["y0".into(), "y1".into()],
            vec![vec![0], vec![0]],
        );
        assert!(bank.is_ok());
    }
}
