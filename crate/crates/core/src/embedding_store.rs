//! Precomputed embeddings and dataset records.
//!
//! Everything the engine knows about images, captions and questions arrives
//! here as data: two JSONL datasets plus one binary embedding table. Vectors
//! are re-normalized on ingestion so that [`cosine`] reduces to a dot
//! product, and the resulting [`Store`] is immutable and freely shared
//! across worker threads.
//!
//! Embedding table layout (all paths relative to the manifest):
//!
//! ```text
//! embeddings.json        {"dim", "count", "model_tag", "checksum", ["data"], ["index"]}
//! embeddings.bin         count * dim little-endian f32, row-major
//! embeddings.index.json  {"<emb_id>": <row>, ...}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{self, read_bytes, read_json, read_jsonl, sha256_hex, write_json, write_jsonl};

/// Vectors whose norm is already this close to 1 are kept bit-for-bit.
const UNIT_NORM_SLACK: f64 = 1e-7;

/// A unit-norm dense feature vector. Cloning is cheap (shared storage).
#[derive(Clone, PartialEq)]
pub struct EmbeddingVector(Arc<[f32]>);

impl EmbeddingVector {
    /// Scales `values` to unit L2 norm.
    ///
    /// Fails on non-finite entries, an empty vector or a zero norm. A vector
    /// already within `1e-7` of unit norm is returned unchanged, which makes
    /// normalization bitwise idempotent.
    pub fn normalized(values: Vec<f32>) -> std::result::Result<Self, NormError> {
        if values.is_empty() {
            return Err(NormError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NormError::NonFinite);
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(NormError::Zero);
        }
        if (norm - 1.0).abs() <= UNIT_NORM_SLACK {
            return Ok(Self(values.into()));
        }
        let scaled: Vec<f32> = values.iter().map(|&v| (f64::from(v) / norm) as f32).collect();
        Ok(Self(scaled.into()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EmbeddingVector(dim={}, {:?})",
            self.dim(),
            &self.0[..self.dim().min(4)]
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum NormError {
    #[error("empty vector")]
    Empty,
    #[error("non-finite entry")]
    NonFinite,
    #[error("zero norm")]
    Zero,
}

/// Cosine similarity of two unit vectors: their dot product, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot_unit(a.values(), b.values()))
}

/// Dot product accumulated in f64 in index order, clamped to `[-1, 1]`.
/// Callers guarantee equal lengths.
pub(crate) fn dot_unit(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    dot.clamp(-1.0, 1.0)
}

/// One in-context candidate from the training split.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub question: String,
    pub answer: String,
    /// Captions in stored (pre-ranked) order.
    pub captions: Vec<String>,
    /// Generic captioner output, when the dataset carries it.
    pub generic_captions: Option<Vec<String>>,
    pub question_emb: EmbeddingVector,
    pub image_emb: EmbeddingVector,
    pub question_emb_id: String,
    pub image_emb_id: String,
}

#[derive(Debug, Clone)]
pub struct CaptionCandidate {
    pub text: String,
    pub emb: EmbeddingVector,
    pub emb_id: String,
}

/// An inference-time question with its candidate captions.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub id: String,
    pub question: String,
    pub candidate_captions: Vec<CaptionCandidate>,
    pub image_emb: EmbeddingVector,
    pub image_emb_id: String,
    /// Required only by the averaged-similarity shot strategy.
    pub question_emb: Option<EmbeddingVector>,
    pub question_emb_id: Option<String>,
    /// Either empty (unscored) or exactly ten answers.
    pub human_answers: Vec<String>,
    pub generic_captions: Option<Vec<String>>,
    pub question_type: Option<String>,
}

/// Train dataset line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub captions: Vec<String>,
    pub question_emb_id: String,
    pub image_emb_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generic_captions: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub text: String,
    pub emb_id: String,
}

/// Test dataset line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestRecord {
    pub id: String,
    pub question: String,
    pub caption_entries: Vec<CaptionEntry>,
    pub image_emb_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_emb_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub human_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generic_captions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub dim: usize,
    pub count: usize,
    pub model_tag: String,
    /// Hex SHA-256 of the binary table, optionally prefixed with `sha256:`.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<String>,
}

impl EmbeddingManifest {
    fn data_path(&self, manifest_path: &Path) -> PathBuf {
        sibling(manifest_path, self.data.as_deref(), "bin")
    }

    fn index_path(&self, manifest_path: &Path) -> PathBuf {
        sibling(manifest_path, self.index.as_deref(), "index.json")
    }
}

fn sibling(manifest_path: &Path, explicit: Option<&str>, ext: &str) -> PathBuf {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    match explicit {
        Some(name) => dir.join(name),
        None => {
            let stem = manifest_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "embeddings".into());
            dir.join(format!("{stem}.{ext}"))
        }
    }
}

/// Raw embedding rows as stored on disk, before normalization.
#[derive(Debug)]
pub struct EmbeddingTable {
    pub manifest: EmbeddingManifest,
    rows: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// Loads the manifest, binary table and id index, verifying the checksum
    /// and the table size.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: EmbeddingManifest = read_json(manifest_path)?;
        if manifest.dim == 0 {
            return Err(Error::input(format!(
                "{}: dim must be positive",
                manifest_path.display()
            )));
        }
        let data_path = manifest.data_path(manifest_path);
        let bytes = read_bytes(&data_path)?;
        let actual = sha256_hex(&bytes);
        let expected = manifest
            .checksum
            .strip_prefix("sha256:")
            .unwrap_or(&manifest.checksum)
            .to_ascii_lowercase();
        if actual != expected {
            return Err(Error::Checksum {
                path: data_path,
                expected,
                actual,
            });
        }
        let want = manifest.dim * manifest.count * 4;
        if bytes.len() != want {
            return Err(Error::input(format!(
                "{}: expected {want} bytes for {} x {} f32, found {}",
                data_path.display(),
                manifest.count,
                manifest.dim,
                bytes.len()
            )));
        }
        let rows = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let index_path = manifest.index_path(manifest_path);
        let index: HashMap<String, usize> = read_json(&index_path)?;
        if let Some((id, row)) = index.iter().find(|(_, &row)| row >= manifest.count) {
            return Err(Error::input(format!(
                "{}: id {id:?} points at row {row} but count is {}",
                index_path.display(),
                manifest.count
            )));
        }
        Ok(Self { manifest, rows, index })
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn raw(&self, emb_id: &str) -> Option<&[f32]> {
        let row = *self.index.get(emb_id)?;
        let dim = self.dim();
        Some(&self.rows[row * dim..(row + 1) * dim])
    }
}

/// Writes an embedding table in ingestible form and returns its manifest.
/// Row order follows `rows`.
pub fn write_embeddings(manifest_path: &Path, model_tag: &str, rows: &[(String, &[f32])]) -> Result<EmbeddingManifest> {
    let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut bytes = Vec::with_capacity(rows.len() * dim * 4);
    let mut index = BTreeMap::new();
    for (row, (id, values)) in rows.iter().enumerate() {
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: values.len(),
            });
        }
        if index.insert(id.clone(), row).is_some() {
            return Err(Error::input(format!("duplicate embedding id {id:?}")));
        }
        for v in values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut manifest = EmbeddingManifest {
        dim,
        count: rows.len(),
        model_tag: model_tag.to_string(),
        checksum: sha256_hex(&bytes),
        data: None,
        index: None,
    };
    let data_path = manifest.data_path(manifest_path);
    let index_path = manifest.index_path(manifest_path);
    std::fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
    write_json(&index_path, &index)?;
    manifest.data = data_path.file_name().map(|n| n.to_string_lossy().into_owned());
    manifest.index = index_path.file_name().map(|n| n.to_string_lossy().into_owned());
    write_json(manifest_path, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Provenance of an ingested store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub sources: Vec<SourceFile>,
    pub model_tag: String,
    pub dim: usize,
    pub embedding_checksum: String,
    /// Digest over all source checksums; seeds per-store randomness.
    pub fingerprint: String,
}

/// Immutable, validated view of a dataset and its embeddings.
#[derive(Debug)]
pub struct Store {
    pub train: Vec<TrainExample>,
    pub test: Vec<TestSample>,
    pub dim: usize,
    pub manifest: StoreManifest,
    train_index: HashMap<String, usize>,
}

impl Store {
    pub fn ingest(train_path: &Path, test_path: &Path, embeddings_path: &Path) -> Result<Self> {
        let train_records: Vec<TrainRecord> = read_jsonl(train_path)?;
        let test_records: Vec<TestRecord> = read_jsonl(test_path)?;
        let table = EmbeddingTable::load(embeddings_path)?;

        let sources = vec![
            source("train", train_path)?,
            source("test", test_path)?,
            source("embeddings", embeddings_path)?,
        ];
        let embedding_checksum = table
            .manifest
            .checksum
            .strip_prefix("sha256:")
            .unwrap_or(&table.manifest.checksum)
            .to_ascii_lowercase();
        let fingerprint = sha256_hex(
            sources
                .iter()
                .map(|s| format!("{}:{}\n", s.role, s.sha256))
                .chain(std::iter::once(format!("data:{embedding_checksum}\n")))
                .collect::<String>()
                .as_bytes(),
        );
        let manifest = StoreManifest {
            sources,
            model_tag: table.manifest.model_tag.clone(),
            dim: table.dim(),
            embedding_checksum,
            fingerprint,
        };
        Self::from_records(train_records, test_records, &table, manifest)
    }

    /// Builds a store from parsed records. Resolves and normalizes every
    /// referenced embedding and enforces record invariants.
    pub fn from_records(
        train_records: Vec<TrainRecord>,
        test_records: Vec<TestRecord>,
        table: &EmbeddingTable,
        manifest: StoreManifest,
    ) -> Result<Self> {
        let mut resolver = Resolver::new(table);

        let mut train = Vec::with_capacity(train_records.len());
        let mut train_index = HashMap::with_capacity(train_records.len());
        for r in train_records {
            if train_index.insert(r.id.clone(), train.len()).is_some() {
                return Err(Error::input(format!("duplicate train id {:?}", r.id)));
            }
            if r.captions.is_empty() {
                return Err(Error::input(format!("train example {:?} has no captions", r.id)));
            }
            if r.answer.trim().is_empty() {
                return Err(Error::input(format!("train example {:?} has an empty answer", r.id)));
            }
            train.push(TrainExample {
                question_emb: resolver.get(&r.question_emb_id)?,
                image_emb: resolver.get(&r.image_emb_id)?,
                id: r.id,
                question: r.question,
                answer: r.answer,
                captions: r.captions,
                generic_captions: r.generic_captions,
                question_emb_id: r.question_emb_id,
                image_emb_id: r.image_emb_id,
            });
        }

        let mut test = Vec::with_capacity(test_records.len());
        let mut seen = HashSet::with_capacity(test_records.len());
        for r in test_records {
            if !seen.insert(r.id.clone()) {
                return Err(Error::input(format!("duplicate test id {:?}", r.id)));
            }
            if r.caption_entries.is_empty() {
                return Err(Error::input(format!("test sample {:?} has no captions", r.id)));
            }
            if !(r.human_answers.is_empty() || r.human_answers.len() == 10) {
                return Err(Error::input(format!(
                    "test sample {:?} has {} human answers; expected 0 or 10",
                    r.id,
                    r.human_answers.len()
                )));
            }
            let candidate_captions = r
                .caption_entries
                .into_iter()
                .map(|c| {
                    Ok(CaptionCandidate {
                        emb: resolver.get(&c.emb_id)?,
                        text: c.text,
                        emb_id: c.emb_id,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let question_emb = r.question_emb_id.as_deref().map(|id| resolver.get(id)).transpose()?;
            test.push(TestSample {
                image_emb: resolver.get(&r.image_emb_id)?,
                id: r.id,
                question: r.question,
                candidate_captions,
                image_emb_id: r.image_emb_id,
                question_emb,
                question_emb_id: r.question_emb_id,
                human_answers: r.human_answers,
                generic_captions: r.generic_captions,
                question_type: r.question_type,
            });
        }

        Ok(Self {
            train,
            test,
            dim: table.dim(),
            manifest,
            train_index,
        })
    }

    pub fn train_by_id(&self, id: &str) -> Option<&TrainExample> {
        self.train_index.get(id).map(|&i| &self.train[i])
    }

    pub fn test_by_id(&self, id: &str) -> Option<&TestSample> {
        self.test.iter().find(|t| t.id == id)
    }

    /// Writes the store back out as `train.jsonl`, `test.jsonl` and
    /// `embeddings.{json,bin,index.json}` under `dir`, holding the normalized
    /// vectors. Returns the three paths accepted by [`Store::ingest`].
    pub fn export(&self, dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rows: Vec<(String, &[f32])> = Vec::new();
        let mut seen = HashSet::new();
        fn push<'a>(seen: &mut HashSet<String>, rows: &mut Vec<(String, &'a [f32])>, id: &str, v: &'a EmbeddingVector) {
            if seen.insert(id.to_string()) {
                rows.push((id.to_string(), v.values()));
            }
        }

        let mut train_records = Vec::with_capacity(self.train.len());
        for t in &self.train {
            push(&mut seen, &mut rows, &t.question_emb_id, &t.question_emb);
            push(&mut seen, &mut rows, &t.image_emb_id, &t.image_emb);
            train_records.push(TrainRecord {
                id: t.id.clone(),
                question: t.question.clone(),
                answer: t.answer.clone(),
                captions: t.captions.clone(),
                question_emb_id: t.question_emb_id.clone(),
                image_emb_id: t.image_emb_id.clone(),
                generic_captions: t.generic_captions.clone(),
            });
        }
        let mut test_records = Vec::with_capacity(self.test.len());
        for t in &self.test {
            for c in &t.candidate_captions {
                push(&mut seen, &mut rows, &c.emb_id, &c.emb);
            }
            push(&mut seen, &mut rows, &t.image_emb_id, &t.image_emb);
            if let (Some(id), Some(v)) = (&t.question_emb_id, &t.question_emb) {
                push(&mut seen, &mut rows, id, v);
            }
            test_records.push(TestRecord {
                id: t.id.clone(),
                question: t.question.clone(),
                caption_entries: t
                    .candidate_captions
                    .iter()
                    .map(|c| CaptionEntry {
                        text: c.text.clone(),
                        emb_id: c.emb_id.clone(),
                    })
                    .collect(),
                image_emb_id: t.image_emb_id.clone(),
                question_emb_id: t.question_emb_id.clone(),
                human_answers: t.human_answers.clone(),
                generic_captions: t.generic_captions.clone(),
                question_type: t.question_type.clone(),
            });
        }

        let train_path = dir.join("train.jsonl");
        let test_path = dir.join("test.jsonl");
        let emb_path = dir.join("embeddings.json");
        write_jsonl(&train_path, &train_records)?;
        write_jsonl(&test_path, &test_records)?;
        write_embeddings(&emb_path, &self.manifest.model_tag, &rows)?;
        Ok((train_path, test_path, emb_path))
    }
}

fn source(role: &str, path: &Path) -> Result<SourceFile> {
    Ok(SourceFile {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256: jsonl::sha256_file(path)?,
    })
}

/// Normalizes each referenced row once and shares the result.
struct Resolver<'a> {
    table: &'a EmbeddingTable,
    cache: HashMap<String, EmbeddingVector>,
}

impl<'a> Resolver<'a> {
    fn new(table: &'a EmbeddingTable) -> Self {
        Self {
            table,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, emb_id: &str) -> Result<EmbeddingVector> {
        if let Some(v) = self.cache.get(emb_id) {
            return Ok(v.clone());
        }
        let raw = self
            .table
            .raw(emb_id)
            .ok_or_else(|| Error::MissingEmbedding(emb_id.to_string()))?;
        let v = EmbeddingVector::normalized(raw.to_vec()).map_err(|e| match e {
            NormError::Zero => Error::ZeroNorm(emb_id.to_string()),
            other => Error::input(format!("embedding {emb_id:?}: {other}")),
        })?;
        self.cache.insert(emb_id.to_string(), v.clone());
        Ok(v)
    }
}
