//! Dataset ingestion, pool splitting and the fallback hashing embedder.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: embedding has {got} components, dataset dimension is {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: label {label} is outside [0, {num_classes})")]
    UnknownClassIndex {
        line: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("class {0} never occurs among the gold labels")]
    MissingClass(usize),
    #[error("dataset is empty")]
    Empty,
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    InvalidFractions(SplitFractions),
    #[error("partition {0} would be empty")]
    EmptyPartition(&'static str),
    #[error("unknown example id {0:?}")]
    UnknownId(String),
    #[error("example {0:?} is not in the unlabeled pool")]
    NotUnlabeled(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub dim: usize,
    examples: Vec<Example>,
    index: HashMap<String, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.num_classes == other.num_classes
            && self.dim == other.dim
            && self.examples == other.examples
    }
}

/// How to interpret a JSONL file.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Declared class count. Inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
    /// When set, records without an `embedding` are embedded from `text`
    /// with [`hash_embed`] at this dimension.
    pub hash_embed_dim: Option<usize>,
    /// Require every class to appear among the gold labels.
    pub require_all_classes: bool,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    text: Option<String>,
}

impl Dataset {
    /// Builds and validates a dataset from in-memory examples.
    pub fn new(name: impl Into<String>, num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        let dim = examples.first().map(|e| e.embedding.len()).ok_or(DataError::Empty)?;
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            let line = i + 1;
            if ex.embedding.len() != dim {
                return Err(DataError::DimensionMismatch { line, expected: dim, got: ex.embedding.len() });
            }
            if ex.embedding.iter().any(|v| !v.is_finite()) {
                return Err(DataError::MalformedRecord { line, reason: "non-finite embedding component".into() });
            }
            if let Some(label) = ex.label {
                if label >= num_classes {
                    return Err(DataError::UnknownClassIndex { line, label, num_classes });
                }
            }
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId { line, id: ex.id.clone() });
            }
        }
        if dim == 0 || num_classes == 0 {
            return Err(DataError::MalformedRecord { line: 1, reason: "dimension and class count must be positive".into() });
        }
        Ok(Dataset { name: name.into(), num_classes, dim, examples, index })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Every class index must occur at least once among gold labels.
    pub fn check_class_coverage(&self) -> Result<()> {
        let mut seen = vec![false; self.num_classes];
        for label in self.examples.iter().filter_map(|e| e.label) {
            seen[label] = true;
        }
        match seen.iter().position(|s| !s) {
            Some(c) => Err(DataError::MissingClass(c)),
            None => Ok(()),
        }
    }

    /// Ids whose embedding is the zero vector. Such examples are legal but
    /// have cosine similarity 0 to everything.
    pub fn zero_embedding_ids(&self) -> Vec<&str> {
        self.examples
            .iter()
            .filter(|e| e.embedding.iter().all(|&v| v == 0.0))
            .map(|e| e.id.as_str())
            .collect()
    }
}

pub fn load_dataset(path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut examples = Vec::new();
    let mut dim: Option<usize> = opts.hash_embed_dim;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| DataError::MalformedRecord { line: line_no, reason: e.to_string() })?;
        let embedding = match (rec.embedding, opts.hash_embed_dim) {
            (Some(v), _) => v,
            (None, Some(d)) => hash_embed(rec.text.as_deref().unwrap_or(""), d),
            (None, None) => {
                return Err(DataError::MalformedRecord {
                    line: line_no,
                    reason: "missing embedding and no hashing dimension configured".into(),
                })
            }
        };
        let expected = *dim.get_or_insert(embedding.len());
        if embedding.len() != expected {
            return Err(DataError::DimensionMismatch { line: line_no, expected, got: embedding.len() });
        }
        if let (Some(label), Some(c)) = (rec.label, opts.num_classes) {
            if label >= c {
                return Err(DataError::UnknownClassIndex { line: line_no, label, num_classes: c });
            }
        }
        lines.push(line_no);
        examples.push(Example { id: rec.id, embedding, label: rec.label, text: rec.text });
    }
    if examples.is_empty() {
        return Err(DataError::Empty);
    }
    let num_classes = match opts.num_classes {
        Some(c) => c,
        None => examples.iter().filter_map(|e| e.label).max().map(|m| m + 1).ok_or_else(|| {
            DataError::MalformedRecord { line: lines[0], reason: "no labels present and no class count declared".into() }
        })?,
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    // Re-map positional errors from `Dataset::new` back to file lines.
    let ds = Dataset::new(name, num_classes, examples).map_err(|e| match e {
        DataError::DuplicateId { line, id } => DataError::DuplicateId { line: lines[line - 1], id },
        DataError::MalformedRecord { line, reason } => DataError::MalformedRecord { line: lines[line - 1], reason },
        other => other,
    })?;
    if opts.require_all_classes {
        ds.check_class_coverage()?;
    }
    Ok(ds)
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for ex in &dataset.examples {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Deterministic feature-hashed bag of words, L2-normalised.
///
/// Tokens are lowercase alphanumeric runs. Each token adds ±1 to one bucket;
/// bucket and sign both come from the token's FNV-1a hash. Empty text, or
/// text whose contributions cancel, yields the zero vector.
pub fn hash_embed(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut v = vec![0.0; dim];
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = rng::fnv1a(token.to_lowercase().as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub seed: f64,
    pub unlabeled: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { seed: 0.05, unlabeled: 0.67, dev: 0.09, test: 0.19 }
    }
}

/// Disjoint partitions of a dataset. `seed ⊆ labeled`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub seed: BTreeSet<String>,
    pub labeled: BTreeSet<String>,
    pub unlabeled: BTreeSet<String>,
    pub dev: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Shuffles the dataset with a stream derived from `rng_seed` and cuts it
/// into `floor(fraction * N)`-sized partitions; the flooring remainder goes
/// to the unlabeled pool.
pub fn split(dataset: &Dataset, fractions: SplitFractions, rng_seed: u64) -> Result<PoolState> {
    let f = [fractions.seed, fractions.unlabeled, fractions.dev, fractions.test];
    if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(fractions));
    }
    let n = dataset.len();
    let size = |frac: f64| (frac * n as f64).floor() as usize;
    let (n_seed, n_dev, n_test) = (size(fractions.seed), size(fractions.dev), size(fractions.test));
    let n_unlabeled = n - n_seed - n_dev - n_test;
    for (name, count) in [("seed", n_seed), ("unlabeled", n_unlabeled), ("dev", n_dev), ("test", n_test)] {
        if count == 0 {
            return Err(DataError::EmptyPartition(name));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream_rng(rng_seed, Stream::Split, &[]));
    let take = |range: std::ops::Range<usize>| -> BTreeSet<String> {
        order[range].iter().map(|&i| dataset.examples[i].id.clone()).collect()
    };
    let seed = take(0..n_seed);
    let dev = take(n_seed..n_seed + n_dev);
    let test = take(n_seed + n_dev..n_seed + n_dev + n_test);
    let unlabeled = take(n_seed + n_dev + n_test..n);
    Ok(PoolState { labeled: seed.clone(), seed, unlabeled, dev, test })
}

impl PoolState {
    /// Moves queried ids from the unlabeled pool to the labeled pool.
    /// Either all ids move or none do.
    pub fn label(&mut self, ids: &[String]) -> Result<()> {
        let mut unique = BTreeSet::new();
        for id in ids {
            if !self.unlabeled.contains(id) || !unique.insert(id) {
                return Err(DataError::NotUnlabeled(id.clone()));
            }
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.labeled.insert(id.clone());
        }
        Ok(())
    }

    /// `|labeled| + |unlabeled|`, constant across query rounds.
    pub fn active_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Checks disjointness, `seed ⊆ labeled`, coverage of `dataset` and the
    /// conserved active size. Returns a description of the first violation.
    pub fn check(&self, dataset: &Dataset, active_size: usize) -> std::result::Result<(), String> {
        if !self.seed.is_subset(&self.labeled) {
            return Err("seed is not a subset of labeled".into());
        }
        let parts = [&self.labeled, &self.unlabeled, &self.dev, &self.test];
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let union: BTreeSet<&String> = parts.iter().flat_map(|p| p.iter()).collect();
        if union.len() != total {
            return Err("partitions overlap".into());
        }
        if total != dataset.len() || union.iter().any(|id| !dataset.contains(id)) {
            return Err("partitions do not cover the dataset".into());
        }
        if self.active_size() != active_size {
            return Err(format!("labeled + unlabeled = {}, expected {active_size}", self.active_size()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example {
                id: format!("ex{i:05}"),
                embedding: vec![i as f64, 1.0],
                label: Some(i % 3),
                text: None,
            })
            .collect();
        Dataset::new("toy", 3, examples).unwrap()
    }

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_valid_records() {
        let f = write(&[
            r#"{"id":"a","embedding":[1,0,0,0],"label":0}"#,
            r#"{"id":"b","embedding":[0,1,0,0],"label":1,"text":"hi"}"#,
            r#"{"id":"c","embedding":[0,0,1,0],"label":null}"#,
        ]);
        let opts = LoadOptions { num_classes: Some(2), ..Default::default() };
        let ds = load_dataset(f.path(), &opts).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim, 4);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.get("b").unwrap().text.as_deref(), Some("hi"));
        assert_eq!(ds.get("c").unwrap().label, None);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let f = write(&[
            r#"{"id":"a","embedding":[1,0,0,0],"label":0}"#,
            r#"{"id":"b","embedding":[0,1,0],"label":1}"#,
        ]);
        let err = load_dataset(f.path(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::DimensionMismatch { line: 2, expected: 4, got: 3 }));
    }

    #[test]
    fn rejects_unknown_class() {
        let f = write(&[r#"{"id":"a","embedding":[1,0],"label":5}"#]);
        let opts = LoadOptions { num_classes: Some(3), ..Default::default() };
        let err = load_dataset(f.path(), &opts).unwrap_err();
        assert!(matches!(err, DataError::UnknownClassIndex { line: 1, label: 5, num_classes: 3 }));
    }

    #[test]
    fn rejects_garbage_and_duplicates() {
        let f = write(&[r#"{"id":"a","embedding":[1,0]}"#, "not json"]);
        let opts = LoadOptions { num_classes: Some(2), ..Default::default() };
        assert!(matches!(load_dataset(f.path(), &opts), Err(DataError::MalformedRecord { line: 2, .. })));
        let f = write(&[r#"{"id":"a","embedding":[1,0]}"#, r#"{"id":"a","embedding":[0,1]}"#]);
        assert!(matches!(load_dataset(f.path(), &opts), Err(DataError::DuplicateId { line: 2, .. })));
    }

    #[test]
    fn hash_embeds_missing_vectors() {
        let f = write(&[r#"{"id":"a","text":"the cat","label":0}"#, r#"{"id":"b","text":"","label":1}"#]);
        let opts = LoadOptions { hash_embed_dim: Some(8), ..Default::default() };
        let ds = load_dataset(f.path(), &opts).unwrap();
        assert_eq!(ds.dim, 8);
        assert_eq!(ds.get("a").unwrap().embedding, hash_embed("the cat", 8));
        assert_eq!(ds.zero_embedding_ids(), vec!["b"]);
    }

    #[test]
    fn class_coverage() {
        let ds = toy(6);
        assert!(ds.check_class_coverage().is_ok());
        let ds = Dataset::new("x", 3, toy(2).examples().to_vec()).unwrap();
        assert!(matches!(ds.check_class_coverage(), Err(DataError::MissingClass(2))));
    }

    #[test]
    fn hash_embed_edge_cases() {
        assert_eq!(hash_embed("", 5), vec![0.0; 5]);
        assert_eq!(hash_embed("a b c", 16), hash_embed("a b c", 16));
        let v = hash_embed("some words here", 32);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_embed_is_order_invariant() {
        // Direct construction: the embedding of a bag is the normalised sum of
        // single-token buckets, so both orders equal that sum.
        let dim = 16;
        let mut expected = vec![0.0; dim];
        for tok in ["cat", "dog"] {
            let h = rng::fnv1a(tok.as_bytes());
            expected[(h % dim as u64) as usize] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let n = expected.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        expected.iter_mut().for_each(|x| *x /= n);
        assert_eq!(hash_embed("cat dog", dim), expected);
        assert_eq!(hash_embed("dog cat", dim), expected);
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let ds = toy(11850);
        let pools = split(&ds, SplitFractions::default(), 1).unwrap();
        let n = ds.len() as f64;
        for (part, frac) in [(&pools.seed, 0.05), (&pools.unlabeled, 0.67), (&pools.dev, 0.09), (&pools.test, 0.19)] {
            let pct = 100.0 * part.len() as f64 / n;
            assert!((pct - 100.0 * frac).abs() <= 1.0, "{pct} vs {frac}");
        }
        assert_eq!(pools.seed.len(), 592);
        assert_eq!(pools.dev.len(), 1066);
        assert_eq!(pools.test.len(), 2251);
        assert_eq!(pools.unlabeled.len(), 11850 - 592 - 1066 - 2251);
        assert_eq!(pools.labeled, pools.seed);
        pools.check(&ds, pools.active_size()).unwrap();
    }

    #[test]
    fn split_rejects_empty_partitions() {
        let ds = toy(100);
        let f = SplitFractions { seed: 1.0, unlabeled: 0.0, dev: 0.0, test: 0.0 };
        assert!(matches!(split(&ds, f, 0), Err(DataError::EmptyPartition(_))));
        let bad = SplitFractions { seed: 0.5, unlabeled: 0.5, dev: 0.1, test: 0.0 };
        assert!(matches!(split(&ds, bad, 0), Err(DataError::InvalidFractions(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy(500);
        let a = split(&ds, SplitFractions::default(), 42).unwrap();
        let b = split(&ds, SplitFractions::default(), 42).unwrap();
        let c = split(&ds, SplitFractions::default(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn labeling_moves_atomically() {
        let ds = toy(100);
        let mut pools = split(&ds, SplitFractions::default(), 3).unwrap();
        let active = pools.active_size();
        let first: Vec<String> = pools.unlabeled.iter().take(2).cloned().collect();
        pools.label(&first).unwrap();
        pools.check(&ds, active).unwrap();
        let before = pools.clone();
        let bad = vec![pools.unlabeled.iter().next().unwrap().clone(), first[0].clone()];
        assert!(pools.label(&bad).is_err());
        assert_eq!(pools, before);
    }
}
