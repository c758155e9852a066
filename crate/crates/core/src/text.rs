//! Query embeddings for class-name vocabularies.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A prompt pattern with exactly one `{class}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub const PLACEHOLDER: &'static str = "{class}";

    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let n = pattern.matches(Self::PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::Config(format!("prompt template `{pattern}` has {n} placeholders, need exactly 1")));
        }
        Ok(PromptTemplate { pattern })
    }

    pub fn apply(&self, class: &str) -> String {
        self.pattern.replace(Self::PLACEHOLDER, class)
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate { pattern: "A photo of a {class}".into() }
    }
}

/// Source of one embedding vector per class.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// `class` is the raw name, `prompt` the templated string; providers use
    /// whichever they key on.
    fn embed(&self, class: &str, prompt: &str) -> Result<Vec<f32>>;
}

/// Deterministic stand-in for a text encoder: a unit Gaussian direction
/// seeded by SHA-256 of the prompt.
#[derive(Clone, Debug)]
pub struct HashProvider {
    pub dim: usize,
    pub seed: u64,
}

impl HashProvider {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Config(format!("hash embedding dim {dim} must be at least 8")));
        }
        Ok(HashProvider { dim, seed })
    }
}

pub fn hash_embedding(prompt: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((dim as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

impl EmbeddingProvider for HashProvider {
    fn id(&self) -> String {
        format!("hash:d{}:s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _class: &str, prompt: &str) -> Result<Vec<f32>> {
        Ok(hash_embedding(prompt, self.dim, self.seed))
    }
}

/// On-disk embedding table: `{"dim": D, "vectors": {"class": [D floats]}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f32>>,
}

/// Looks vectors up by exact class name; the template is not used.
#[derive(Clone, Debug)]
pub struct FileProvider {
    source: String,
    table: EmbeddingFile,
}

impl FileProvider {
    pub fn from_table(source: impl Into<String>, table: EmbeddingFile) -> Result<Self> {
        for (name, v) in &table.vectors {
            if v.len() != table.dim {
                return Err(Error::shape("embedding file", format!("`{name}` has {} values, dim is {}", v.len(), table.dim)));
            }
            if v.iter().any(|x| !x.is_finite()) || v.iter().all(|&x| x == 0.0) {
                return Err(Error::Config(format!("embedding for `{name}` must be finite and nonzero")));
            }
        }
        Ok(FileProvider { source: source.into(), table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_table(path.display().to_string(), serde_json::from_str(&text)?)
    }
}

impl EmbeddingProvider for FileProvider {
    fn id(&self) -> String {
        format!("file:{}", self.source)
    }

    fn dim(&self) -> usize {
        self.table.dim
    }

    fn embed(&self, class: &str, _prompt: &str) -> Result<Vec<f32>> {
        self.table.vectors.get(class).cloned().ok_or_else(|| Error::MissingEmbedding(class.to_string()))
    }
}

/// Ordered class names with one embedding row each.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub names: Vec<String>,
    /// `[N, D]`, rows in `names` order.
    pub embeddings: Tensor<f32>,
    pub provider_id: String,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Reorders rows so that row `i` becomes old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> QuerySet {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.embeddings.numel());
        for &p in perm {
            data.extend_from_slice(&self.embeddings.data()[p * d..(p + 1) * d]);
        }
        QuerySet {
            names: perm.iter().map(|&p| self.names[p].clone()).collect(),
            embeddings: Tensor::new(vec![perm.len(), d], data).expect("same size"),
            provider_id: self.provider_id.clone(),
        }
    }
}

pub fn embed_queries(names: &[String], provider: &dyn EmbeddingProvider, template: &PromptTemplate) -> Result<QuerySet> {
    if names.is_empty() {
        return Err(Error::Usage("query set needs at least one class".into()));
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::DuplicateName(n.clone()));
        }
    }
    let d = provider.dim();
    let mut data = Vec::with_capacity(names.len() * d);
    for n in names {
        let v = provider.embed(n, &template.apply(n))?;
        if v.len() != d {
            return Err(Error::shape("embed_queries", format!("`{n}` embedding has {} values, expected {d}", v.len())));
        }
        data.extend(v);
    }
    Ok(QuerySet {
        names: names.to_vec(),
        embeddings: Tensor::new(vec![names.len(), d], data)?,
        provider_id: provider.id(),
    })
}
