//! Local stand-ins for a concept knowledge graph, region descriptions and
//! pretrained encoders.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::serialize::{read_entries, write_entries, NamedTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        }
    }

    pub fn touches(&self, concept: &str) -> bool {
        self.head == concept || self.tail == concept
    }

    /// The endpoint that is not `concept`, if `concept` is an endpoint.
    pub fn other(&self, concept: &str) -> Option<&str> {
        if self.head == concept {
            Some(&self.tail)
        } else if self.tail == concept {
            Some(&self.head)
        } else {
            None
        }
    }
}

/// Deduplicated (head, relation, tail) triples indexed by both endpoints.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
    lines: Vec<usize>,
    seen: HashSet<Triple>,
    by_head: HashMap<String, Vec<usize>>,
    by_tail: HashMap<String, Vec<usize>>,
}

impl PartialEq for TripleStore {
    fn eq(&self, other: &Self) -> bool {
        self.triples == other.triples
    }
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut s = Self::new();
        for t in triples {
            s.insert(t);
        }
        s
    }

    /// Inserts a triple; returns false if it was already present.
    pub fn insert(&mut self, t: Triple) -> bool {
        let line = self.triples.len() + 1;
        self.insert_at(t, line)
    }

    fn insert_at(&mut self, t: Triple, line: usize) -> bool {
        if !self.seen.insert(t.clone()) {
            return false;
        }
        let idx = self.triples.len();
        self.by_head.entry(t.head.clone()).or_default().push(idx);
        self.by_tail.entry(t.tail.clone()).or_default().push(idx);
        self.triples.push(t);
        self.lines.push(line);
        true
    }

    /// Parses `head\trelation\ttail` lines. Blank lines are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut s = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            if fields.len() != 3 {
                return Err(err(format!(
                    "expected 3 tab-separated columns, found {}",
                    fields.len()
                )));
            }
            if fields.iter().any(|f| f.trim().is_empty()) {
                return Err(err("empty column".to_string()));
            }
            s.insert_at(
                Triple::new(fields[0].trim(), fields[1].trim(), fields[2].trim()),
                line_no,
            );
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Source line of the `i`-th stored triple.
    pub fn line_of(&self, i: usize) -> usize {
        self.lines[i]
    }

    pub fn contains_concept(&self, concept: &str) -> bool {
        self.by_head.contains_key(concept) || self.by_tail.contains_key(concept)
    }

    fn hits(&self, concept: &str) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .by_head
            .get(concept)
            .into_iter()
            .chain(self.by_tail.get(concept))
            .flatten()
            .copied()
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Every triple with `concept` at either end, in insertion order.
    pub fn one_hop(&self, concept: &str) -> Vec<&Triple> {
        self.hits(concept)
            .into_iter()
            .map(|i| &self.triples[i])
            .collect()
    }

    /// Triples joining `a` and `b` in either direction, in insertion order.
    pub fn between(&self, a: &str, b: &str) -> Vec<&Triple> {
        self.hits(a)
            .into_iter()
            .map(|i| &self.triples[i])
            .filter(|t| t.other(a) == Some(b))
            .collect()
    }

    /// All concepts, sorted.
    pub fn concepts(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .by_head
            .keys()
            .chain(self.by_tail.keys())
            .map(|s| s.as_str())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// All relation names, sorted.
    pub fn relations(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.triples.iter().map(|t| t.relation.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// A region description with a reference into the feature store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub description: String,
    pub feature_ref: String,
    /// Restricts the region to one image; unscoped regions match every image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionStore {
    pub regions: Vec<Region>,
}

impl RegionStore {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Regions visible from `image_id`.
    pub fn for_image<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a Region> + 'a {
        self.regions
            .iter()
            .filter(move |r| r.image_id.as_deref().is_none_or(|id| id == image_id))
    }

    /// Checks that every region's feature resolves.
    pub fn check_features(&self, provider: &dyn FeatureProvider) -> Result<()> {
        for r in &self.regions {
            provider.node_feature(&r.feature_ref)?;
        }
        Ok(())
    }
}

/// Source of node features, text embeddings, and text similarity.
pub trait FeatureProvider {
    fn text_embed(&self, text: &str) -> Result<Vec<f64>>;
    fn node_feature(&self, key: &str) -> Result<Vec<f64>>;
    fn similarity(&self, a: &str, b: &str) -> Result<f64>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Hash-seeded unit vectors: the same string always maps to the same
/// vector, and different seeds give unrelated embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl DeterministicEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!(
                "embedding dim must be at least 2, got {dim}"
            )));
        }
        Ok(Self { seed, dim })
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

impl FeatureProvider for DeterministicEmbedder {
    fn text_embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed(text))
    }

    fn node_feature(&self, key: &str) -> Result<Vec<f64>> {
        Ok(self.embed(key))
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        if a == b {
            return Ok(1.0);
        }
        Ok(cosine(&self.embed(a), &self.embed(b)))
    }
}

/// Precomputed feature vectors keyed by string, stored in the binary
/// tensor format. Text embeddings are looked up under `text:<string>`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileFeatures {
    vectors: IndexMap<String, Vec<f64>>,
    path: Option<PathBuf>,
}

pub const TEXT_PREFIX: &str = "text:";
pub const MEAN_PREFIX: &str = "mean:";

impl FileFeatures {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &str, vector: Vec<f64>) {
        self.vectors.insert(key.to_string(), vector);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(|k| k.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(|v| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries: Vec<NamedTensor> = self
            .vectors
            .iter()
            .map(|(k, v)| NamedTensor {
                name: k.clone(),
                shape: vec![v.len()],
                data: v.clone(),
            })
            .collect();
        let mut buf = Vec::new();
        write_entries(&mut buf, &entries).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut f = Self::new();
        for e in read_entries(bytes)? {
            if e.shape.len() != 1 {
                return Err(Error::Format(format!(
                    "feature {:?} has rank {}, expected 1",
                    e.name,
                    e.shape.len()
                )));
            }
            f.vectors.insert(e.name, e.data);
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut f = Self::from_bytes(&bytes)?;
        f.path = Some(path.to_path_buf());
        Ok(f)
    }

    /// Looks up `key` and checks it has `width` entries.
    pub fn feature_with_width(&self, key: &str, width: usize) -> Result<Vec<f64>> {
        let v = self.node_feature(key)?;
        if v.len() != width {
            return Err(Error::FeatureWidth {
                key: key.to_string(),
                expected: width,
                got: v.len(),
            });
        }
        Ok(v)
    }
}

impl FeatureProvider for FileFeatures {
    fn text_embed(&self, text: &str) -> Result<Vec<f64>> {
        self.node_feature(&format!("{TEXT_PREFIX}{text}"))
    }

    fn node_feature(&self, key: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingFeature(key.to_string()))
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        if a == b {
            return Ok(1.0);
        }
        Ok(cosine(&self.text_embed(a)?, &self.text_embed(b)?))
    }
}

/// Node features from one provider, text embeddings and similarity from
/// another.
pub struct SplitProvider<'a> {
    pub nodes: &'a dyn FeatureProvider,
    pub text: &'a dyn FeatureProvider,
}

impl FeatureProvider for SplitProvider<'_> {
    fn text_embed(&self, text: &str) -> Result<Vec<f64>> {
        self.text.text_embed(text)
    }

    fn node_feature(&self, key: &str) -> Result<Vec<f64>> {
        self.nodes.node_feature(key)
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        self.text.similarity(a, b)
    }
}

/// Resolves a graph node's `feature_ref`:
/// `text:<s>` embeds `s`, `mean:<k1>|<k2>|...` averages stored features,
/// and any other string is a direct key.
pub fn resolve_feature_ref(provider: &dyn FeatureProvider, feature_ref: &str) -> Result<Vec<f64>> {
    if let Some(text) = feature_ref.strip_prefix(TEXT_PREFIX) {
        return provider.text_embed(text);
    }
    if let Some(keys) = feature_ref.strip_prefix(MEAN_PREFIX) {
        let keys: Vec<&str> = keys.split('|').collect();
        let mut acc: Option<Vec<f64>> = None;
        for k in &keys {
            let v = provider.node_feature(k)?;
            match &mut acc {
                None => acc = Some(v),
                Some(a) => {
                    if a.len() != v.len() {
                        return Err(Error::FeatureWidth {
                            key: k.to_string(),
                            expected: a.len(),
                            got: v.len(),
                        });
                    }
                    for (x, y) in a.iter_mut().zip(&v) {
                        *x += y;
                    }
                }
            }
        }
        let mut mean = acc.ok_or_else(|| Error::MissingFeature(feature_ref.to_string()))?;
        let n = keys.len() as f64;
        for x in &mut mean {
            *x /= n;
        }
        return Ok(mean);
    }
    provider.node_feature(feature_ref)
}
