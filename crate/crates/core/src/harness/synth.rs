//! Synthetic datasets whose gold labels are recoverable from features by
//! construction, written in the same on-disk formats as real data.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::builder::{QaExample, SceneTriple, CONCEPT_PREFIX};
use crate::error::{Error, Result};
use crate::graph::{MultimodalSemanticGraph, NodeType};
use crate::harness::io::save_examples;
use crate::knowledge::{
    DeterministicEmbedder, FileFeatures, Region, RegionStore, Triple, TripleStore,
};

/// Where the label signal lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// Gold candidate's retrieved regions point along `+u`, the others along `-u`.
    SceneOnly,
    /// Gold candidate's answer concept points along `+u`, the others along `-u`.
    ConceptOnly,
    /// The scene shows pattern `s`; candidate answer concepts show a
    /// permutation of all patterns; gold is the candidate showing `s`.
    CrossModal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_examples: usize,
    /// Extra held-out examples written to a separate file.
    pub n_test: usize,
    pub n_candidates: usize,
    pub scene_entities: usize,
    /// Question concepts shared by every candidate graph.
    pub context_concepts: usize,
    /// Store neighbors per concept; their relevance is random, so most are pruned.
    pub neighbors: usize,
    pub regions_per_candidate: usize,
    pub mode: SignalMode,
    pub noise: f64,
    pub signal: f64,
    /// Width of every feature vector and of the text embedder.
    pub width: usize,
    pub rationales: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_examples: 200,
            n_test: 0,
            n_candidates: 4,
            scene_entities: 6,
            context_concepts: 2,
            neighbors: 2,
            regions_per_candidate: 10,
            mode: SignalMode::SceneOnly,
            noise: 0.1,
            signal: 1.0,
            width: 16,
            rationales: false,
        }
    }
}

impl SyntheticSpec {
    pub fn check(&self) -> Result<()> {
        if self.n_candidates < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 candidates"));
        }
        if self.width < 2 {
            return Err(Error::invalid("feature width must be at least 2"));
        }
        if self.mode == SignalMode::CrossModal && self.n_candidates > self.width {
            return Err(Error::invalid(format!(
                "cross-modal mode needs width >= candidates ({} < {})",
                self.width, self.n_candidates
            )));
        }
        if self.scene_entities < 2 || self.regions_per_candidate == 0 {
            return Err(Error::invalid(
                "need at least 2 scene entities and 1 region per candidate",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.signal.is_finite()) {
            return Err(Error::invalid(
                "noise and signal must be finite, noise non-negative",
            ));
        }
        Ok(())
    }

    /// Text embedder matching the generated stores.
    pub fn embedder(&self) -> DeterministicEmbedder {
        DeterministicEmbedder {
            seed: self.seed ^ 0x7e57,
            dim: self.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub triples: TripleStore,
    pub regions: RegionStore,
    pub features: FileFeatures,
    pub train: Vec<QaExample>,
    pub test: Vec<QaExample>,
    /// Direction `u` of the sign modes, unit length.
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPaths {
    pub triples: PathBuf,
    pub regions: PathBuf,
    pub features: PathBuf,
    pub examples: PathBuf,
    pub test_examples: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            triples: dir.join("triples.tsv"),
            regions: dir.join("regions.json"),
            features: dir.join("features.bin"),
            examples: dir.join("examples.jsonl"),
            test_examples: dir.join("test.jsonl"),
        }
    }
}

impl SyntheticData {
    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SyntheticPaths::in_dir(dir);
        self.triples.save(&paths.triples)?;
        self.regions.save(&paths.regions)?;
        self.features.save(&paths.features)?;
        save_examples(&paths.examples, &self.train)?;
        save_examples(&paths.test_examples, &self.test)?;
        Ok(paths)
    }
}

struct Gen<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
    patterns: Vec<Vec<f64>>,
    direction: Vec<f64>,
    triples: TripleStore,
    regions: Vec<Region>,
    features: FileFeatures,
}

const PREDICATES: [&str; 3] = ["near", "on", "holds"];
const RELATED: &str = "related_to";

fn orthonormal(rng: &mut ChaCha8Rng, count: usize, width: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..width)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect();
        for b in &out {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    out
}

impl Gen<'_> {
    fn gaussian(&mut self, std: f64) -> Vec<f64> {
        (0..self.spec.width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                std * z
            })
            .collect()
    }

    /// `scale · base + noise`.
    fn feature(&mut self, base: &[f64], scale: f64) -> Vec<f64> {
        let noise = self.gaussian(self.spec.noise);
        base.iter().zip(noise).map(|(b, n)| scale * b + n).collect()
    }

    /// Random content of norm `signal` plus noise.
    fn clutter(&mut self) -> Vec<f64> {
        let mut v = self.gaussian(1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= n);
        self.feature(&v, self.spec.signal)
    }

    fn concept(&mut self, name: &str, feature: Vec<f64>) {
        self.features
            .insert(&format!("{CONCEPT_PREFIX}{name}"), feature);
        for j in 0..self.spec.neighbors {
            let nb = format!("{name}n{j}");
            let f = self.clutter();
            self.features.insert(&format!("{CONCEPT_PREFIX}{nb}"), f);
            self.triples.insert(Triple::new(name, RELATED, &nb));
        }
    }

    /// Candidate texts, the gold index, and the pattern shown by the scene.
    fn candidates(&mut self, ex: &str, tag: &str, scene_pattern: usize) -> (Vec<String>, usize) {
        let k = self.spec.n_candidates;
        let names: Vec<String> = (0..k).map(|c| format!("{tag}{ex}y{c}")).collect();
        let (gold, shown): (usize, Vec<usize>) = match self.spec.mode {
            SignalMode::CrossModal => {
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(&mut self.rng);
                let gold = perm
                    .iter()
                    .position(|&p| p == scene_pattern)
                    .expect("permutation covers all patterns");
                (gold, perm)
            }
            _ => (self.rng.random_range(0..k), Vec::new()),
        };
        let u = self.direction.clone();
        for (c, name) in names.iter().enumerate() {
            let f = match self.spec.mode {
                SignalMode::CrossModal => {
                    let p = self.patterns[shown[c]].clone();
                    self.feature(&p, self.spec.signal)
                }
                SignalMode::ConceptOnly => {
                    let sign = if c == gold { 1.0 } else { -1.0 };
                    self.feature(&u, sign * self.spec.signal)
                }
                SignalMode::SceneOnly => self.clutter(),
            };
            self.concept(name, f);
        }
        (names, gold)
    }

    fn example(&mut self, index: usize) -> QaExample {
        let spec = self.spec;
        let ex = index.to_string();
        let image_id = format!("img{ex}");
        let s = self.rng.random_range(0..spec.n_candidates);

        let entity_refs: Vec<String> = (0..spec.scene_entities)
            .map(|i| format!("s:{ex}:{i}"))
            .collect();
        for r in &entity_refs {
            let f = match spec.mode {
                SignalMode::CrossModal => {
                    let p = self.patterns[s].clone();
                    self.feature(&p, spec.signal)
                }
                _ => self.clutter(),
            };
            self.features.insert(r, f);
        }
        let mut scene = Vec::new();
        let mut add_triple = |g: &mut Self, a: usize, b: usize| {
            let predicate = PREDICATES[g.rng.random_range(0..PREDICATES.len())];
            scene.push(SceneTriple {
                subject: format!("obj{a}"),
                predicate: predicate.to_string(),
                object: format!("obj{b}"),
                subject_ref: entity_refs[a].clone(),
                object_ref: entity_refs[b].clone(),
                confidence: Some((g.rng.random_range(500..1000) as f64) / 1000.0),
            });
        };
        for i in 0..spec.scene_entities - 1 {
            add_triple(self, i, i + 1);
        }
        let a = self.rng.random_range(0..spec.scene_entities);
        let b = (a + 1 + self.rng.random_range(0..spec.scene_entities - 1)) % spec.scene_entities;
        add_triple(self, a, b);

        let words: Vec<String> = (0..spec.context_concepts)
            .map(|j| format!("q{ex}w{j}"))
            .collect();
        for w in &words {
            let f = self.clutter();
            self.concept(w, f);
        }
        for pair in words.windows(2) {
            self.triples
                .insert(Triple::new(&pair[0], RELATED, &pair[1]));
        }
        let question = format!("which candidate fits {}", words.join(" "));

        let (answers, answer_label) = self.candidates(&ex, "x", s);
        let (rationales, rationale_label) = if spec.rationales {
            let (r, l) = self.candidates(&ex, "r", s);
            (Some(r), Some(l))
        } else {
            (None, None)
        };

        match spec.mode {
            SignalMode::SceneOnly => {
                let u = self.direction.clone();
                let sets: Vec<(&Vec<String>, usize)> = std::iter::once((&answers, answer_label))
                    .chain(rationales.as_ref().zip(rationale_label))
                    .collect();
                for (texts, gold) in sets {
                    for (c, text) in texts.iter().enumerate() {
                        let sign = if c == gold { 1.0 } else { -1.0 };
                        for j in 0..spec.regions_per_candidate {
                            let key = format!("r:{ex}:{text}:{j}");
                            let f = self.feature(&u, sign * spec.signal);
                            self.features.insert(&key, f);
                            self.regions.push(Region {
                                id: format!("{image_id}/{text}/{j:02}"),
                                description: text.clone(),
                                feature_ref: key,
                                image_id: Some(image_id.clone()),
                            });
                        }
                    }
                }
            }
            _ => {
                for j in 0..spec.regions_per_candidate {
                    let key = format!("r:{ex}:{j}");
                    let f = self.clutter();
                    self.features.insert(&key, f);
                    self.regions.push(Region {
                        id: format!("{image_id}/{j:02}"),
                        description: format!("region {j}"),
                        feature_ref: key,
                        image_id: Some(image_id.clone()),
                    });
                }
            }
        }

        QaExample {
            id: format!("ex{ex}"),
            image_id,
            question,
            answers,
            answer_label,
            rationales,
            rationale_label,
            scene,
            image_labels: None,
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns = orthonormal(&mut rng, spec.n_candidates.min(spec.width), spec.width);
    let direction = orthonormal(&mut rng, 1, spec.width).remove(0);
    let mut g = Gen {
        spec,
        rng,
        patterns,
        direction: direction.clone(),
        triples: TripleStore::new(),
        regions: Vec::new(),
        features: FileFeatures::new(),
    };
    let train: Vec<QaExample> = (0..spec.n_examples).map(|i| g.example(i)).collect();
    let test: Vec<QaExample> = (spec.n_examples..spec.n_examples + spec.n_test)
        .map(|i| g.example(i))
        .collect();
    Ok(SyntheticData {
        spec: spec.clone(),
        triples: g.triples,
        regions: RegionStore { regions: g.regions },
        features: g.features,
        train,
        test,
        direction,
    })
}

/// Bayes accuracy of the cross-modal task from each modality alone and
/// from both, by enumerating every scene pattern and candidate permutation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesReport {
    pub scene_only: f64,
    pub concept_only: f64,
    pub joint: f64,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, k - 1);
            out.push(q);
        }
    }
    out
}

pub fn cross_modal_bayes(k: usize) -> BayesReport {
    use std::collections::HashMap;
    let perms = permutations(k);
    // observation -> counts of gold index
    let mut scene: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut concept: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
    let mut joint: HashMap<(usize, Vec<usize>), Vec<usize>> = HashMap::new();
    let mut total = 0usize;
    for s in 0..k {
        for p in &perms {
            let gold = p.iter().position(|&c| c == s).expect("permutation");
            scene.entry(s).or_insert_with(|| vec![0; k])[gold] += 1;
            concept.entry(p.clone()).or_insert_with(|| vec![0; k])[gold] += 1;
            joint.entry((s, p.clone())).or_insert_with(|| vec![0; k])[gold] += 1;
            total += 1;
        }
    }
    fn best<K>(m: &HashMap<K, Vec<usize>>, total: usize) -> f64 {
        m.values()
            .map(|c| *c.iter().max().unwrap_or(&0))
            .sum::<usize>() as f64
            / total as f64
    }
    BayesReport {
        scene_only: best(&scene, total),
        concept_only: best(&concept, total),
        joint: best(&joint, total),
    }
}

/// Scene-side raw features of one candidate graph: mean scene-entity
/// feature followed by the QA-concept feature (zeros when absent).
pub fn scene_side_features(g: &MultimodalSemanticGraph) -> Vec<f64> {
    let ents = g.scene_entities();
    let width = g
        .nodes
        .iter()
        .find(|n| n.node_type.side() == crate::graph::Side::Scene)
        .map_or(0, |n| n.feature.len());
    let mut mean = vec![0.0; width];
    for &i in &ents {
        mean.iter_mut()
            .zip(&g.nodes[i].feature)
            .for_each(|(m, v)| *m += v / ents.len() as f64);
    }
    let p = match g.qa_concept_node() {
        Some(p) => g.nodes[p].feature.clone(),
        None => vec![0.0; width],
    };
    mean.extend(p);
    mean
}

/// Candidate-softmax linear probe fitted by gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub w: Vec<f64>,
}

impl LinearProbe {
    /// `data[i]` holds one feature vector per candidate and the gold index.
    pub fn fit(data: &[(Vec<Vec<f64>>, usize)], steps: usize, lr: f64) -> Self {
        let d = data
            .first()
            .and_then(|(c, _)| c.first())
            .map_or(0, |f| f.len());
        let mut w = vec![0.0; d];
        for _ in 0..steps {
            let mut grad = vec![0.0; d];
            for (cands, gold) in data {
                let scores: Vec<f64> = cands.iter().map(|f| dot(&w, f)).collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (c, f) in cands.iter().enumerate() {
                    let p = (scores[c] - m).exp() / z - if c == *gold { 1.0 } else { 0.0 };
                    grad.iter_mut().zip(f).for_each(|(g, x)| *g += p * x);
                }
            }
            let n = data.len().max(1) as f64;
            w.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g / n);
        }
        Self { w }
    }

    /// Fraction of examples whose highest-scoring candidate is gold; ties go to the first.
    pub fn accuracy(&self, data: &[(Vec<Vec<f64>>, usize)]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .iter()
            .filter(|(cands, gold)| {
                let mut best = 0;
                for (c, f) in cands.iter().enumerate() {
                    if dot(&self.w, f) > dot(&self.w, &cands[best]) {
                        best = c;
                    }
                }
                best == *gold
            })
            .count();
        hits as f64 / data.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scene-side probe data from built candidate graphs.
pub fn probe_data(
    examples: &[(Vec<MultimodalSemanticGraph>, usize)],
) -> Vec<(Vec<Vec<f64>>, usize)> {
    examples
        .iter()
        .map(|(gs, gold)| (gs.iter().map(scene_side_features).collect(), *gold))
        .collect()
}

/// Counts concept nodes of the given names, for self-checks on built graphs.
pub fn count_concepts(g: &MultimodalSemanticGraph, prefix: &str) -> usize {
    g.nodes
        .iter()
        .filter(|n| n.node_type == NodeType::C && n.label.starts_with(prefix))
        .count()
}
