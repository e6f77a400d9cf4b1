//! Builds one multimodal semantic graph per answer candidate from scene
//! triples, a concept triple store, region descriptions and QA text.

use std::collections::{BTreeMap, HashMap, HashSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    FeatureWidths, GraphLimits, MultimodalSemanticGraph, NodeType, DEFAULT_CONCEPT_CAP,
    DEFAULT_SCENE_CAP, REL_ANSWER, REL_IMAGE, REL_QA_CONCEPT, REL_QUESTION,
};
use crate::knowledge::{
    resolve_feature_ref, FeatureProvider, RegionStore, Triple, TripleStore, MEAN_PREFIX,
    TEXT_PREFIX,
};

pub const CONTEXT_SEPARATOR: &str = " [SEP] ";
pub const CONCEPT_PREFIX: &str = "c:";
pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const DEFAULT_TOP_K: usize = 10;
pub const MAX_NGRAM: usize = 4;

pub fn default_stop_list() -> Vec<String> {
    ["person", "man", "woman", "thing"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub scene_cap: usize,
    pub concept_cap: usize,
    pub threshold: f64,
    pub top_k: usize,
    pub stop_list: Vec<String>,
    /// Also join the context node to the QA-concept node with image edges.
    pub link_context_to_qa_concept: bool,
    pub widths: Option<FeatureWidths>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            scene_cap: DEFAULT_SCENE_CAP,
            concept_cap: DEFAULT_CONCEPT_CAP,
            threshold: DEFAULT_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            stop_list: default_stop_list(),
            link_context_to_qa_concept: true,
            widths: None,
        }
    }
}

impl BuildConfig {
    pub fn limits(&self) -> GraphLimits {
        GraphLimits {
            max_scene: self.scene_cap,
            max_concept: self.concept_cap,
            widths: self.widths,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub subject_ref: String,
    pub object_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub image_id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub answer_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationales: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_label: Option<usize>,
    #[serde(default)]
    pub scene: Vec<SceneTriple>,
    /// Detected object labels; defaults to the scene entity labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_labels: Option<Vec<String>>,
}

impl QaExample {
    pub fn check(&self) -> Result<()> {
        if self.answers.is_empty() || self.answer_label >= self.answers.len() {
            return Err(Error::invalid(format!(
                "example {}: answer label {} out of range for {} candidates",
                self.id,
                self.answer_label,
                self.answers.len()
            )));
        }
        match (&self.rationales, self.rationale_label) {
            (Some(r), Some(l)) if l < r.len() => Ok(()),
            (None, None) => Ok(()),
            _ => Err(Error::invalid(format!(
                "example {}: inconsistent rationale label",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseSource {
    Question,
    Answer,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedPhrase {
    pub surface: String,
    pub concept: String,
    pub source: PhraseSource,
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Surface form of a concept id: underscores become spaces.
pub fn concept_surface(concept: &str) -> String {
    tokenize(&concept.replace('_', " ")).join(" ")
}

/// Maps normalized surface forms to concept ids.
#[derive(Debug, Clone, Default)]
pub struct ConceptVocab {
    by_surface: HashMap<String, String>,
}

impl ConceptVocab {
    pub fn from_store(store: &TripleStore) -> Self {
        let mut by_surface: HashMap<String, String> = HashMap::new();
        // concepts() is sorted, so the smallest id wins on surface collisions
        for c in store.concepts() {
            let s = concept_surface(c);
            if !s.is_empty() {
                by_surface.entry(s).or_insert_with(|| c.to_string());
            }
        }
        Self { by_surface }
    }

    pub fn lookup(&self, surface: &str) -> Option<&str> {
        self.by_surface.get(surface).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_surface.is_empty()
    }
}

/// Greedy left-to-right longest match of token n-grams (n ≤ 4) against
/// the vocabulary. Stop-listed surfaces never match; each concept is
/// reported once.
pub fn ground_phrases(
    text: &str,
    vocab: &ConceptVocab,
    stop_list: &[String],
    source: PhraseSource,
) -> Vec<GroundedPhrase> {
    let stop: HashSet<String> = stop_list.iter().map(|s| concept_surface(s)).collect();
    let tokens = tokenize(text);
    let mut out: Vec<GroundedPhrase> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut advanced = false;
        for n in (1..=MAX_NGRAM.min(tokens.len() - i)).rev() {
            let surface = tokens[i..i + n].join(" ");
            if stop.contains(&surface) {
                continue;
            }
            if let Some(concept) = vocab.lookup(&surface) {
                if !out.iter().any(|g| g.concept == concept) {
                    out.push(GroundedPhrase {
                        surface,
                        concept: concept.to_string(),
                        source,
                    });
                }
                i += n;
                advanced = true;
                break;
            }
        }
        if !advanced {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntity {
    pub label: String,
    pub feature_ref: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneSubgraph {
    pub entities: Vec<SceneEntity>,
    /// (subject index, object index, predicate), one per accepted triple.
    pub edges: Vec<(usize, usize, String)>,
    pub dropped: Vec<SceneTriple>,
    pub warnings: Vec<String>,
}

/// One node per distinct (label, feature_ref) up to `cap`, taking triples
/// in descending confidence (input order on ties, missing confidence last).
pub fn ingest_scene_graph(
    triples: &[SceneTriple],
    provider: &dyn FeatureProvider,
    cap: usize,
) -> Result<SceneSubgraph> {
    if cap == 0 {
        return Err(Error::invalid("scene cap must be at least 1"));
    }
    let mut sub = SceneSubgraph::default();
    if triples.is_empty() {
        sub.warnings.push("empty scene triple list".to_string());
        warn!("empty scene triple list");
        return Ok(sub);
    }
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let conf = |i: usize| triples[i].confidence.unwrap_or(f64::NEG_INFINITY);
    order.sort_by(|&a, &b| conf(b).total_cmp(&conf(a)));

    let mut index: HashMap<(String, String), usize> = HashMap::new();
    let mut seen_edges: HashSet<(usize, usize, String)> = HashSet::new();
    for i in order {
        let t = &triples[i];
        if t.subject.trim().is_empty()
            || t.object.trim().is_empty()
            || t.predicate.trim().is_empty()
        {
            return Err(Error::invalid(format!(
                "scene triple {i} has an empty label"
            )));
        }
        let ks = (t.subject.clone(), t.subject_ref.clone());
        let ko = (t.object.clone(), t.object_ref.clone());
        if ks == ko {
            sub.dropped.push(t.clone());
            continue;
        }
        let new = [&ks, &ko]
            .iter()
            .filter(|k| !index.contains_key(**k))
            .count();
        if index.len() + new > cap {
            sub.dropped.push(t.clone());
            continue;
        }
        let mut id_of = |key: (String, String), sub: &mut SceneSubgraph| -> Result<usize> {
            if let Some(&id) = index.get(&key) {
                return Ok(id);
            }
            let feature = resolve_feature_ref(provider, &key.1)?;
            let id = sub.entities.len();
            sub.entities.push(SceneEntity {
                label: key.0.clone(),
                feature_ref: key.1.clone(),
                feature,
            });
            index.insert(key, id);
            Ok(id)
        };
        let s = id_of(ks, &mut sub)?;
        let o = id_of(ko, &mut sub)?;
        if seen_edges.insert((s, o, t.predicate.clone())) {
            sub.edges.push((s, o, t.predicate.clone()));
        }
    }
    if !sub.dropped.is_empty() {
        warn!("{} scene triples dropped at cap {cap}", sub.dropped.len());
    }
    Ok(sub)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRegion {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaConceptNode {
    pub feature_ref: String,
    pub feature: Vec<f64>,
    pub selected: Vec<ScoredRegion>,
    pub warnings: Vec<String>,
}

/// Averages the features of the `k` regions whose descriptions are most
/// similar to the answer text (score descending, then region id).
pub fn retrieve_qa_concept_node(
    answer: &str,
    regions: &RegionStore,
    image_id: &str,
    provider: &dyn FeatureProvider,
    k: usize,
) -> Result<QaConceptNode> {
    if k == 0 {
        return Err(Error::invalid("top-k must be at least 1"));
    }
    let mut scored = Vec::new();
    for r in regions.for_image(image_id) {
        scored.push((provider.similarity(answer, &r.description)?, r));
    }
    if scored.is_empty() {
        return Err(Error::invalid(format!(
            "no regions available for image {image_id:?}"
        )));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let mut warnings = Vec::new();
    if scored.len() < k {
        let msg = format!(
            "only {} regions available, fewer than top-k {k}",
            scored.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    scored.truncate(k);
    let refs: Vec<&str> = scored.iter().map(|(_, r)| r.feature_ref.as_str()).collect();
    let feature_ref = format!("{MEAN_PREFIX}{}", refs.join("|"));
    let feature = resolve_feature_ref(provider, &feature_ref)?;
    Ok(QaConceptNode {
        feature_ref,
        feature,
        selected: scored
            .iter()
            .map(|(s, r)| ScoredRegion {
                id: r.id.clone(),
                score: *s,
            })
            .collect(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConcept {
    pub concept: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub concept: String,
    /// Relevance to the answer text; `None` for linked image entities.
    pub score: Option<f64>,
    pub sources: Vec<PhraseSource>,
}

impl ConceptNode {
    pub fn grounded(&self) -> bool {
        !self.sources.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConceptSubgraph {
    pub nodes: Vec<ConceptNode>,
    pub edges: Vec<Triple>,
    pub pruned: Vec<ScoredConcept>,
    pub capped: Vec<ScoredConcept>,
}

impl ConceptSubgraph {
    pub fn contains(&self, concept: &str) -> bool {
        self.nodes.iter().any(|n| n.concept == concept)
    }

    fn rebuild_edges(&mut self, store: &TripleStore) {
        let present: HashSet<&str> = self.nodes.iter().map(|n| n.concept.as_str()).collect();
        self.edges = store
            .triples()
            .iter()
            .filter(|t| {
                t.head != t.tail
                    && present.contains(t.head.as_str())
                    && present.contains(t.tail.as_str())
            })
            .cloned()
            .collect();
    }
}

fn by_score_then_id(a: &(f64, &str), b: &(f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Grounded concepts plus their 1-hop neighbors, minus neighbors whose
/// relevance to the answer text is below `threshold`, capped at `cap`.
pub fn retrieve_concept_subgraph(
    grounded: &[GroundedPhrase],
    store: &TripleStore,
    provider: &dyn FeatureProvider,
    answer: &str,
    threshold: f64,
    cap: usize,
) -> Result<ConceptSubgraph> {
    if !threshold.is_finite() {
        return Err(Error::invalid("pruning threshold must be finite"));
    }
    let mut sources: BTreeMap<&str, Vec<PhraseSource>> = BTreeMap::new();
    let mut grounded_order: Vec<&str> = Vec::new();
    for g in grounded {
        let e = sources.entry(g.concept.as_str()).or_default();
        if e.is_empty() {
            grounded_order.push(g.concept.as_str());
        }
        if !e.contains(&g.source) {
            e.push(g.source);
            e.sort();
        }
    }
    let mut neighbors: Vec<&str> = Vec::new();
    let mut seen: HashSet<&str> = grounded_order.iter().copied().collect();
    for &c in &grounded_order {
        for t in store.one_hop(c) {
            if let Some(o) = t.other(c) {
                if seen.insert(o) {
                    neighbors.push(o);
                }
            }
        }
    }
    let relev = |c: &str| provider.similarity(&concept_surface(c), answer);
    let mut g_scored = Vec::new();
    for &c in &grounded_order {
        g_scored.push((relev(c)?, c));
    }
    let mut kept = Vec::new();
    let mut sub = ConceptSubgraph::default();
    for &c in &neighbors {
        let s = relev(c)?;
        if s < threshold {
            sub.pruned.push(ScoredConcept {
                concept: c.to_string(),
                score: s,
            });
        } else {
            kept.push((s, c));
        }
    }
    g_scored.sort_by(by_score_then_id);
    kept.sort_by(by_score_then_id);
    let mut all: Vec<(f64, &str)> = g_scored.into_iter().chain(kept).collect();
    if all.len() > cap {
        for &(s, c) in &all[cap..] {
            sub.capped.push(ScoredConcept {
                concept: c.to_string(),
                score: s,
            });
        }
        all.truncate(cap);
    }
    sub.nodes = all
        .into_iter()
        .map(|(score, c)| ConceptNode {
            concept: c.to_string(),
            score: Some(score),
            sources: sources.get(c).cloned().unwrap_or_default(),
        })
        .collect();
    sub.rebuild_edges(store);
    Ok(sub)
}

/// Adds detected image entities that the store links to an already
/// retrieved concept, then every store edge among the surviving nodes.
pub fn link_local_entities(
    sub: &mut ConceptSubgraph,
    image_labels: &[String],
    store: &TripleStore,
    vocab: &ConceptVocab,
    stop_list: &[String],
    cap: usize,
) {
    let stop: HashSet<String> = stop_list.iter().map(|s| concept_surface(s)).collect();
    let retrieved: Vec<String> = sub.nodes.iter().map(|n| n.concept.clone()).collect();
    for label in image_labels {
        let surface = concept_surface(label);
        if stop.contains(&surface) {
            continue;
        }
        let Some(concept) = vocab.lookup(&surface) else {
            continue;
        };
        if sub.contains(concept) || sub.nodes.len() >= cap {
            continue;
        }
        if retrieved
            .iter()
            .any(|r| !store.between(concept, r).is_empty())
        {
            sub.nodes.push(ConceptNode {
                concept: concept.to_string(),
                score: None,
                sources: vec![PhraseSource::Image],
            });
        }
    }
    sub.rebuild_edges(store);
}

/// Joins scene and concept subgraphs through the QA-context node.
///
/// Node order: Z, then P (if any), scene entities, concept nodes.
pub fn attach_qa_context(
    scene: &SceneSubgraph,
    concept: &ConceptSubgraph,
    qa_concept: Option<&QaConceptNode>,
    question: &str,
    answer: &str,
    provider: &dyn FeatureProvider,
    config: &BuildConfig,
) -> Result<MultimodalSemanticGraph> {
    let mut g = MultimodalSemanticGraph::new();
    let context_text = format!("{question}{CONTEXT_SEPARATOR}{answer}");
    let z_ref = format!("{TEXT_PREFIX}{context_text}");
    let z = g.add_node(
        NodeType::Z,
        "z",
        &z_ref,
        provider.text_embed(&context_text)?,
    );
    let p = qa_concept.map(|q| g.add_node(NodeType::P, "p", &q.feature_ref, q.feature.clone()));
    let scene_ids: Vec<usize> = scene
        .entities
        .iter()
        .map(|e| g.add_node(NodeType::S, &e.label, &e.feature_ref, e.feature.clone()))
        .collect();
    let mut concept_ids: HashMap<&str, usize> = HashMap::new();
    for n in &concept.nodes {
        let r = format!("{CONCEPT_PREFIX}{}", n.concept);
        let feature = resolve_feature_ref(provider, &r)?;
        concept_ids.insert(
            n.concept.as_str(),
            g.add_node(NodeType::C, &n.concept, &r, feature),
        );
    }
    for &(s, o, ref pred) in &scene.edges {
        g.connect(scene_ids[s], scene_ids[o], pred);
    }
    for &s in &scene_ids {
        if let Some(p) = p {
            g.connect(p, s, REL_QA_CONCEPT);
        }
        g.connect(z, s, REL_IMAGE);
    }
    if let (Some(p), true) = (p, config.link_context_to_qa_concept) {
        g.connect(z, p, REL_IMAGE);
    }
    for t in &concept.edges {
        g.connect(
            concept_ids[t.head.as_str()],
            concept_ids[t.tail.as_str()],
            &t.relation,
        );
    }
    for n in &concept.nodes {
        let id = concept_ids[n.concept.as_str()];
        if n.sources.contains(&PhraseSource::Question) {
            g.connect(z, id, REL_QUESTION);
        }
        if n.sources.contains(&PhraseSource::Answer) {
            g.connect(z, id, REL_ANSWER);
        }
    }
    g.validate_with(&config.limits())
        .map_err(Error::Validation)?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub example: String,
    pub candidate: usize,
    pub dropped_triples: Vec<SceneTriple>,
    pub qa_regions: Vec<ScoredRegion>,
    pub grounded: Vec<GroundedPhrase>,
    pub pruned: Vec<ScoredConcept>,
    pub capped: Vec<ScoredConcept>,
    pub warnings: Vec<String>,
}

/// Everything the builder reads.
pub struct Stores<'a> {
    pub triples: &'a TripleStore,
    pub vocab: &'a ConceptVocab,
    pub regions: &'a RegionStore,
    pub provider: &'a dyn FeatureProvider,
}

#[derive(Debug, Clone)]
pub struct ExampleGraphs {
    pub answers: Vec<MultimodalSemanticGraph>,
    pub rationales: Option<Vec<MultimodalSemanticGraph>>,
    pub reports: Vec<BuildReport>,
}

fn build_candidates(
    example: &QaExample,
    scene: &SceneSubgraph,
    context: &str,
    candidates: &[String],
    stores: &Stores<'_>,
    config: &BuildConfig,
    reports: &mut Vec<BuildReport>,
) -> Result<Vec<MultimodalSemanticGraph>> {
    let image_labels: Vec<String> = match &example.image_labels {
        Some(l) => l.clone(),
        None => {
            let mut seen = HashSet::new();
            scene
                .entities
                .iter()
                .filter(|e| seen.insert(e.label.clone()))
                .map(|e| e.label.clone())
                .collect()
        }
    };
    let q_phrases = ground_phrases(
        context,
        stores.vocab,
        &config.stop_list,
        PhraseSource::Question,
    );
    let mut graphs = Vec::with_capacity(candidates.len());
    for (ci, cand) in candidates.iter().enumerate() {
        let mut grounded = q_phrases.clone();
        grounded.extend(ground_phrases(
            cand,
            stores.vocab,
            &config.stop_list,
            PhraseSource::Answer,
        ));
        let mut warnings = scene.warnings.clone();
        let qa = if stores.regions.is_empty() {
            None
        } else {
            let q = retrieve_qa_concept_node(
                cand,
                stores.regions,
                &example.image_id,
                stores.provider,
                config.top_k,
            )?;
            warnings.extend(q.warnings.iter().cloned());
            Some(q)
        };
        let mut sub = retrieve_concept_subgraph(
            &grounded,
            stores.triples,
            stores.provider,
            cand,
            config.threshold,
            config.concept_cap,
        )?;
        link_local_entities(
            &mut sub,
            &image_labels,
            stores.triples,
            stores.vocab,
            &config.stop_list,
            config.concept_cap,
        );
        let g = attach_qa_context(
            scene,
            &sub,
            qa.as_ref(),
            context,
            cand,
            stores.provider,
            config,
        )?;
        reports.push(BuildReport {
            example: example.id.clone(),
            candidate: ci,
            dropped_triples: scene.dropped.clone(),
            qa_regions: qa.map(|q| q.selected).unwrap_or_default(),
            grounded,
            pruned: sub.pruned,
            capped: sub.capped,
            warnings,
        });
        graphs.push(g);
    }
    Ok(graphs)
}

/// One graph per answer candidate, and one per rationale candidate when
/// the example carries rationales. The scene subgraph is built once.
pub fn build_example(
    example: &QaExample,
    stores: &Stores<'_>,
    config: &BuildConfig,
) -> Result<ExampleGraphs> {
    example.check()?;
    let scene = ingest_scene_graph(&example.scene, stores.provider, config.scene_cap)?;
    let mut reports = Vec::new();
    let answers = build_candidates(
        example,
        &scene,
        &example.question,
        &example.answers,
        stores,
        config,
        &mut reports,
    )?;
    let rationales = match (&example.rationales, example.rationale_label) {
        (Some(r), Some(_)) => {
            let context = format!(
                "{} {}",
                example.question, example.answers[example.answer_label]
            );
            Some(build_candidates(
                example,
                &scene,
                &context,
                r,
                stores,
                config,
                &mut reports,
            )?)
        }
        _ => None,
    };
    Ok(ExampleGraphs {
        answers,
        rationales,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModalityFilter;
    use crate::knowledge::{DeterministicEmbedder, FileFeatures, Region};

    /// Similarity from a fixed table keyed by the first argument; every
    /// other pair scores 0 and identical strings score 1.
    struct TableProvider {
        scores: HashMap<String, f64>,
        inner: DeterministicEmbedder,
    }

    impl FeatureProvider for TableProvider {
        fn text_embed(&self, text: &str) -> Result<Vec<f64>> {
            self.inner.text_embed(text)
        }
        fn node_feature(&self, key: &str) -> Result<Vec<f64>> {
            self.inner.node_feature(key)
        }
        fn similarity(&self, a: &str, b: &str) -> Result<f64> {
            if a == b {
                return Ok(1.0);
            }
            Ok(*self
                .scores
                .get(a)
                .or_else(|| self.scores.get(b))
                .unwrap_or(&0.0))
        }
    }

    fn table(pairs: &[(&str, f64)]) -> TableProvider {
        TableProvider {
            scores: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            inner: DeterministicEmbedder::new(3, 4).unwrap(),
        }
    }

    fn st(s: &str, p: &str, o: &str) -> SceneTriple {
        SceneTriple {
            subject: s.into(),
            predicate: p.into(),
            object: o.into(),
            subject_ref: format!("v:{s}"),
            object_ref: format!("v:{o}"),
            confidence: None,
        }
    }

    #[test]
    fn scene_triple_makes_two_nodes() {
        let e = DeterministicEmbedder::new(0, 4).unwrap();
        let sub = ingest_scene_graph(&[st("car", "behind", "man")], &e, 20).unwrap();
        assert_eq!(sub.entities.len(), 2);
        assert_eq!(sub.edges, vec![(0, 1, "behind".to_string())]);
    }

    #[test]
    fn scene_cap_drops_triples() {
        let e = DeterministicEmbedder::new(0, 4).unwrap();
        let triples: Vec<SceneTriple> = (0..24)
            .map(|i| st(&format!("o{i}"), "near", &format!("o{}", i + 1)))
            .collect();
        let sub = ingest_scene_graph(&triples, &e, 20).unwrap();
        assert_eq!(sub.entities.len(), 20);
        assert_eq!(sub.dropped.len(), 5);
        assert!(ingest_scene_graph(&[], &e, 20).unwrap().warnings.len() == 1);
    }

    #[test]
    fn scene_confidence_ordering() {
        let e = DeterministicEmbedder::new(0, 4).unwrap();
        let mut a = st("a", "r", "b");
        a.confidence = Some(0.1);
        let mut c = st("c", "r", "d");
        c.confidence = Some(0.9);
        let sub = ingest_scene_graph(&[a, c], &e, 2).unwrap();
        let labels: Vec<&str> = sub.entities.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels, vec!["c", "d"]);
    }

    fn regions(n: usize) -> (RegionStore, FileFeatures) {
        let mut f = FileFeatures::new();
        let mut rs = RegionStore::default();
        for i in 0..n {
            f.insert(&format!("reg{i}"), vec![i as f64, 1.0]);
            rs.regions.push(Region {
                id: format!("r{i:02}"),
                description: format!("d{i}"),
                feature_ref: format!("reg{i}"),
                image_id: None,
            });
        }
        (rs, f)
    }

    #[test]
    fn qa_concept_single_and_pair() {
        let (rs, f) = regions(2);
        let t = table(&[]);
        let provider = crate::knowledge::SplitProvider {
            nodes: &f,
            text: &t,
        };
        let one = RegionStore {
            regions: rs.regions[..1].to_vec(),
        };
        let q = retrieve_qa_concept_node("x", &one, "img", &provider, 1).unwrap();
        assert_eq!(q.feature, vec![0.0, 1.0]);
        let q = retrieve_qa_concept_node("x", &rs, "img", &provider, 2).unwrap();
        assert_eq!(q.feature, vec![0.5, 1.0]);
        let q = retrieve_qa_concept_node("x", &rs, "img", &provider, 5).unwrap();
        assert_eq!(q.warnings.len(), 1);
        assert!(
            retrieve_qa_concept_node("x", &RegionStore::default(), "img", &provider, 1).is_err()
        );
    }

    #[test]
    fn qa_concept_matches_sort_oracle() {
        let (rs, f) = regions(20);
        let e = DeterministicEmbedder::new(11, 8).unwrap();
        let provider = crate::knowledge::SplitProvider {
            nodes: &f,
            text: &e,
        };
        let q = retrieve_qa_concept_node("a bottle of juice", &rs, "img", &provider, 10).unwrap();
        let mut oracle: Vec<(f64, String)> = rs
            .regions
            .iter()
            .map(|r| {
                (
                    crate::knowledge::cosine(
                        &e.embed("a bottle of juice"),
                        &e.embed(&r.description),
                    ),
                    r.id.clone(),
                )
            })
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<String> = oracle[..10].iter().map(|x| x.1.clone()).collect();
        let got: Vec<String> = q.selected.iter().map(|s| s.id.clone()).collect();
        assert_eq!(got, want);

        let mut reversed = rs.clone();
        reversed.regions.reverse();
        let q2 =
            retrieve_qa_concept_node("a bottle of juice", &reversed, "img", &provider, 10).unwrap();
        assert_eq!(q2.feature, q.feature);
    }

    fn vocab_of(words: &[&str]) -> ConceptVocab {
        let store =
            TripleStore::from_triples(words.iter().map(|w| Triple::new(w, "related_to", "anchor")));
        ConceptVocab::from_store(&store)
    }

    fn concepts(g: &[GroundedPhrase]) -> Vec<&str> {
        g.iter().map(|p| p.concept.as_str()).collect()
    }

    #[test]
    fn grounding_examples() {
        let stop = default_stop_list();
        let v = vocab_of(&["beverage", "shop"]);
        let g = ground_phrases(
            "get a beverage from the shop",
            &v,
            &stop,
            PhraseSource::Answer,
        );
        assert_eq!(concepts(&g), vec!["beverage", "shop"]);
        assert!(ground_phrases("nothing here", &v, &stop, PhraseSource::Answer).is_empty());
        let v = vocab_of(&["ice", "ice_cream", "cream"]);
        let g = ground_phrases("Ice cream!", &v, &stop, PhraseSource::Answer);
        assert_eq!(concepts(&g), vec!["ice_cream"]);
        let v = vocab_of(&["person", "dog"]);
        let g = ground_phrases("a person walks a dog", &v, &stop, PhraseSource::Question);
        assert_eq!(concepts(&g), vec!["dog"]);
    }

    fn toy_store() -> TripleStore {
        TripleStore::from_triples([
            Triple::new("beverage", "at_location", "shop"),
            Triple::new("beverage", "related_to", "juice"),
            Triple::new("beverage", "related_to", "water"),
            Triple::new("shop", "has", "cashier"),
            Triple::new("shop", "has", "shelf"),
            Triple::new("juice", "made_of", "fruit"),
            Triple::new("bottle", "at_location", "beverage"),
            Triple::new("bottle", "near", "glass"),
            Triple::new("glass", "holds", "beverage"),
        ])
    }

    #[test]
    fn pruning_boundary() {
        let store = toy_store();
        let grounded = vec![GroundedPhrase {
            surface: "beverage".into(),
            concept: "beverage".into(),
            source: PhraseSource::Answer,
        }];
        let t = table(&[
            ("juice", 0.59),
            ("water", 0.6),
            ("shop", 0.599),
            ("bottle", 0.9),
            ("glass", 0.1),
        ]);
        let sub = retrieve_concept_subgraph(&grounded, &store, &t, "answer", 0.6, 60).unwrap();
        let names: Vec<&str> = sub.nodes.iter().map(|n| n.concept.as_str()).collect();
        assert_eq!(names, vec!["beverage", "bottle", "water"]);
        let pruned: Vec<&str> = sub.pruned.iter().map(|n| n.concept.as_str()).collect();
        assert_eq!(pruned, vec!["shop", "juice", "glass"]);
        assert!(sub
            .edges
            .contains(&Triple::new("bottle", "at_location", "beverage")));

        let only = retrieve_concept_subgraph(&grounded, &store, &t, "answer", 1.1, 60).unwrap();
        assert_eq!(only.nodes.len(), 1);
        assert!(
            retrieve_concept_subgraph(&[], &store, &t, "answer", 0.6, 60)
                .unwrap()
                .nodes
                .is_empty()
        );
    }

    #[test]
    fn concept_cap_keeps_highest() {
        let store = toy_store();
        let grounded = vec![GroundedPhrase {
            surface: "beverage".into(),
            concept: "beverage".into(),
            source: PhraseSource::Answer,
        }];
        let t = table(&[
            ("juice", 0.8),
            ("water", 0.8),
            ("shop", 0.95),
            ("bottle", 0.7),
        ]);
        let sub = retrieve_concept_subgraph(&grounded, &store, &t, "answer", 0.6, 3).unwrap();
        let names: Vec<&str> = sub.nodes.iter().map(|n| n.concept.as_str()).collect();
        assert_eq!(names, vec!["beverage", "shop", "juice"]);
        assert_eq!(sub.capped.len(), 2);
    }

    #[test]
    fn local_entity_linking() {
        let store = toy_store();
        let vocab = ConceptVocab::from_store(&store);
        let mut sub = ConceptSubgraph {
            nodes: vec![ConceptNode {
                concept: "beverage".into(),
                score: Some(1.0),
                sources: vec![PhraseSource::Answer],
            }],
            ..Default::default()
        };
        link_local_entities(&mut sub, &["bottle".into()], &store, &vocab, &[], 60);
        assert!(sub.contains("bottle"));
        assert_eq!(
            sub.edges,
            vec![Triple::new("bottle", "at_location", "beverage")]
        );

        let before = sub.clone();
        link_local_entities(&mut sub, &["zebra".into()], &store, &vocab, &[], 60);
        assert_eq!(sub, before);

        link_local_entities(&mut sub, &["glass".into()], &store, &vocab, &[], 60);
        assert!(sub.edges.contains(&Triple::new("bottle", "near", "glass")));
    }

    fn fixture() -> (TripleStore, RegionStore, FileFeatures, QaExample) {
        let store = toy_store();
        let (rs, mut f) = regions(3);
        for name in ["car", "man", "shop"] {
            f.insert(&format!("v:{name}"), vec![0.5, -0.5]);
        }
        let ex = QaExample {
            id: "ex0".into(),
            image_id: "img0".into(),
            question: "where does the beverage come from".into(),
            answers: vec![
                "from the shop".into(),
                "from a bottle".into(),
                "juice".into(),
                "nowhere".into(),
            ],
            answer_label: 0,
            rationales: None,
            rationale_label: None,
            scene: vec![st("car", "behind", "man"), st("man", "in", "shop")],
            image_labels: None,
        };
        (store, rs, f, ex)
    }

    #[test]
    fn example_builds_one_graph_per_candidate() {
        let (store, rs, f, ex) = fixture();
        let vocab = ConceptVocab::from_store(&store);
        let e = DeterministicEmbedder::new(5, 2).unwrap();
        struct Both<'a>(&'a FileFeatures, &'a DeterministicEmbedder);
        impl FeatureProvider for Both<'_> {
            fn text_embed(&self, t: &str) -> Result<Vec<f64>> {
                self.1.text_embed(t)
            }
            fn node_feature(&self, k: &str) -> Result<Vec<f64>> {
                self.0.node_feature(k).or_else(|_| self.1.node_feature(k))
            }
            fn similarity(&self, a: &str, b: &str) -> Result<f64> {
                self.1.similarity(a, b)
            }
        }
        let provider = Both(&f, &e);
        let stores = Stores {
            triples: &store,
            vocab: &vocab,
            regions: &rs,
            provider: &provider,
        };
        let cfg = BuildConfig::default();
        let out = build_example(&ex, &stores, &cfg).unwrap();
        assert_eq!(out.answers.len(), 4);
        for g in &out.answers {
            assert_eq!(g.validate_with(&cfg.limits()), Ok(()));
            let z = g.context_node().unwrap();
            let scene_nbrs = g.neighbor_ids(z, ModalityFilter::Scene).unwrap();
            assert_eq!(scene_nbrs.len(), 4, "3 scene entities plus P");
            assert_eq!(g.scene_entities().len(), 3);
            let image_pairs = g.edges.iter().filter(|e| e.relation == REL_IMAGE).count();
            assert_eq!(image_pairs, 4);
        }
        let z0: Vec<&String> = out
            .answers
            .iter()
            .map(|g| &g.nodes[0].feature_ref)
            .collect();
        assert_eq!(z0.iter().collect::<HashSet<_>>().len(), 4);
        // "beverage" comes from the question and "shop" from answer 0
        let g = &out.answers[0];
        let find = |n: &str| {
            g.nodes
                .iter()
                .find(|x| x.label == n && x.node_type == NodeType::C)
                .unwrap()
                .id
        };
        assert!(g.has_edge(0, find("beverage"), REL_QUESTION));
        assert!(g.has_edge(0, find("shop"), REL_ANSWER));
        assert!(!g.has_edge(0, find("shop"), REL_QUESTION));

        let again = build_example(&ex, &stores, &cfg).unwrap();
        for (a, b) in out.answers.iter().zip(&again.answers) {
            assert_eq!(a.to_json(), b.to_json());
        }
    }

    #[test]
    fn concept_grounded_twice_gets_both_edges() {
        let (store, rs, f, mut ex) = fixture();
        ex.answers[0] = "the beverage".into();
        let vocab = ConceptVocab::from_store(&store);
        let e = DeterministicEmbedder::new(5, 2).unwrap();
        let mut f2 = f.clone();
        for c in store.concepts() {
            f2.insert(&format!("c:{c}"), vec![0.0, 1.0]);
        }
        let provider = crate::knowledge::SplitProvider {
            nodes: &f2,
            text: &e,
        };
        let stores = Stores {
            triples: &store,
            vocab: &vocab,
            regions: &rs,
            provider: &provider,
        };
        let out = build_example(&ex, &stores, &BuildConfig::default()).unwrap();
        let g = &out.answers[0];
        let b = g.nodes.iter().find(|x| x.label == "beverage").unwrap().id;
        assert!(g.has_edge(0, b, REL_QUESTION));
        assert!(g.has_edge(0, b, REL_ANSWER));
    }
}
