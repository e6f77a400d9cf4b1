//! Loading stores, building graphs for a dataset, and the epoch loop.

use serde::{Deserialize, Serialize};

use crate::answer::{evaluate, train_epoch, Episode, EpochStats, Metrics, Model};
use crate::autodiff::nn::ParamSet;
use crate::autodiff::optim::{lr_schedule, AdamW};
use crate::builder::{build_example, BuildConfig, ConceptVocab, ExampleGraphs, QaExample, Stores};
use crate::error::{Error, Result};
use crate::graph::{MultimodalSemanticGraph, NodeRecord, RelationVocab, Side};
use crate::harness::config::{RunConfig, RunPaths};
use crate::knowledge::{
    resolve_feature_ref, DeterministicEmbedder, FeatureProvider, FileFeatures, RegionStore,
    SplitProvider, TripleStore,
};

/// Everything graph construction reads from disk.
#[derive(Debug, Clone)]
pub struct DataStores {
    pub triples: TripleStore,
    pub vocab: ConceptVocab,
    pub regions: RegionStore,
    pub features: FileFeatures,
    pub embedder: Option<DeterministicEmbedder>,
}

impl DataStores {
    pub fn new(
        triples: TripleStore,
        regions: RegionStore,
        features: FileFeatures,
        embedder: Option<DeterministicEmbedder>,
    ) -> Self {
        let vocab = ConceptVocab::from_store(&triples);
        Self {
            triples,
            vocab,
            regions,
            features,
            embedder,
        }
    }

    pub fn load(paths: &RunPaths, embedder: Option<DeterministicEmbedder>) -> Result<Self> {
        let s = Self::new(
            TripleStore::load(&paths.triples)?,
            RegionStore::load(&paths.regions)?,
            FileFeatures::load(&paths.features)?,
            embedder,
        );
        s.with_provider(|p| s.regions.check_features(p))?;
        Ok(s)
    }

    pub fn with_provider<R>(&self, f: impl FnOnce(&dyn FeatureProvider) -> R) -> R {
        match &self.embedder {
            Some(e) => f(&SplitProvider {
                nodes: &self.features,
                text: e,
            }),
            None => f(&self.features),
        }
    }

    pub fn build(&self, example: &QaExample, config: &BuildConfig) -> Result<ExampleGraphs> {
        self.with_provider(|provider| {
            let stores = Stores {
                triples: &self.triples,
                vocab: &self.vocab,
                regions: &self.regions,
                provider,
            };
            build_example(example, &stores, config)
        })
    }

    pub fn build_all(
        &self,
        examples: &[QaExample],
        config: &BuildConfig,
    ) -> Result<Vec<ExampleGraphs>> {
        examples.iter().map(|e| self.build(e, config)).collect()
    }

    /// Feature lookup for graphs read back from disk.
    pub fn resolve(&self, record: &NodeRecord) -> Result<Vec<f64>> {
        self.with_provider(|p| resolve_feature_ref(p, &record.feature_ref))
    }
}

/// Relations used by `graphs` plus every relation in the triple store.
pub fn relation_vocab<'a>(
    graphs: impl IntoIterator<Item = &'a MultimodalSemanticGraph>,
    store: &TripleStore,
) -> RelationVocab {
    let mut v = RelationVocab::from_graphs(graphs);
    for r in store.relations() {
        if v.id(r).is_none() {
            v.add(r, Side::Concept);
        }
    }
    v
}

pub fn all_graphs(built: &[ExampleGraphs]) -> impl Iterator<Item = &MultimodalSemanticGraph> {
    built
        .iter()
        .flat_map(|b| b.answers.iter().chain(b.rationales.iter().flatten()))
}

pub fn episodes(
    model: &Model,
    examples: &[QaExample],
    built: &[ExampleGraphs],
) -> Result<Vec<Episode<f64>>> {
    if examples.len() != built.len() {
        return Err(Error::invalid("examples and built graphs differ in count"));
    }
    examples
        .iter()
        .zip(built)
        .map(|(e, b)| {
            let rationales = match (&b.rationales, e.rationale_label) {
                (Some(r), Some(l)) => Some((r.as_slice(), l)),
                _ => None,
            };
            Episode::prepare(
                model,
                &e.id,
                &b.answers,
                e.answer_label,
                rationales,
                e.answers.len(),
            )
        })
        .collect()
}

/// Whether every episode carries a rationale task.
pub fn has_rationales<T>(episodes: &[Episode<T>]) -> bool {
    !episodes.is_empty() && episodes.iter().all(|e| e.rationale.is_some())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_multiplier: f64,
    pub lrs: Vec<f64>,
    #[serde(flatten)]
    pub stats: EpochStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<Metrics>,
}

/// Runs epochs `1..=run.epochs` with the warmup/cosine multiplier.
pub fn fit(
    model: &Model,
    params: &mut ParamSet<f64>,
    train: &[Episode<f64>],
    eval: Option<&[Episode<f64>]>,
    run: &RunConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<AdamW<f64>> {
    run.check()?;
    let mut opt = AdamW::new(run.adamw(), params);
    let tc = run.train_config();
    for epoch in 1..=run.epochs {
        let m = lr_schedule(epoch, run.warmup, run.epochs).map_err(Error::Invalid)?;
        let stats = train_epoch(model, params, &mut opt, train, m, &tc, epoch)?;
        let eval = match eval {
            Some(e) if !e.is_empty() => Some(evaluate(
                model,
                params,
                e,
                run.joint && has_rationales(e),
                run.threads,
            )?),
            _ => None,
        };
        let log = EpochLog {
            epoch,
            lr_multiplier: m,
            lrs: run.lrs.iter().map(|l| l * m).collect(),
            stats,
            eval,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3}",
            log.stats.mean_loss,
            log.stats.train_accuracy
        );
        on_epoch(&log)?;
    }
    Ok(opt)
}
