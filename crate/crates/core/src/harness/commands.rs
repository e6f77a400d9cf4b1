//! The five command entry points. Each writes its resolved [`RunConfig`]
//! next to its outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{evaluate, load_checkpoint, save_checkpoint, Metrics, Model, ModelConfig};
use crate::autodiff::gradcheck::{analytic_grads, compare_with_finite_differences};
use crate::autodiff::nn::{Bound, Forward, Mode, NormMode, ParamSet};
use crate::autodiff::tape::{Tape, Var};
use crate::builder::BuildReport;
use crate::error::{Error, Result};
use crate::graph::{
    FeatureWidths, MultimodalSemanticGraph, NodeType, RelationVocab, REL_ANSWER, REL_IMAGE,
    REL_QA_CONCEPT, REL_QUESTION,
};
use crate::harness::config::{RunConfig, RunPaths, RUN_CONFIG_FILE};
use crate::harness::io::{load_examples, write_json};
use crate::harness::pipeline::{
    all_graphs, episodes, fit, has_rationales, relation_vocab, DataStores,
};
use crate::harness::synth::{
    cross_modal_bayes, generate, probe_data, BayesReport, LinearProbe, SignalMode, SyntheticSpec,
};
use crate::mrgat::{Fusion, GnnConfig, PreparedGraph};

pub const GRAPHS_DIR: &str = "graphs";
pub const REPORT_FILE: &str = "build_report.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const SELFCHECK_FILE: &str = "selfcheck.json";

fn write_run_config(dir: &Path, run: &RunConfig) -> Result<PathBuf> {
    let path = dir.join(RUN_CONFIG_FILE);
    write_json(&path, run)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildGraphOutput {
    /// Answer graphs first, then rationale graphs.
    pub graphs: Vec<PathBuf>,
    pub report: PathBuf,
}

/// Builds and validates every candidate graph of one example and writes
/// them under `<output>/graphs/<id>/`.
pub fn cmd_build_graph(run: &RunConfig, example_id: &str) -> Result<BuildGraphOutput> {
    let stores = DataStores::load(&run.paths, run.text_embedder)?;
    let examples = load_examples(&run.paths.examples)?;
    let example = examples
        .iter()
        .find(|e| e.id == example_id)
        .ok_or_else(|| Error::invalid(format!("no example with id {example_id:?}")))?;
    let built = stores.build(example, &run.build_config())?;
    let dir = run.paths.output.join(GRAPHS_DIR).join(example_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut graphs = Vec::new();
    let mut write = |name: String, g: &MultimodalSemanticGraph| -> Result<()> {
        g.validate_with(&run.build_config().limits())
            .map_err(Error::Validation)?;
        let path = dir.join(name);
        fs::write(&path, g.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
        graphs.push(path);
        Ok(())
    };
    for (i, g) in built.answers.iter().enumerate() {
        write(format!("answer_{i}.json"), g)?;
    }
    for (i, g) in built.rationales.iter().flatten().enumerate() {
        write(format!("rationale_{i}.json"), g)?;
    }
    let report = dir.join(REPORT_FILE);
    write_json::<Vec<BuildReport>>(&report, &built.reports)?;
    write_run_config(&dir, run)?;
    Ok(BuildGraphOutput { graphs, report })
}

/// Fills in the relation vocabulary when the config holds only the reserved relations.
fn resolve_model(
    run: &RunConfig,
    graphs: Vec<&MultimodalSemanticGraph>,
    stores: &DataStores,
) -> ModelConfig {
    let mut cfg = run.model.clone();
    if cfg.gnn.relations.reserved_only() {
        cfg.gnn.relations = relation_vocab(graphs, &stores.triples);
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: usize,
    pub last_loss: Option<f64>,
}

/// Trains from a fresh seeded initialization. With zero epochs the
/// checkpoint holds the initialization itself.
pub fn cmd_train(run: &RunConfig) -> Result<TrainOutput> {
    run.check()?;
    let stores = DataStores::load(&run.paths, run.text_embedder)?;
    let bc = run.build_config();
    let train_ex = load_examples(&run.paths.examples)?;
    let train_built = stores.build_all(&train_ex, &bc)?;
    let (eval_ex, eval_built) = match &run.paths.eval_examples {
        Some(p) => {
            let ex = load_examples(p)?;
            let b = stores.build_all(&ex, &bc)?;
            (ex, b)
        }
        None => (Vec::new(), Vec::new()),
    };
    let cfg = resolve_model(
        run,
        all_graphs(&train_built)
            .chain(all_graphs(&eval_built))
            .collect(),
        &stores,
    );
    let (model, mut params) = Model::init::<f64>(cfg, run.seed)?;
    let train = episodes(&model, &train_ex, &train_built)?;
    let eval = episodes(&model, &eval_ex, &eval_built)?;

    let out = &run.paths.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut last_loss = None;
    let opt = fit(&model, &mut params, &train, Some(&eval), run, |entry| {
        last_loss = Some(entry.stats.mean_loss);
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))
    })?;
    drop(log);

    let checkpoint = out.join(CHECKPOINT_DIR);
    save_checkpoint(&checkpoint, &model.config, &params, Some(&opt))?;
    let resolved = RunConfig {
        model: model.config.clone(),
        ..run.clone()
    };
    write_run_config(out, &resolved)?;
    Ok(TrainOutput {
        checkpoint,
        log: log_path,
        epochs: run.epochs,
        last_loss,
    })
}

/// Differences between the run's model settings and a checkpoint's, ignoring
/// the relation vocabulary when the run holds only the reserved ones.
pub fn config_mismatches(run: &ModelConfig, checkpoint: &ModelConfig) -> Vec<String> {
    let (a, b) = (&run.gnn, &checkpoint.gnn);
    let mut out = Vec::new();
    let mut check = |name: &str, same: bool| {
        if !same {
            out.push(name.to_string());
        }
    };
    check("layers", a.layers == b.layers);
    check("hidden", a.hidden == b.hidden);
    check("norm_mode", a.norm_mode == b.norm_mode);
    check("fusion", a.fusion == b.fusion);
    check("aggregation", a.aggregation == b.aggregation);
    check("widths", a.widths == b.widths);
    check(
        "relations",
        a.relations.reserved_only() || a.relations == b.relations,
    );
    check("head", run.head == checkpoint.head);
    check("classes", run.classes == checkpoint.classes);
    check("pooling", run.pooling == checkpoint.pooling);
    out
}

/// Evaluates a checkpoint on `dataset` and writes `metrics.json`.
pub fn cmd_eval(run: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<Metrics> {
    run.check()?;
    let ck = load_checkpoint::<f64>(checkpoint)?;
    let diff = config_mismatches(&run.model, &ck.model.config);
    if !diff.is_empty() {
        return Err(Error::invalid(format!(
            "run config does not match checkpoint {}: {}",
            checkpoint.display(),
            diff.join(", ")
        )));
    }
    let stores = DataStores::load(&run.paths, run.text_embedder)?;
    let examples = load_examples(dataset)?;
    let built = stores.build_all(&examples, &run.build_config())?;
    let eps = episodes(&ck.model, &examples, &built)?;
    let m = evaluate(
        &ck.model,
        &ck.params,
        &eps,
        run.joint && has_rationales(&eps),
        run.threads,
    )?;
    let out = &run.paths.output;
    write_json(&out.join(METRICS_FILE), &m)?;
    let resolved = RunConfig {
        model: ck.model.config.clone(),
        ..run.clone()
    };
    write_run_config(out, &resolved)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub scene_nodes: usize,
    pub concept_nodes: usize,
    pub layers: usize,
    pub hidden: usize,
    pub width: usize,
    pub norm_mode: NormMode,
    pub fusion: Fusion,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: perturbs the analytic gradient of this parameter.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene_nodes: 6,
            concept_nodes: 5,
            layers: 2,
            hidden: 8,
            width: 4,
            norm_mode: NormMode::Batch,
            fusion: Fusion::Bidirectional,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutput {
    pub passed: bool,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub failing: Vec<String>,
}

/// Candidate graph with `scene` entities, `concept` concept-side nodes
/// (the first two from the question), a context node and a QA-concept node.
pub fn gradcheck_fixture(
    seed: u64,
    scene: usize,
    concept: usize,
    width: usize,
) -> MultimodalSemanticGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feat = || {
        (0..width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    let mut g = MultimodalSemanticGraph::new();
    let z = g.add_node(
        NodeType::Z,
        "question [SEP] answer",
        "text:question [SEP] answer",
        feat(),
    );
    let p = g.add_node(NodeType::P, "answer", "mean:answer", feat());
    g.connect(z, p, REL_IMAGE);
    let mut s_ids = Vec::new();
    for i in 0..scene {
        let s = g.add_node(NodeType::S, &format!("obj{i}"), &format!("s{i}"), feat());
        g.connect(z, s, REL_IMAGE);
        g.connect(p, s, REL_QA_CONCEPT);
        if let Some(&prev) = s_ids.last() {
            g.connect(prev, s, if i % 2 == 0 { "near" } else { "on" });
        }
        s_ids.push(s);
    }
    if scene > 2 {
        g.connect(s_ids[0], s_ids[scene - 1], "holds");
    }
    let mut c_ids: Vec<usize> = Vec::new();
    for i in 0..concept {
        let (t, rel) = if i < 2 {
            (NodeType::Q, REL_QUESTION)
        } else {
            (NodeType::C, REL_ANSWER)
        };
        let c = g.add_node(t, &format!("concept{i}"), &format!("c:concept{i}"), feat());
        g.connect(z, c, rel);
        if let Some(&prev) = c_ids.last() {
            g.connect(prev, c, if i % 2 == 0 { "related_to" } else { "part_of" });
        }
        c_ids.push(c);
    }
    g
}

/// The model, parameters and candidate graphs a gradient check runs on.
pub struct GradCheckProblem {
    pub model: Model,
    pub params: ParamSet<f64>,
    pub graphs: Vec<PreparedGraph<f64>>,
}

impl GradCheckProblem {
    /// Two fixture candidate graphs and a freshly initialized model.
    pub fn new(config: &GradCheckConfig) -> Result<Self> {
        let graphs: Vec<MultimodalSemanticGraph> = (0..2)
            .map(|i| {
                gradcheck_fixture(
                    config.seed * 2 + i,
                    config.scene_nodes,
                    config.concept_nodes,
                    config.width,
                )
            })
            .collect();
        let w = config.width;
        let model_cfg = ModelConfig {
            gnn: GnnConfig {
                layers: config.layers,
                hidden: config.hidden,
                norm_mode: config.norm_mode,
                fusion: config.fusion,
                widths: FeatureWidths {
                    scene: w,
                    concept: w,
                    text: w,
                },
                relations: RelationVocab::from_graphs(graphs.iter()),
                ..GnnConfig::default()
            },
            ..ModelConfig::default()
        };
        let (model, params) = Model::init::<f64>(model_cfg, config.seed)?;
        let graphs = graphs
            .iter()
            .map(|g| model.prepare(g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            params,
            graphs,
        })
    }

    /// Train-mode candidate cross-entropy with gold index 0.
    pub fn loss(&self, tape: &mut Tape<f64>, ps: &ParamSet<f64>, bound: &Bound) -> Result<Var> {
        let mut fwd = Forward::new(tape, ps, bound, Mode::Train);
        let logits = self.model.candidate_logits(&mut fwd, &self.graphs)?;
        Ok(fwd.tape.cross_entropy(logits, 0)?)
    }
}

/// Finite-difference check of the whole pipeline: two candidate graphs,
/// model forward in train mode, candidate cross-entropy.
pub fn run_gradcheck(config: &GradCheckConfig) -> Result<GradCheckOutput> {
    let problem = GradCheckProblem::new(config)?;
    let params = &problem.params;
    let loss =
        |tape: &mut Tape<f64>, ps: &ParamSet<f64>, bound: &Bound| problem.loss(tape, ps, bound);
    let (_, mut grads) = analytic_grads(params, &loss)?;
    if let Some(name) = &config.corrupt {
        let id = params
            .id(name)
            .filter(|&id| params.is_trainable(id))
            .ok_or_else(|| Error::invalid(format!("no trainable parameter named {name:?}")))?;
        grads.perturb(params, id, 0, 1.0);
    }
    let report = compare_with_finite_differences(params, &grads, config.step, &loss)?;
    Ok(GradCheckOutput {
        passed: report.passes(config.tolerance),
        max_rel_error: report.max_rel_error,
        worst: report.worst.clone(),
        checked: report.checked,
        failing: report
            .failing(config.tolerance)
            .into_iter()
            .map(String::from)
            .collect(),
    })
}

/// Runs the check, writes `gradcheck.json` under `output`, and fails with a
/// numeric error naming the offending parameters.
pub fn cmd_gradcheck(config: &GradCheckConfig, output: &Path) -> Result<GradCheckOutput> {
    let out = run_gradcheck(config)?;
    write_json(&output.join(GRADCHECK_FILE), &out)?;
    write_json(&output.join(RUN_CONFIG_FILE), config)?;
    if !out.passed {
        return Err(Error::GradCheck(format!(
            "max relative error {:.3e} >= {:.0e}; failing parameters: {}",
            out.max_rel_error,
            config.tolerance,
            out.failing.join(", ")
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub mode: SignalMode,
    pub n_train: usize,
    pub n_test: usize,
    /// Enumerated Bayes accuracies of the cross-modal construction.
    pub bayes: Option<BayesReport>,
    /// Scene-side linear probe, fitted and scored on the training split.
    pub scene_probe_train: f64,
    pub scene_probe_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub run_config: PathBuf,
    pub selfcheck: SelfCheck,
}

/// Run configuration that trains on a synthetic dataset written to `dir`.
pub fn synthetic_run_config(spec: &SyntheticSpec, dir: &Path) -> RunConfig {
    let paths = crate::harness::synth::SyntheticPaths::in_dir(dir);
    let mut run = RunConfig {
        seed: spec.seed,
        paths: RunPaths {
            triples: paths.triples,
            regions: paths.regions,
            features: paths.features,
            examples: paths.examples,
            eval_examples: (spec.n_test > 0).then_some(paths.test_examples),
            output: dir.join("out"),
        },
        text_embedder: Some(spec.embedder()),
        ..RunConfig::default()
    };
    run.model.gnn.widths = FeatureWidths {
        scene: spec.width,
        concept: spec.width,
        text: spec.width,
    };
    run
}

pub const PROBE_STEPS: usize = 300;
pub const PROBE_LR: f64 = 0.5;

/// Generates a dataset into `dir` with stores, a run config and a self-check.
pub fn cmd_synth_gen(spec: &SyntheticSpec, dir: &Path) -> Result<SynthOutput> {
    let data = generate(spec)?;
    data.write(dir)?;
    let run = synthetic_run_config(spec, dir);
    let stores = DataStores::new(
        data.triples.clone(),
        data.regions.clone(),
        data.features.clone(),
        Some(spec.embedder()),
    );
    let bc = run.build_config();
    let probe_split = |ex: &[crate::builder::QaExample]| -> Result<_> {
        let built = stores.build_all(ex, &bc)?;
        let pairs: Vec<_> = built
            .into_iter()
            .zip(ex)
            .map(|(b, e)| (b.answers, e.answer_label))
            .collect();
        Ok(probe_data(&pairs))
    };
    let train = probe_split(&data.train)?;
    let probe = LinearProbe::fit(&train, PROBE_STEPS, PROBE_LR);
    let scene_probe_test = if data.test.is_empty() {
        None
    } else {
        Some(probe.accuracy(&probe_split(&data.test)?))
    };
    let selfcheck = SelfCheck {
        mode: spec.mode,
        n_train: data.train.len(),
        n_test: data.test.len(),
        bayes: (spec.mode == SignalMode::CrossModal).then(|| cross_modal_bayes(spec.n_candidates)),
        scene_probe_train: probe.accuracy(&train),
        scene_probe_test,
    };
    write_json(&dir.join(SELFCHECK_FILE), &selfcheck)?;
    write_json(&dir.join("synthetic_spec.json"), spec)?;
    let run_config = write_run_config(dir, &run)?;
    Ok(SynthOutput {
        run_config,
        selfcheck,
    })
}
