//! Readout, answer heads, training loop, metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{update_running_stats, Forward, Initializer, Linear, Mode, ParamSet};
use crate::autodiff::optim::{AdamW, AdamWConfig, ParamGrads};
use crate::autodiff::serialize::{
    entries_into_params, load_entries, params_to_entries, save_entries, NamedTensor,
};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::graph::MultimodalSemanticGraph;
use crate::mrgat::{Gnn, GnnConfig, GnnOutput, PreparedGraph, GNN_GROUP};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    MultipleChoice,
    OpenDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub gnn: GnnConfig,
    pub head: HeadKind,
    /// Answer vocabulary of the open-domain head.
    pub classes: Vec<String>,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gnn: GnnConfig::default(),
            head: HeadKind::MultipleChoice,
            classes: Vec::new(),
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        self.gnn.check()?;
        if self.head == HeadKind::OpenDomain && self.classes.len() < 2 {
            return Err(Error::invalid(format!(
                "open-domain head needs at least 2 answer classes, got {}",
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn head_outputs(&self) -> usize {
        match self.head {
            HeadKind::MultipleChoice => 1,
            HeadKind::OpenDomain => self.classes.len(),
        }
    }
}

/// The pooled vectors, each `[1, D]`, and their concatenation `[1, 4D]`.
#[derive(Debug, Clone, Copy)]
pub struct Readout {
    pub h_s: Var,
    pub h_c: Var,
    pub h_p: Var,
    pub h_z: Var,
    pub h_a: Var,
}

/// GNN plus answer head. Parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub gnn: Gnn,
    pub fc: Linear,
}

impl Model {
    pub fn new<T: Scalar>(
        config: ModelConfig,
        params: &mut ParamSet<T>,
        init: &mut Initializer,
    ) -> Result<Self> {
        config.check()?;
        let gnn = Gnn::new(config.gnn.clone(), params, init)?;
        let d = config.gnn.hidden;
        let fc = Linear::new(
            params,
            init,
            "head.fc",
            4 * d,
            config.head_outputs(),
            GNN_GROUP,
        );
        Ok(Self { config, gnn, fc })
    }

    /// Fresh model and parameters from a seed.
    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        let mut params = ParamSet::new();
        let mut init = Initializer::new(seed);
        let model = Self::new(config, &mut params, &mut init)?;
        Ok((model, params))
    }

    pub fn prepare<T: Scalar>(&self, g: &MultimodalSemanticGraph) -> Result<PreparedGraph<T>> {
        self.gnn.prepare(g)
    }

    pub fn readout<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        g: &PreparedGraph<T>,
        out: &GnnOutput,
    ) -> Result<Readout> {
        let d = self.config.gnn.hidden;
        let pooling = self.config.pooling;
        let h_s = pool(fwd, out.states, &g.scene_entities, d, pooling, "scene")?;
        let h_c = pool(fwd, out.states, &g.concept_nodes, d, pooling, "concept")?;
        let h_p = match g.p {
            Some(p) => fwd.tape.gather_rows(out.states, vec![p].into())?,
            None => fwd.tape.constant(Tensor::zeros(&[1, d])),
        };
        let h_z = fwd.tape.gather_rows(out.states, vec![g.z].into())?;
        let sc = fwd.tape.concat_cols(h_s, h_c)?;
        let scp = fwd.tape.concat_cols(sc, h_p)?;
        let h_a = fwd.tape.concat_cols(scp, h_z)?;
        Ok(Readout {
            h_s,
            h_c,
            h_p,
            h_z,
            h_a,
        })
    }

    /// `f_c(h_a)` for one graph, `[1, outputs]`.
    pub fn graph_logits<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        g: &PreparedGraph<T>,
    ) -> Result<Var> {
        let out = self.gnn.forward(fwd, g)?;
        let r = self.readout(fwd, g, &out)?;
        Ok(self.fc.forward(fwd, r.h_a)?)
    }

    /// One logit per candidate graph, `[k]`.
    pub fn candidate_logits<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        graphs: &[PreparedGraph<T>],
    ) -> Result<Var> {
        if self.config.head != HeadKind::MultipleChoice {
            return Err(Error::invalid(
                "candidate scoring needs a multiple-choice head",
            ));
        }
        if graphs.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 candidates, got {}",
                graphs.len()
            )));
        }
        let parts = graphs
            .iter()
            .map(|g| self.graph_logits(fwd, g))
            .collect::<Result<Vec<_>>>()?;
        let stacked = fwd.tape.concat_rows(&parts)?;
        Ok(fwd.tape.reshape(stacked, vec![graphs.len()])?)
    }

    /// One logit per answer class, `[|B|]`.
    pub fn class_logits<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        g: &PreparedGraph<T>,
    ) -> Result<Var> {
        if self.config.head != HeadKind::OpenDomain {
            return Err(Error::invalid("class scoring needs an open-domain head"));
        }
        let l = self.graph_logits(fwd, g)?;
        Ok(fwd.tape.reshape(l, vec![self.config.classes.len()])?)
    }

    /// Logits of whichever head the model carries.
    pub fn task_logits<T: Scalar>(&self, fwd: &mut Forward<'_, T>, task: &Task<T>) -> Result<Var> {
        match self.config.head {
            HeadKind::MultipleChoice => self.candidate_logits(fwd, &task.graphs),
            HeadKind::OpenDomain => match task.graphs.as_slice() {
                [g] => self.class_logits(fwd, g),
                gs => Err(Error::invalid(format!(
                    "open-domain task needs exactly 1 graph, got {}",
                    gs.len()
                ))),
            },
        }
    }
}

/// Pools the rows `select` of `states` into `[1, d]`.
pub fn pool<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    states: Var,
    select: &[usize],
    d: usize,
    pooling: Pooling,
    what: &str,
) -> Result<Var> {
    if select.is_empty() {
        log::warn!("empty {what} selection; pooling to zeros");
        return Ok(fwd.tape.constant(Tensor::zeros(&[1, d])));
    }
    let rows = fwd.tape.gather_rows(states, Arc::from(select))?;
    Ok(match pooling {
        Pooling::Mean => fwd.tape.mean_rows(rows)?,
        Pooling::Max => fwd.tape.max_rows(rows)?,
    })
}

fn probabilities<T: Scalar, F>(params: &ParamSet<T>, f: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Forward<'_, T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut fwd = Forward::new(&mut tape, params, &bound, Mode::Eval);
    let logits = f(&mut fwd)?;
    let p = fwd.tape.softmax(logits)?;
    Ok(fwd.tape.value(p).to_f64_vec())
}

/// `softmax_a f_c(h_a)` over the candidate graphs, in eval mode.
pub fn score_candidates<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    graphs: &[PreparedGraph<T>],
) -> Result<Vec<f64>> {
    probabilities(params, |fwd| model.candidate_logits(fwd, graphs))
}

/// Class probabilities of the open-domain head, in eval mode.
pub fn score_open_domain<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    graph: &PreparedGraph<T>,
) -> Result<Vec<f64>> {
    probabilities(params, |fwd| model.class_logits(fwd, graph))
}

/// Candidate graphs (or the single graph of an open-domain question) and the gold index.
#[derive(Debug, Clone)]
pub struct Task<T> {
    pub graphs: Vec<PreparedGraph<T>>,
    pub gold: usize,
}

/// One example: the answer task and, for VCR-style data, the rationale task.
#[derive(Debug, Clone)]
pub struct Episode<T> {
    pub id: String,
    pub answer: Task<T>,
    pub rationale: Option<Task<T>>,
}

impl<T: Scalar> Episode<T> {
    /// Prepares every graph; `expected` is the example's candidate count.
    pub fn prepare(
        model: &Model,
        id: &str,
        answers: &[MultimodalSemanticGraph],
        answer_label: usize,
        rationales: Option<(&[MultimodalSemanticGraph], usize)>,
        expected: usize,
    ) -> Result<Self> {
        if model.config.head == HeadKind::MultipleChoice && answers.len() != expected {
            return Err(Error::invalid(format!(
                "example {id}: {} candidate graphs for {expected} candidates",
                answers.len()
            )));
        }
        let prep = |gs: &[MultimodalSemanticGraph]| {
            gs.iter()
                .map(|g| model.prepare(g))
                .collect::<Result<Vec<_>>>()
        };
        let answer = Task {
            graphs: prep(answers)?,
            gold: answer_label,
        };
        let rationale = match rationales {
            Some((gs, gold)) => Some(Task {
                graphs: prep(gs)?,
                gold,
            }),
            None => None,
        };
        Ok(Self {
            id: id.to_string(),
            answer,
            rationale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Examples per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Also train on rationale tasks, alternating with the answer task.
    pub joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            shuffle: true,
            seed: 0,
            joint: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Fraction of tasks whose train-mode argmax hit the gold index.
    pub train_accuracy: f64,
    pub tasks: usize,
    pub steps: usize,
}

/// L2 norm of every parameter group, grouped by layer prefix.
pub fn layer_norms<T: Scalar>(params: &ParamSet<T>) -> String {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for (name, t) in params.named() {
        let key = name.split('.').take(3).collect::<Vec<_>>().join(".");
        let s: f64 = t.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum();
        *sq.entry(key).or_default() += s;
    }
    sq.iter()
        .map(|(k, v)| format!("{k}={:.4e}", v.sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Forward and backward on one task; updates running statistics.
fn task_step<T: Scalar>(
    model: &Model,
    params: &mut ParamSet<T>,
    task: &Task<T>,
    id: &str,
) -> Result<(f64, bool, ParamGrads<T>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut fwd = Forward::new(&mut tape, params, &bound, Mode::Train);
    let logits = model.task_logits(&mut fwd, task)?;
    let loss = fwd.tape.cross_entropy(logits, task.gold)?;
    let stats = std::mem::take(&mut fwd.batch_stats);
    let hit = argmax(&tape.value(logits).to_f64_vec()) == task.gold;
    let value = tape.value(loss).item().to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss".into(),
            example: id.to_string(),
            norms: layer_norms(params),
        });
    }
    let grads = tape.backward(loss)?;
    let grads = ParamGrads::collect(params, &bound, &grads);
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            example: id.to_string(),
            norms: layer_norms(params),
        });
    }
    update_running_stats(params, &stats);
    Ok((value, hit, grads))
}

/// One pass over `episodes` with learning rates scaled by `multiplier`.
///
/// `epoch` only seeds the shuffle.
pub fn train_epoch<T: Scalar>(
    model: &Model,
    params: &mut ParamSet<T>,
    opt: &mut AdamW<T>,
    episodes: &[Episode<T>],
    multiplier: f64,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if episodes.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    if config.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut rng);
    }
    let mut tasks: Vec<(&str, &Task<T>)> = Vec::new();
    for &i in &order {
        let e = &episodes[i];
        tasks.push((&e.id, &e.answer));
        if config.joint {
            if let Some(r) = &e.rationale {
                tasks.push((&e.id, r));
            }
        }
    }

    let mut total = 0.0;
    let mut hits = 0;
    let mut steps = 0;
    for batch in tasks.chunks(config.batch_size) {
        let mut acc = ParamGrads::zeros_like(params);
        for &(id, task) in batch {
            let (loss, hit, g) = task_step(model, params, task, id)?;
            total += loss;
            hits += hit as usize;
            acc.accumulate(&g);
        }
        if batch.len() > 1 {
            acc.scale(T::lit(1.0 / batch.len() as f64));
        }
        opt.step(params, &acc, multiplier)?;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: total / tasks.len() as f64,
        train_accuracy: hits as f64 / tasks.len() as f64,
        tasks: tasks.len(),
        steps,
    })
}

/// Predicted and gold indices for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: usize,
    pub answer_gold: usize,
    pub rationale: Option<usize>,
    pub rationale_gold: Option<usize>,
}

impl Prediction {
    pub fn answer_correct(&self) -> bool {
        self.answer == self.answer_gold
    }

    pub fn rationale_correct(&self) -> Option<bool> {
        match (self.rationale, self.rationale_gold) {
            (Some(p), Some(g)) => Some(p == g),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub q2a: f64,
    pub qa2r: Option<f64>,
    pub q2ar: Option<f64>,
    pub n_examples: usize,
}

/// Accuracy metrics from predictions. With `joint`, every prediction must carry a rationale.
pub fn metrics(preds: &[Prediction], joint: bool) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    let n = preds.len() as f64;
    let q2a = preds.iter().filter(|p| p.answer_correct()).count() as f64 / n;
    if !joint {
        return Ok(Metrics {
            q2a,
            qa2r: None,
            q2ar: None,
            n_examples: preds.len(),
        });
    }
    let mut r_hits = 0;
    let mut both = 0;
    for (i, p) in preds.iter().enumerate() {
        let r = p
            .rationale_correct()
            .ok_or_else(|| Error::invalid(format!("prediction {i} has no rationale set")))?;
        r_hits += r as usize;
        both += (r && p.answer_correct()) as usize;
    }
    Ok(Metrics {
        q2a,
        qa2r: Some(r_hits as f64 / n),
        q2ar: Some(both as f64 / n),
        n_examples: preds.len(),
    })
}

fn predict<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    e: &Episode<T>,
    joint: bool,
) -> Result<Prediction> {
    let task_probs = |t: &Task<T>| probabilities(params, |fwd| model.task_logits(fwd, t));
    let answer = argmax(&task_probs(&e.answer)?);
    let (rationale, rationale_gold) = match (&e.rationale, joint) {
        (Some(r), true) => (Some(argmax(&task_probs(r)?)), Some(r.gold)),
        (None, true) => {
            return Err(Error::invalid(format!(
                "example {} has no rationale set",
                e.id
            )))
        }
        (_, false) => (None, None),
    };
    Ok(Prediction {
        answer,
        answer_gold: e.answer.gold,
        rationale,
        rationale_gold,
    })
}

/// Eval-mode predictions on up to `threads` workers; output order follows `episodes`.
pub fn predict_all<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    episodes: &[Episode<T>],
    joint: bool,
    threads: usize,
) -> Result<Vec<Prediction>> {
    let threads = threads.max(1).min(episodes.len().max(1));
    if threads == 1 {
        return episodes
            .iter()
            .map(|e| predict(model, params, e, joint))
            .collect();
    }
    let chunk = episodes.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = episodes
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|e| predict(model, params, e, joint))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(episodes.len());
        for h in handles {
            out.extend(
                h.join()
                    .map_err(|_| Error::invalid("evaluation worker panicked"))??,
            );
        }
        Ok(out)
    })
}

/// Q→A, QA→R and Q→AR accuracy. `joint` requires rationale tasks on every example.
pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    episodes: &[Episode<T>],
    joint: bool,
    threads: usize,
) -> Result<Metrics> {
    metrics(
        &predict_all(model, params, episodes, joint, threads)?,
        joint,
    )
}

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const OPTIMIZER_CONFIG_FILE: &str = "optimizer.json";

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes config, parameters and (optionally) optimizer state into `dir`.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &ModelConfig,
    params: &ParamSet<T>,
    opt: Option<&AdamW<T>>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    save_entries(&dir.join(PARAMS_FILE), &params_to_entries(params))?;
    if let Some(opt) = opt {
        write_json(&dir.join(OPTIMIZER_CONFIG_FILE), &opt.config)?;
        let mut entries = vec![NamedTensor {
            name: "step".into(),
            shape: vec![1],
            data: vec![opt.steps() as f64],
        }];
        for (which, get) in [
            (
                "first",
                AdamW::first_moment as fn(&AdamW<T>, _) -> &Tensor<T>,
            ),
            ("second", AdamW::second_moment),
        ] {
            for id in params.ids() {
                let t = get(opt, id);
                entries.push(NamedTensor {
                    name: format!("{which}.{}", params.name(id)),
                    shape: t.shape().to_vec(),
                    data: t.to_f64_vec(),
                });
            }
        }
        save_entries(&dir.join(OPTIMIZER_FILE), &entries)?;
    }
    Ok(())
}

/// A loaded checkpoint: model, parameters, and optimizer state when present.
pub struct Checkpoint<T> {
    pub model: Model,
    pub params: ParamSet<T>,
    pub optimizer: Option<AdamW<T>>,
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    let (model, mut params) = Model::init::<T>(config, 0)?;
    entries_into_params(&mut params, &load_entries(&dir.join(PARAMS_FILE))?)?;
    let opt_path = dir.join(OPTIMIZER_FILE);
    let optimizer = if opt_path.exists() {
        let cfg: AdamWConfig = read_json(&dir.join(OPTIMIZER_CONFIG_FILE))?;
        let entries = load_entries(&opt_path)?;
        let by_name: BTreeMap<&str, &NamedTensor> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let fetch = |name: &str| -> Result<Tensor<T>> {
            let e = by_name
                .get(name)
                .ok_or_else(|| Error::Format(format!("optimizer state lacks {name}")))?;
            Ok(Tensor::from_f64(e.shape.clone(), &e.data)?)
        };
        let step = fetch("step")?.data()[0].to_f64_lossy() as u64;
        let mut first = Vec::new();
        let mut second = Vec::new();
        for id in params.ids() {
            first.push(fetch(&format!("first.{}", params.name(id)))?);
            second.push(fetch(&format!("second.{}", params.name(id)))?);
        }
        let mut opt = AdamW::new(cfg, &params);
        opt.restore(first, second, step)?;
        Some(opt)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        params,
        optimizer,
    })
}
