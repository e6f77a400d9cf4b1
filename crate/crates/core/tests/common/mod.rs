//! Independent reference implementations used as test oracles. Nothing
//! here goes through the tensor or tape code; weights are copied out as
//! plain nested vectors first.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use fusegraph::autodiff::ParamSet;
use fusegraph::knowledge::{DeterministicEmbedder, FeatureProvider, TripleStore};
use fusegraph::Result;

pub type Mat = Vec<Vec<f64>>;

/// An affine map `y = x W + b` with `W` stored input-major.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn from_params(params: &ParamSet<f64>, name: &str) -> Self {
        let w = params.get(params.id(&format!("{name}.w")).expect(name));
        let b = params.get(params.id(&format!("{name}.b")).expect(name));
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let flat = w.data();
        Self {
            w: (0..rows)
                .map(|i| flat[i * cols..(i + 1) * cols].to_vec())
                .collect(),
            b: b.data().to_vec(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.w.len(), "affine input width");
        let mut y = self.b.clone();
        for (xi, row) in x.iter().zip(&self.w) {
            for (yj, wij) in y.iter_mut().zip(row) {
                *yj += xi * wij;
            }
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleNorm {
    None,
    /// Biased per-column statistics over the receiver rows.
    Batch,
    /// Biased per-row statistics.
    Layer,
}

pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct TwoLayer {
    pub l1: Affine,
    pub l2: Affine,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl TwoLayer {
    pub fn from_params(params: &ParamSet<f64>, name: &str) -> Self {
        let l2 = Affine::from_params(params, &format!("{name}.l2"));
        let d = l2.b.len();
        let norm = |which: &str, default: f64| {
            params
                .id(&format!("{name}.norm.{which}"))
                .map(|id| params.get(id).data().to_vec())
                .unwrap_or_else(|| vec![default; d])
        };
        Self {
            l1: Affine::from_params(params, &format!("{name}.l1")),
            gamma: norm("gamma", 1.0),
            beta: norm("beta", 0.0),
            l2,
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let a: Vec<f64> = self.l1.apply(x).into_iter().map(|v| v.max(0.0)).collect();
        self.l2.apply(&a)
    }

    /// Applies the map to every row, then the requested normalization.
    pub fn apply_rows(&self, xs: &[Vec<f64>], norm: OracleNorm) -> Mat {
        let ys: Mat = xs.iter().map(|x| self.hidden(x)).collect();
        match norm {
            OracleNorm::None => ys,
            OracleNorm::Layer => ys
                .iter()
                .map(|y| {
                    let n = y.len() as f64;
                    let mean = y.iter().sum::<f64>() / n;
                    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    y.iter()
                        .enumerate()
                        .map(|(j, v)| {
                            self.gamma[j] * (v - mean) / (var + EPS).sqrt() + self.beta[j]
                        })
                        .collect()
                })
                .collect(),
            OracleNorm::Batch => {
                let n = ys.len() as f64;
                let d = self.gamma.len();
                let mut out = ys.clone();
                for j in 0..d {
                    let mean = ys.iter().map(|y| y[j]).sum::<f64>() / n;
                    let var = ys.iter().map(|y| (y[j] - mean).powi(2)).sum::<f64>() / n;
                    for (o, y) in out.iter_mut().zip(&ys) {
                        o[j] = self.gamma[j] * (y[j] - mean) / (var + EPS).sqrt() + self.beta[j];
                    }
                }
                out
            }
        }
    }
}

/// One edge as the oracle sees it: endpoints, relation id and node-type ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
    pub src_type: usize,
    pub dst_type: usize,
}

#[derive(Debug, Clone)]
pub struct OracleLayer {
    pub fr: TwoLayer,
    pub fm: Affine,
    pub fk: Affine,
    pub fq: Affine,
    pub fh: TwoLayer,
}

impl OracleLayer {
    pub fn from_params(params: &ParamSet<f64>, prefix: &str) -> Self {
        Self {
            fr: TwoLayer::from_params(params, &format!("{prefix}.fr")),
            fm: Affine::from_params(params, &format!("{prefix}.fm")),
            fk: Affine::from_params(params, &format!("{prefix}.fk")),
            fq: Affine::from_params(params, &format!("{prefix}.fq")),
            fh: TwoLayer::from_params(params, &format!("{prefix}.fh")),
        }
    }
}

/// A single attention message-passing layer, edge by edge:
///
/// r_ji = f_r([e_ji ‖ u_j ‖ u_i]), m_ji = f_m([h_j ‖ r_ji]), k_ji = f_k([h_j ‖ r_ji]),
/// q_i = f_q(h_i), α_ji = softmax_j(q_i·k_ji / √D), h_i' = h_i + f_h(Σ_j α_ji m_ji)
/// for every node i with at least one incoming edge.
pub fn oracle_layer(
    layer: &OracleLayer,
    h: &[Vec<f64>],
    edges: &[OracleEdge],
    relations: usize,
    node_types: usize,
    mean_aggregation: bool,
    norm: OracleNorm,
) -> Mat {
    let d = h[0].len();
    let mut incoming: Vec<Vec<(f64, Vec<f64>)>> = vec![Vec::new(); h.len()];
    for e in edges {
        let mut onehot = vec![0.0; relations + 2 * node_types];
        onehot[e.relation] = 1.0;
        onehot[relations + e.src_type] = 1.0;
        onehot[relations + node_types + e.dst_type] = 1.0;
        let r = layer.fr.apply_rows(&[onehot], OracleNorm::None).remove(0);
        let mut hr = h[e.src].clone();
        hr.extend(&r);
        let m = layer.fm.apply(&hr);
        let k = layer.fk.apply(&hr);
        let q = layer.fq.apply(&h[e.dst]);
        let logit = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
        incoming[e.dst].push((logit, m));
    }
    let receivers: Vec<usize> = (0..h.len()).filter(|&i| !incoming[i].is_empty()).collect();
    let mut aggregated = Vec::new();
    for &i in &receivers {
        let msgs = &incoming[i];
        let top = msgs
            .iter()
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = msgs.iter().map(|(l, _)| (l - top).exp()).sum();
        let mut agg = vec![0.0; d];
        for (l, m) in msgs {
            let a = (l - top).exp() / z;
            for (s, v) in agg.iter_mut().zip(m) {
                *s += a * v;
            }
        }
        if mean_aggregation {
            agg.iter_mut().for_each(|v| *v /= msgs.len() as f64);
        }
        aggregated.push(agg);
    }
    let mut out = h.to_vec();
    if receivers.is_empty() {
        return out;
    }
    let updates = layer.fh.apply_rows(&aggregated, norm);
    for (&i, u) in receivers.iter().zip(updates) {
        for (o, v) in out[i].iter_mut().zip(u) {
            *o += v;
        }
    }
    out
}

/// Similarity looked up from a fixed table keyed by the first argument;
/// identical strings score 1 and anything else 0.
pub struct TableProvider {
    pub scores: HashMap<String, f64>,
    pub embedder: DeterministicEmbedder,
}

impl TableProvider {
    pub fn new(pairs: &[(&str, f64)]) -> Self {
        Self {
            scores: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            embedder: DeterministicEmbedder::new(1, 4).unwrap(),
        }
    }
}

impl FeatureProvider for TableProvider {
    fn text_embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embedder.text_embed(text)
    }
    fn node_feature(&self, key: &str) -> Result<Vec<f64>> {
        self.embedder.node_feature(key)
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

/// Exhaustive filter: walks every concept in the store and keeps it when it
/// is grounded, or when it shares a triple with a grounded concept and its
/// score is at least `threshold`. Returns (kept, pruned).
pub fn pruning_oracle(
    store: &TripleStore,
    grounded: &BTreeSet<String>,
    scores: &HashMap<String, f64>,
    threshold: f64,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut kept = BTreeSet::new();
    let mut pruned = BTreeSet::new();
    for c in store.concepts() {
        if grounded.contains(c) {
            kept.insert(c.to_string());
            continue;
        }
        let adjacent = store.triples().iter().any(|t| {
            (t.head == c && grounded.contains(&t.tail))
                || (t.tail == c && grounded.contains(&t.head))
        });
        if !adjacent {
            continue;
        }
        let s = scores.get(c).copied().unwrap_or(0.0);
        if s >= threshold {
            kept.insert(c.to_string());
        } else {
            pruned.insert(c.to_string());
        }
    }
    (kept, pruned)
}

/// Fraction of examples where both the answer and the rationale are right,
/// counted one example at a time.
pub fn joint_accuracy(answers: &[(usize, usize)], rationales: &[(usize, usize)]) -> f64 {
    let mut both = 0usize;
    for (a, r) in answers.iter().zip(rationales) {
        if a.0 == a.1 && r.0 == r.1 {
            both += 1;
        }
    }
    both as f64 / answers.len() as f64
}

/// Warmup/cosine multiplier from its piecewise definition: `e / w` while
/// warming up, then `cos²(π/2 · (e − w)/(T − w))`.
pub fn schedule_closed_form(epoch: usize, warmup: usize, total: usize) -> f64 {
    let (e, w, t) = (epoch as f64, warmup as f64, total as f64);
    if e <= w {
        e / w
    } else {
        let x = std::f64::consts::FRAC_PI_2 * (e - w) / (t - w);
        x.cos() * x.cos()
    }
}

/// A valid two-modality candidate graph with random size, wiring and features.
pub fn random_graph(seed: u64, width: usize) -> fusegraph::MultimodalSemanticGraph {
    use fusegraph::graph::{REL_ANSWER, REL_IMAGE, REL_QA_CONCEPT, REL_QUESTION};
    use fusegraph::NodeType;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let feat = |rng: &mut rand_chacha::ChaCha8Rng| {
        (0..width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    let mut g = fusegraph::MultimodalSemanticGraph::new();
    let z = g.add_node(NodeType::Z, "z", "text:z", feat(&mut rng));
    let p = g.add_node(NodeType::P, "p", "mean:p", feat(&mut rng));
    g.connect(z, p, REL_IMAGE);
    let ns = rng.random_range(2..=6);
    let nc = rng.random_range(1..=5);
    let mut scene = Vec::new();
    for i in 0..ns {
        let s = g.add_node(
            NodeType::S,
            &format!("s{i}"),
            &format!("s{i}"),
            feat(&mut rng),
        );
        g.connect(z, s, REL_IMAGE);
        g.connect(p, s, REL_QA_CONCEPT);
        scene.push(s);
    }
    let mut concepts = Vec::new();
    for i in 0..nc {
        let (t, rel) = if rng.random_bool(0.4) {
            (NodeType::Q, REL_QUESTION)
        } else {
            (NodeType::C, REL_ANSWER)
        };
        let c = g.add_node(t, &format!("c{i}"), &format!("c:c{i}"), feat(&mut rng));
        g.connect(z, c, rel);
        concepts.push(c);
    }
    for (nodes, names) in [
        (&scene, ["near", "on", "holds"]),
        (&concepts, ["related_to", "at_location", "part_of"]),
    ] {
        for a in 0..nodes.len() {
            for b in a + 1..nodes.len() {
                if rng.random_bool(0.5) {
                    let rel = names[rng.random_range(0..names.len())];
                    g.connect(nodes[a], nodes[b], rel);
                }
            }
        }
    }
    g
}
