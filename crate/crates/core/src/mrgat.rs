//! Multi-relation attention message passing over the semantic graph, with
//! two modality GNNs fused through the context node.
//!
//! One layer, for every receiver `i` with incoming edges `j -> i`:
//!
//! ```text
//! r_ji  = f_r([e_ji ‖ u_j ‖ u_i])
//! m_ji  = f_m([h_j ‖ r_ji]),   k_ji = f_k([h_j ‖ r_ji]),   q_i = f_q(h_i)
//! α_ji  = softmax_j(q_i · k_ji / √D)
//! h_i'  = f_h(Σ_j α_ji m_ji) + h_i
//! ```
//!
//! Receivers without incoming edges keep their state unchanged.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Forward, Initializer, Linear, Mlp2, NormMode, ParamSet};
use crate::autodiff::tape::Var;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::graph::{
    Edge, FeatureWidths, Layout, MultimodalSemanticGraph, NodeType, RelationVocab, Side,
};
use crate::scalar::Scalar;

/// Optimizer group of the context-text projection (the encoder side).
pub const ENCODER_GROUP: usize = 0;
/// Optimizer group of every other parameter.
pub const GNN_GROUP: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Two modality GNNs; the fused context state is written back every layer.
    #[default]
    Bidirectional,
    /// Two modality GNNs; the context node only sends messages.
    Unidirectional,
    /// One GNN over the merged graph.
    Single,
    /// One GNN over the merged graph plus aligned scene–concept edges.
    SingleCrossModal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub layers: usize,
    pub hidden: usize,
    pub norm_mode: NormMode,
    pub fusion: Fusion,
    pub aggregation: Aggregation,
    pub widths: FeatureWidths,
    pub relations: RelationVocab,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden: 16,
            norm_mode: NormMode::Batch,
            fusion: Fusion::Bidirectional,
            aggregation: Aggregation::Sum,
            widths: FeatureWidths {
                scene: 2048,
                concept: 1024,
                text: 1024,
            },
            relations: RelationVocab::new(),
        }
    }
}

impl GnnConfig {
    pub fn check(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("GNN needs at least one layer"));
        }
        if self.hidden < 2 {
            return Err(Error::invalid(format!(
                "hidden width must be at least 2, got {}",
                self.hidden
            )));
        }
        Ok(())
    }

    /// Width of the relation-embedding input `[e ‖ u_src ‖ u_dst]`.
    pub fn relation_input(&self) -> usize {
        self.relations.len() + 2 * NodeType::COUNT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub fr: Mlp2,
    pub fm: Linear,
    pub fh: Mlp2,
    pub fq: Linear,
    pub fk: Linear,
}

impl LayerParams {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Initializer,
        name: &str,
        config: &GnnConfig,
    ) -> Self {
        let d = config.hidden;
        let ri = config.relation_input();
        Self {
            fr: Mlp2::new(
                params,
                init,
                &format!("{name}.fr"),
                ri,
                d,
                d,
                NormMode::None,
                GNN_GROUP,
            ),
            fm: Linear::new(params, init, &format!("{name}.fm"), 2 * d, d, GNN_GROUP),
            fh: Mlp2::new(
                params,
                init,
                &format!("{name}.fh"),
                d,
                d,
                d,
                config.norm_mode,
                GNN_GROUP,
            ),
            fq: Linear::new(params, init, &format!("{name}.fq"), d, d, GNN_GROUP),
            fk: Linear::new(params, init, &format!("{name}.fk"), 2 * d, d, GNN_GROUP),
        }
    }
}

/// Input projections into the shared hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projections {
    pub s: Linear,
    pub c: Linear,
    pub z: Linear,
    pub p: Linear,
}

impl Projections {
    fn for_type(&self, t: NodeType) -> &Linear {
        match t {
            NodeType::S => &self.s,
            NodeType::P => &self.p,
            NodeType::C | NodeType::Q => &self.c,
            NodeType::Z => &self.z,
        }
    }
}

/// All parameter handles of the GNN encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Gnn {
    pub config: GnnConfig,
    pub proj: Projections,
    pub scene: Vec<LayerParams>,
    pub concept: Vec<LayerParams>,
    pub single: Vec<LayerParams>,
    pub fz: Option<Linear>,
}

impl Gnn {
    pub fn new<T: Scalar>(
        config: GnnConfig,
        params: &mut ParamSet<T>,
        init: &mut Initializer,
    ) -> Result<Self> {
        config.check()?;
        let d = config.hidden;
        let w = config.widths;
        let proj = Projections {
            s: Linear::new(params, init, "proj.s", w.scene, d, GNN_GROUP),
            c: Linear::new(params, init, "proj.c", w.concept, d, GNN_GROUP),
            z: Linear::new(params, init, "proj.z", w.text, d, ENCODER_GROUP),
            p: Linear::new(params, init, "proj.p", w.scene, d, GNN_GROUP),
        };
        let stack = |params: &mut ParamSet<T>,
                     init: &mut Initializer,
                     which: &str|
         -> Vec<LayerParams> {
            (0..config.layers)
                .map(|k| LayerParams::new(params, init, &format!("gnn.{which}.layer{k}"), &config))
                .collect()
        };
        let (scene, concept, single, fz) = match config.fusion {
            Fusion::Bidirectional => {
                let s = stack(params, init, "scene");
                let c = stack(params, init, "concept");
                let fz = Linear::new(params, init, "fusion.fz", 2 * d, d, GNN_GROUP);
                (s, c, Vec::new(), Some(fz))
            }
            Fusion::Unidirectional => {
                let s = stack(params, init, "scene");
                let c = stack(params, init, "concept");
                (s, c, Vec::new(), None)
            }
            Fusion::Single | Fusion::SingleCrossModal => {
                (Vec::new(), Vec::new(), stack(params, init, "single"), None)
            }
        };
        Ok(Self {
            config,
            proj,
            scene,
            concept,
            single,
            fz,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Precomputes index structures and constant inputs for one graph.
    pub fn prepare<T: Scalar>(&self, g: &MultimodalSemanticGraph) -> Result<PreparedGraph<T>> {
        PreparedGraph::new(g, &self.config)
    }

    /// Projects raw features and runs all layers.
    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        g: &PreparedGraph<T>,
    ) -> Result<GnnOutput> {
        self.forward_traced(fwd, g, None)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        g: &PreparedGraph<T>,
        mut trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<GnnOutput> {
        if g.fusion != self.config.fusion {
            return Err(Error::invalid(format!(
                "graph prepared for {:?} fusion, model uses {:?}",
                g.fusion, self.config.fusion
            )));
        }
        let initial = self.project(fwd, g)?;
        let mut h = initial;
        let mode = self.config.aggregation;
        for k in 0..self.config.layers {
            match self.config.fusion {
                Fusion::Single | Fusion::SingleCrossModal => {
                    h = layer_forward(
                        fwd,
                        &self.single[k],
                        &g.views[0],
                        h,
                        mode,
                        trace_for(&mut trace, ViewKind::Single, k),
                    )?;
                }
                Fusion::Bidirectional | Fusion::Unidirectional => {
                    let hs = layer_forward(
                        fwd,
                        &self.scene[k],
                        &g.views[0],
                        h,
                        mode,
                        trace_for(&mut trace, ViewKind::Scene, k),
                    )?;
                    let hc = layer_forward(
                        fwd,
                        &self.concept[k],
                        &g.views[1],
                        h,
                        mode,
                        trace_for(&mut trace, ViewKind::Concept, k),
                    )?;
                    let mut parts = vec![hs, hc];
                    if let Some(fz) = &self.fz {
                        let zi: Arc<[usize]> = vec![g.z].into();
                        let zs = fwd.tape.gather_rows(hs, zi.clone())?;
                        let zc = fwd.tape.gather_rows(hc, zi)?;
                        let zz = fwd.tape.concat_cols(zs, zc)?;
                        parts.push(fz.forward(fwd, zz)?);
                    }
                    let stacked = fwd.tape.concat_rows(&parts)?;
                    h = fwd.tape.gather_rows(stacked, g.pick.clone())?;
                }
            }
        }
        Ok(GnnOutput { initial, states: h })
    }

    fn project<T: Scalar>(&self, fwd: &mut Forward<'_, T>, g: &PreparedGraph<T>) -> Result<Var> {
        let mut parts = Vec::with_capacity(g.inputs.len());
        for (t, x) in &g.inputs {
            let x = fwd.tape.constant(x.clone());
            parts.push(self.proj.for_type(*t).forward(fwd, x)?);
        }
        let stacked = fwd.tape.concat_rows(&parts)?;
        Ok(fwd.tape.gather_rows(stacked, g.input_order.clone())?)
    }
}

fn trace_for<'a>(
    trace: &'a mut Option<&mut Vec<AttentionTrace>>,
    view: ViewKind,
    layer: usize,
) -> Option<(&'a mut Vec<AttentionTrace>, ViewKind, usize)> {
    trace.as_deref_mut().map(|t| (t, view, layer))
}

/// Node states before the first layer and after the last one, both `[n, D]`.
#[derive(Debug, Clone, Copy)]
pub struct GnnOutput {
    pub initial: Var,
    pub states: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Scene,
    Concept,
    Single,
}

/// Attention weights of one view at one layer, one entry per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub view: ViewKind,
    pub layer: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub alpha: Vec<f64>,
}

/// Edge subset processed by one GNN, with constant per-edge inputs.
#[derive(Debug, Clone)]
pub struct GraphView<T> {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// Receiver position of each edge's destination.
    pub dst_local: Arc<[usize]>,
    /// Nodes with at least one incoming edge, ascending.
    pub receivers: Arc<[usize]>,
    /// Distinct `[e ‖ u_src ‖ u_dst]` one-hot rows, `[u, R + 2|T|]`.
    pub relation_rows: Tensor<T>,
    /// Row of `relation_rows` used by each edge.
    pub relation_index: Arc<[usize]>,
    /// `[n_receivers]` reciprocal in-degrees.
    pub inv_degree: Tensor<T>,
}

impl<T: Scalar> GraphView<T> {
    pub fn new(
        g: &MultimodalSemanticGraph,
        edges: &[&Edge],
        relations: &RelationVocab,
    ) -> Result<Self> {
        let n = g.len();
        let m = edges.len();
        let width = relations.len() + 2 * NodeType::COUNT;
        let mut keys: Vec<(usize, usize, usize)> = Vec::new();
        let mut relation_index = Vec::with_capacity(m);
        let mut degree = vec![0usize; n];
        for e in edges {
            let rel = relations
                .id(&e.relation)
                .ok_or_else(|| Error::UnknownRelation(e.relation.clone()))?;
            let key = (
                rel,
                g.nodes[e.src].node_type.index(),
                g.nodes[e.dst].node_type.index(),
            );
            let row = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            };
            relation_index.push(row);
            degree[e.dst] += 1;
        }
        let mut onehot = vec![T::zero(); keys.len().max(1) * width];
        for (row, &(rel, s, d)) in onehot.chunks_exact_mut(width).zip(&keys) {
            row[rel] = T::one();
            row[relations.len() + s] = T::one();
            row[relations.len() + NodeType::COUNT + d] = T::one();
        }
        let receivers: Vec<usize> = (0..n).filter(|&i| degree[i] > 0).collect();
        let mut local = vec![usize::MAX; n];
        for (k, &i) in receivers.iter().enumerate() {
            local[i] = k;
        }
        let inv: Vec<T> = receivers
            .iter()
            .map(|&i| T::one() / T::lit(degree[i] as f64))
            .collect();
        Ok(Self {
            src: edges.iter().map(|e| e.src).collect(),
            dst: edges.iter().map(|e| e.dst).collect(),
            dst_local: edges.iter().map(|e| local[e.dst]).collect(),
            inv_degree: Tensor::from_vec(
                vec![inv.len().max(1)],
                if inv.is_empty() { vec![T::zero()] } else { inv },
            )?,
            receivers: receivers.into(),
            relation_rows: Tensor::from_vec(vec![keys.len().max(1), width], onehot)?,
            relation_index: relation_index.into(),
        })
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }
}

/// Graph-specific constants for one forward pass configuration.
#[derive(Debug, Clone)]
pub struct PreparedGraph<T> {
    pub fusion: Fusion,
    pub n: usize,
    pub node_types: Vec<NodeType>,
    /// Raw features grouped by projection, in `NodeType::ALL` order.
    pub inputs: Vec<(NodeType, Tensor<T>)>,
    /// Maps grouped rows back to node order.
    pub input_order: Arc<[usize]>,
    pub views: Vec<GraphView<T>>,
    /// Row selection from `[H_scene; H_concept; h_z]` after each layer.
    pub pick: Arc<[usize]>,
    pub z: usize,
    pub p: Option<usize>,
    pub scene_entities: Vec<usize>,
    pub concept_nodes: Vec<usize>,
}

impl<T: Scalar> PreparedGraph<T> {
    pub fn new(g: &MultimodalSemanticGraph, config: &GnnConfig) -> Result<Self> {
        let n = g.len();
        if n == 0 {
            return Err(Error::invalid("empty graph"));
        }
        let z = g
            .context_node()
            .ok_or_else(|| Error::invalid("graph has no context node"))?;
        let fusion = config.fusion;
        match (fusion, g.layout) {
            (Fusion::Bidirectional | Fusion::Unidirectional, Layout::TwoModality) => {}
            (Fusion::Single, Layout::TwoModality | Layout::Single) => {}
            (Fusion::SingleCrossModal, Layout::SingleCrossModal) => {}
            (Fusion::SingleCrossModal, _) => {
                return Err(Error::invalid(
                    "single_cross_modal fusion needs a graph with aligned cross-modal edges (missing alignment map)",
                ))
            }
            (f, l) => return Err(Error::invalid(format!("fusion {f:?} cannot run on a {l:?} graph"))),
        }

        let mut inputs = Vec::new();
        let mut order_of = vec![0usize; n];
        let mut offset = 0;
        for (t, width) in [
            (NodeType::Z, config.widths.text),
            (NodeType::P, config.widths.scene),
            (NodeType::S, config.widths.scene),
            (NodeType::C, config.widths.concept),
        ] {
            let members: Vec<usize> = g
                .nodes
                .iter()
                .filter(|nd| nd.node_type == t || (t == NodeType::C && nd.node_type == NodeType::Q))
                .map(|nd| nd.id)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut data = Vec::with_capacity(members.len() * width);
            for (k, &i) in members.iter().enumerate() {
                let f = &g.nodes[i].feature;
                if f.len() != width {
                    return Err(Error::FeatureWidth {
                        key: g.nodes[i].feature_ref.clone(),
                        expected: width,
                        got: f.len(),
                    });
                }
                data.extend(f.iter().map(|&v| T::lit(v)));
                order_of[i] = offset + k;
            }
            offset += members.len();
            inputs.push((t, Tensor::from_vec(vec![members.len(), width], data)?));
        }

        let side = |i: usize| g.nodes[i].node_type.side();
        let views = match fusion {
            Fusion::Single | Fusion::SingleCrossModal => {
                let all: Vec<&Edge> = g.edges.iter().collect();
                vec![GraphView::new(g, &all, &config.relations)?]
            }
            Fusion::Bidirectional | Fusion::Unidirectional => {
                let frozen = fusion == Fusion::Unidirectional;
                let keep = |e: &&Edge, excluded: Side| {
                    side(e.src) != excluded && side(e.dst) != excluded && !(frozen && e.dst == z)
                };
                let scene: Vec<&Edge> = g.edges.iter().filter(|e| keep(e, Side::Concept)).collect();
                let concept: Vec<&Edge> = g.edges.iter().filter(|e| keep(e, Side::Scene)).collect();
                vec![
                    GraphView::new(g, &scene, &config.relations)?,
                    GraphView::new(g, &concept, &config.relations)?,
                ]
            }
        };
        let has_fz = fusion == Fusion::Bidirectional;
        let pick: Vec<usize> = (0..n)
            .map(|i| match side(i) {
                Side::Scene => i,
                Side::Concept => n + i,
                Side::Context if has_fz => 2 * n,
                Side::Context => i,
            })
            .collect();
        Ok(Self {
            fusion,
            n,
            node_types: g.nodes.iter().map(|nd| nd.node_type).collect(),
            inputs,
            input_order: order_of.into(),
            views,
            pick: pick.into(),
            z,
            p: g.qa_concept_node(),
            scene_entities: g.scene_entities(),
            concept_nodes: g.concept_nodes(),
        })
    }
}

/// `r = f_r([e ‖ u_src ‖ u_dst])` for a single edge.
pub fn relation_embedding<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    fr: &Mlp2,
    relation: &[T],
    src_type: &[T],
    dst_type: &[T],
) -> Result<Var> {
    let mut row = Vec::with_capacity(relation.len() + src_type.len() + dst_type.len());
    row.extend_from_slice(relation);
    row.extend_from_slice(src_type);
    row.extend_from_slice(dst_type);
    if row.len() != fr.first.input {
        return Err(crate::error::TensorError::ShapeMismatch {
            op: "relation_embedding",
            left: vec![1, row.len()],
            right: vec![fr.first.input, fr.first.output],
        }
        .into());
    }
    let x = fwd
        .tape
        .constant(Tensor::from_vec(vec![1, row.len()], row)?);
    Ok(fr.forward(fwd, x)?)
}

/// One attention message-passing layer over `view`; returns `[n, D]`.
pub fn layer_forward<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    lp: &LayerParams,
    view: &GraphView<T>,
    h: Var,
    aggregation: Aggregation,
    trace: Option<(&mut Vec<AttentionTrace>, ViewKind, usize)>,
) -> Result<Var> {
    if view.edge_count() == 0 {
        return Ok(h);
    }
    let d = fwd.tape.value(h).cols();
    let n_recv = view.receivers.len();
    let rel_in = fwd.tape.constant(view.relation_rows.clone());
    let r_rows = lp.fr.forward(fwd, rel_in)?;
    // f([h_j ‖ r_ji]) for f_m and f_k, gathered per edge after the matmul
    let msg = lp.fm.forward_gathered_pair(
        fwd,
        h,
        view.src.clone(),
        r_rows,
        view.relation_index.clone(),
    )?;
    let key = lp.fk.forward_gathered_pair(
        fwd,
        h,
        view.src.clone(),
        r_rows,
        view.relation_index.clone(),
    )?;
    let q = lp.fq.forward(fwd, h)?;
    let qi = fwd.tape.gather_rows(q, view.dst.clone())?;
    let logits = fwd.tape.row_dot(qi, key)?;
    let logits = fwd.tape.scale(logits, T::one() / T::lit(d as f64).sqrt())?;
    let alpha = fwd
        .tape
        .segment_softmax(logits, view.dst_local.clone(), n_recv)?;
    if let Some((sink, kind, layer)) = trace {
        sink.push(AttentionTrace {
            view: kind,
            layer,
            src: view.src.to_vec(),
            dst: view.dst.to_vec(),
            alpha: fwd.tape.value(alpha).to_f64_vec(),
        });
    }
    let weighted = fwd.tape.row_scale(msg, alpha)?;
    let mut agg = fwd
        .tape
        .scatter_add_rows(weighted, view.dst_local.clone(), n_recv)?;
    if aggregation == Aggregation::Mean {
        let inv = fwd.tape.constant(view.inv_degree.clone());
        agg = fwd.tape.row_scale(agg, inv)?;
    }
    let update = lp.fh.forward(fwd, agg)?;
    Ok(fwd.tape.index_add_rows(h, update, view.receivers.clone())?)
}
