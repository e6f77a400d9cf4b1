//! Typed multimodal semantic graph: a scene subgraph and a concept subgraph
//! joined by the QA-context node, plus structural validation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REL_QA_CONCEPT: &str = "qa_concept";
pub const REL_QUESTION: &str = "question";
pub const REL_ANSWER: &str = "answer";
pub const REL_IMAGE: &str = "image";
pub const REL_CROSS_MODAL: &str = "cross_modal";
pub const INV_SUFFIX: &str = "_inv";

pub const DEFAULT_SCENE_CAP: usize = 20;
pub const DEFAULT_CONCEPT_CAP: usize = 60;

/// Name of the reverse companion of `relation`.
pub fn inverse_relation(relation: &str) -> String {
    match relation.strip_suffix(INV_SUFFIX) {
        Some(base) => base.to_string(),
        None => format!("{relation}{INV_SUFFIX}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    /// QA-context super node.
    Z,
    /// QA-concept super node.
    P,
    /// Scene entity.
    S,
    /// Question entity.
    Q,
    /// Concept entity.
    C,
}

/// Which side of the graph a node lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Scene,
    Concept,
    Context,
}

impl NodeType {
    pub const COUNT: usize = 5;
    pub const ALL: [NodeType; 5] = [
        NodeType::Z,
        NodeType::P,
        NodeType::S,
        NodeType::Q,
        NodeType::C,
    ];

    /// Position of this type in the one-hot encoding.
    pub fn index(self) -> usize {
        match self {
            NodeType::Z => 0,
            NodeType::P => 1,
            NodeType::S => 2,
            NodeType::Q => 3,
            NodeType::C => 4,
        }
    }

    pub fn side(self) -> Side {
        match self {
            NodeType::Z => Side::Context,
            NodeType::P | NodeType::S => Side::Scene,
            NodeType::Q | NodeType::C => Side::Concept,
        }
    }

    pub fn is_concept(self) -> bool {
        self.side() == Side::Concept
    }
}

/// A relation type of the shared vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub name: String,
    pub id: usize,
    pub modality: Side,
}

/// Dense relation-id assignment. Reserved context relations and their
/// reverse companions always occupy the first ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<RelationType>", into = "Vec<RelationType>")]
pub struct RelationVocab {
    types: Vec<RelationType>,
    index: HashMap<String, usize>,
}

impl From<Vec<RelationType>> for RelationVocab {
    fn from(types: Vec<RelationType>) -> Self {
        let mut v = RelationVocab {
            types: Vec::new(),
            index: HashMap::new(),
        };
        for t in types {
            v.insert(&t.name, t.modality);
        }
        v.ensure_reserved();
        v
    }
}

impl From<RelationVocab> for Vec<RelationType> {
    fn from(v: RelationVocab) -> Self {
        v.types
    }
}

impl Default for RelationVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl RelationVocab {
    pub fn new() -> Self {
        let mut v = RelationVocab {
            types: Vec::new(),
            index: HashMap::new(),
        };
        v.ensure_reserved();
        v
    }

    fn ensure_reserved(&mut self) {
        for name in [
            REL_QA_CONCEPT,
            REL_QUESTION,
            REL_ANSWER,
            REL_IMAGE,
            REL_CROSS_MODAL,
        ] {
            self.add(name, Side::Context);
        }
    }

    fn insert(&mut self, name: &str, modality: Side) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.types.len();
        self.types.push(RelationType {
            name: name.to_string(),
            id,
            modality,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Adds `name` and its reverse companion; returns the id of `name`.
    pub fn add(&mut self, name: &str, modality: Side) -> usize {
        let id = self.insert(name, modality);
        self.insert(&inverse_relation(name), modality);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    /// True when nothing beyond the reserved context relations is present.
    pub fn reserved_only(&self) -> bool {
        self.types.iter().all(|t| t.modality == Side::Context)
    }

    pub fn types(&self) -> &[RelationType] {
        &self.types
    }

    /// Vocabulary covering every relation used by `graphs`, in sorted
    /// order after the reserved entries.
    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a MultimodalSemanticGraph>) -> Self {
        let mut names: BTreeSet<(Side, String)> = BTreeSet::new();
        for g in graphs {
            for e in &g.edges {
                let base = e
                    .relation
                    .strip_suffix(INV_SUFFIX)
                    .unwrap_or(&e.relation)
                    .to_string();
                names.insert((g.edge_side(e), base));
            }
        }
        let mut v = Self::new();
        for (side, name) in names {
            v.add(&name, side);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub node_type: NodeType,
    pub label: String,
    pub feature_ref: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: String,
}

/// Which message-passing architecture a graph is laid out for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Two modality GNNs sharing only the context node.
    #[default]
    TwoModality,
    /// One GNN over the merged edge set.
    Single,
    /// One GNN with additional direct scene–concept edges.
    SingleCrossModal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityFilter {
    All,
    Scene,
    Concept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Single,
    SingleWithCrossModal,
}

/// Expected raw feature widths per node side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureWidths {
    pub scene: usize,
    pub concept: usize,
    pub text: usize,
}

impl FeatureWidths {
    pub fn for_type(&self, t: NodeType) -> usize {
        match t.side() {
            Side::Scene => self.scene,
            Side::Concept => self.concept,
            Side::Context => self.text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphLimits {
    pub max_scene: usize,
    pub max_concept: usize,
    pub widths: Option<FeatureWidths>,
}

impl Default for GraphLimits {
    fn default() -> Self {
        Self {
            max_scene: DEFAULT_SCENE_CAP,
            max_concept: DEFAULT_CONCEPT_CAP,
            widths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SceneCap {
        count: usize,
        cap: usize,
    },
    ConceptCap {
        count: usize,
        cap: usize,
    },
    ContextNodeCount(usize),
    QaConceptNodeCount(usize),
    NodeId {
        position: usize,
        id: usize,
    },
    SelfLoop {
        node: usize,
        relation: String,
    },
    DanglingEdge {
        src: usize,
        dst: usize,
    },
    MissingCompanion {
        src: usize,
        dst: usize,
        relation: String,
    },
    QaConceptNotLinked {
        scene_node: usize,
    },
    ImageNotLinked {
        scene_node: usize,
    },
    MisusedRelation {
        src: usize,
        dst: usize,
        relation: String,
    },
    CrossModalEdge {
        src: usize,
        dst: usize,
    },
    FeatureWidth {
        node: usize,
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SceneCap { count, cap } => {
                write!(
                    f,
                    "scene node cap {cap} exceeded ({count} scene entity nodes)"
                )
            }
            Violation::ConceptCap { count, cap } => {
                write!(f, "concept node cap {cap} exceeded ({count} concept nodes)")
            }
            Violation::ContextNodeCount(n) => {
                write!(f, "expected exactly one context node, found {n}")
            }
            Violation::QaConceptNodeCount(n) => {
                write!(f, "at most one QA-concept node allowed, found {n}")
            }
            Violation::NodeId { position, id } => {
                write!(f, "node at position {position} has id {id}")
            }
            Violation::SelfLoop { node, relation } => {
                write!(f, "self-loop on node {node} ({relation})")
            }
            Violation::DanglingEdge { src, dst } => {
                write!(f, "edge {src}->{dst} references a missing node")
            }
            Violation::MissingCompanion { src, dst, relation } => {
                write!(f, "edge {src}->{dst} ({relation}) has no reverse companion")
            }
            Violation::QaConceptNotLinked { scene_node } => {
                write!(f, "QA-concept node not linked to scene node {scene_node}")
            }
            Violation::ImageNotLinked { scene_node } => {
                write!(
                    f,
                    "context node not linked to scene node {scene_node} by an image edge"
                )
            }
            Violation::MisusedRelation { src, dst, relation } => {
                write!(f, "relation {relation} not allowed on edge {src}->{dst}")
            }
            Violation::CrossModalEdge { src, dst } => {
                write!(
                    f,
                    "direct scene-concept edge {src}->{dst} not allowed in this layout"
                )
            }
            Violation::FeatureWidth {
                node,
                expected,
                got,
            } => {
                write!(f, "node {node} feature width {got}, expected {expected}")
            }
        }
    }
}

/// Scene subgraph, concept subgraph, and the two super nodes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultimodalSemanticGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub layout: Layout,
}

impl MultimodalSemanticGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(
        &mut self,
        node_type: NodeType,
        label: &str,
        feature_ref: &str,
        feature: Vec<f64>,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            node_type,
            label: label.to_string(),
            feature_ref: feature_ref.to_string(),
            feature,
        });
        id
    }

    /// Adds `src -> dst` and its reverse companion.
    pub fn connect(&mut self, src: usize, dst: usize, relation: &str) {
        self.edges.push(Edge {
            src,
            dst,
            relation: relation.to_string(),
        });
        self.edges.push(Edge {
            src: dst,
            dst: src,
            relation: inverse_relation(relation),
        });
    }

    /// Whether an edge pair `src -> dst` with `relation` already exists.
    pub fn has_edge(&self, src: usize, dst: usize, relation: &str) -> bool {
        self.edges
            .iter()
            .any(|e| e.src == src && e.dst == dst && e.relation == relation)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> Result<&Node> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    fn of_type(&self, types: &[NodeType]) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| types.contains(&n.node_type))
            .map(|n| n.id)
            .collect()
    }

    pub fn scene_entities(&self) -> Vec<usize> {
        self.of_type(&[NodeType::S])
    }

    /// Concept-side nodes (types C and Q).
    pub fn concept_nodes(&self) -> Vec<usize> {
        self.of_type(&[NodeType::C, NodeType::Q])
    }

    pub fn context_node(&self) -> Option<usize> {
        self.of_type(&[NodeType::Z]).first().copied()
    }

    pub fn qa_concept_node(&self) -> Option<usize> {
        self.of_type(&[NodeType::P]).first().copied()
    }

    fn side_of(&self, id: usize) -> Side {
        self.nodes[id].node_type.side()
    }

    /// Scene side if neither endpoint is concept-side, concept side if
    /// neither endpoint is scene-side, `Context` for direct cross edges.
    pub fn edge_side(&self, e: &Edge) -> Side {
        let sides = [self.side_of(e.src), self.side_of(e.dst)];
        let scene = sides.contains(&Side::Scene);
        let concept = sides.contains(&Side::Concept);
        match (scene, concept) {
            (true, false) => Side::Scene,
            (false, true) => Side::Concept,
            (false, false) => Side::Context,
            (true, true) => Side::Context,
        }
    }

    pub fn is_cross_modal(&self, e: &Edge) -> bool {
        let sides = [self.side_of(e.src), self.side_of(e.dst)];
        sides.contains(&Side::Scene) && sides.contains(&Side::Concept)
    }

    pub fn scene_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges
            .iter()
            .filter(|e| !self.is_context_relation(&e.relation) && self.edge_side(e) == Side::Scene)
    }

    pub fn concept_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| {
            !self.is_context_relation(&e.relation) && self.edge_side(e) == Side::Concept
        })
    }

    /// Edges carrying the reserved question/answer/image/QA-concept relations.
    pub fn context_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges
            .iter()
            .filter(|e| self.is_context_relation(&e.relation))
    }

    fn is_context_relation(&self, relation: &str) -> bool {
        let base = relation.strip_suffix(INV_SUFFIX).unwrap_or(relation);
        matches!(base, REL_QA_CONCEPT | REL_QUESTION | REL_ANSWER | REL_IMAGE)
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        self.validate_with(&GraphLimits::default())
    }

    /// Checks every structural invariant and reports all violations.
    pub fn validate_with(&self, limits: &GraphLimits) -> std::result::Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        let n = self.nodes.len();
        for (pos, node) in self.nodes.iter().enumerate() {
            if node.id != pos {
                v.push(Violation::NodeId {
                    position: pos,
                    id: node.id,
                });
            }
            if let Some(w) = limits.widths {
                let expected = w.for_type(node.node_type);
                if node.feature.len() != expected {
                    v.push(Violation::FeatureWidth {
                        node: pos,
                        expected,
                        got: node.feature.len(),
                    });
                }
            }
        }
        let scene = self.scene_entities();
        let concept = self.concept_nodes();
        if scene.len() > limits.max_scene {
            v.push(Violation::SceneCap {
                count: scene.len(),
                cap: limits.max_scene,
            });
        }
        if concept.len() > limits.max_concept {
            v.push(Violation::ConceptCap {
                count: concept.len(),
                cap: limits.max_concept,
            });
        }
        let zs = self.of_type(&[NodeType::Z]);
        if zs.len() != 1 {
            v.push(Violation::ContextNodeCount(zs.len()));
        }
        let ps = self.of_type(&[NodeType::P]);
        if ps.len() > 1 {
            v.push(Violation::QaConceptNodeCount(ps.len()));
        }

        let mut present: HashSet<(usize, usize, &str)> = HashSet::new();
        let mut dangling = false;
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                v.push(Violation::DanglingEdge {
                    src: e.src,
                    dst: e.dst,
                });
                dangling = true;
                continue;
            }
            if e.src == e.dst {
                v.push(Violation::SelfLoop {
                    node: e.src,
                    relation: e.relation.clone(),
                });
            }
            present.insert((e.src, e.dst, e.relation.as_str()));
        }
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                continue;
            }
            let inv = inverse_relation(&e.relation);
            if !present.contains(&(e.dst, e.src, inv.as_str())) {
                v.push(Violation::MissingCompanion {
                    src: e.src,
                    dst: e.dst,
                    relation: e.relation.clone(),
                });
            }
            let (st, dt) = (self.nodes[e.src].node_type, self.nodes[e.dst].node_type);
            let base = e.relation.strip_suffix(INV_SUFFIX).unwrap_or(&e.relation);
            let forward = !e.relation.ends_with(INV_SUFFIX);
            let (from, to) = if forward { (st, dt) } else { (dt, st) };
            let ok = match base {
                REL_QA_CONCEPT => from == NodeType::P && to == NodeType::S,
                REL_IMAGE => from == NodeType::Z && matches!(to, NodeType::S | NodeType::P),
                REL_QUESTION | REL_ANSWER => from == NodeType::Z && to.is_concept(),
                REL_CROSS_MODAL => self.layout == Layout::SingleCrossModal,
                _ => true,
            };
            if !ok {
                v.push(Violation::MisusedRelation {
                    src: e.src,
                    dst: e.dst,
                    relation: e.relation.clone(),
                });
            }
            if self.layout != Layout::SingleCrossModal && self.is_cross_modal(e) {
                v.push(Violation::CrossModalEdge {
                    src: e.src,
                    dst: e.dst,
                });
            }
        }
        if !dangling {
            if let Some(&p) = ps.first() {
                for &s in &scene {
                    if !present.contains(&(p, s, REL_QA_CONCEPT)) {
                        v.push(Violation::QaConceptNotLinked { scene_node: s });
                    }
                }
            }
            if let Some(&z) = zs.first() {
                for &s in &scene {
                    if !present.contains(&(z, s, REL_IMAGE)) {
                        v.push(Violation::ImageNotLinked { scene_node: s });
                    }
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Message senders of `node`: sources of edges ending at `node`.
    ///
    /// In the two-modality layout the context node's neighborhood can be
    /// restricted to one side; the filter is ignored for every other node
    /// and for merged layouts.
    pub fn neighborhood(&self, node: usize, filter: ModalityFilter) -> Result<Vec<(usize, &str)>> {
        let target = self.node(node)?;
        let restrict = target.node_type == NodeType::Z && self.layout == Layout::TwoModality;
        Ok(self
            .edges
            .iter()
            .filter(|e| e.dst == node)
            .filter(|e| {
                if !restrict {
                    return true;
                }
                let side = self.side_of(e.src);
                match filter {
                    ModalityFilter::All => true,
                    ModalityFilter::Scene => side == Side::Scene,
                    ModalityFilter::Concept => side == Side::Concept,
                }
            })
            .map(|e| (e.src, e.relation.as_str()))
            .collect())
    }

    /// Neighbor ids only, order of first appearance.
    pub fn neighbor_ids(&self, node: usize, filter: ModalityFilter) -> Result<Vec<usize>> {
        let mut seen = HashSet::new();
        Ok(self
            .neighborhood(node, filter)?
            .into_iter()
            .map(|(j, _)| j)
            .filter(|j| seen.insert(*j))
            .collect())
    }

    /// Single-GNN ablation layouts. `alignment` lists (scene entity,
    /// concept node) pairs that denote the same notion; it is only used by
    /// the cross-modal variant.
    pub fn to_ablation(
        &self,
        variant: AblationVariant,
        alignment: &[(usize, usize)],
    ) -> Result<Self> {
        let mut g = self.clone();
        match variant {
            AblationVariant::Single => g.layout = Layout::Single,
            AblationVariant::SingleWithCrossModal => {
                g.layout = Layout::SingleCrossModal;
                for &(s, c) in alignment {
                    let (ns, nc) = (self.node(s)?, self.node(c)?);
                    if ns.node_type != NodeType::S || !nc.node_type.is_concept() {
                        return Err(Error::invalid(format!(
                            "alignment pair ({s}, {c}) must join a scene entity and a concept node"
                        )));
                    }
                    if !g.has_edge(s, c, REL_CROSS_MODAL) {
                        g.connect(s, c, REL_CROSS_MODAL);
                    }
                }
            }
        }
        Ok(g)
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.nodes.len();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != n || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::invalid(
                "permutation must be a bijection on node ids",
            ));
        }
        let mut nodes = vec![None; n];
        for (old, node) in self.nodes.iter().enumerate() {
            let mut node = node.clone();
            node.id = perm[old];
            nodes[perm[old]] = Some(node);
        }
        Ok(Self {
            nodes: nodes.into_iter().map(|n| n.expect("bijection")).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    src: perm[e.src],
                    dst: perm[e.dst],
                    relation: e.relation.clone(),
                })
                .collect(),
            layout: self.layout,
        })
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    node_type: n.node_type,
                    label: n.label.clone(),
                    feature_ref: n.feature_ref.clone(),
                })
                .collect(),
            edges: self.edges.clone(),
            layout: self.layout,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("graph serializes")
    }

    /// Rebuilds a graph, resolving each `feature_ref` through `resolve`.
    pub fn from_file(
        file: &GraphFile,
        mut resolve: impl FnMut(&NodeRecord) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for (pos, r) in file.nodes.iter().enumerate() {
            if r.id != pos {
                return Err(Error::Validation(vec![Violation::NodeId {
                    position: pos,
                    id: r.id,
                }]));
            }
            nodes.push(Node {
                id: r.id,
                node_type: r.node_type,
                label: r.label.clone(),
                feature_ref: r.feature_ref.clone(),
                feature: resolve(r)?,
            });
        }
        Ok(Self {
            nodes,
            edges: file.edges.clone(),
            layout: file.layout,
        })
    }
}

/// On-disk graph: features are referenced, never inlined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "is_default_layout")]
    pub layout: Layout,
}

fn is_default_layout(l: &Layout) -> bool {
    *l == Layout::TwoModality
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub label: String,
    pub feature_ref: String,
}

/// Small hand-built graphs shared by tests and examples.
pub mod fixtures {
    use super::*;

    /// Ablation figure topology: z joins v2, v4 on the scene side and c1, c3
    /// on the concept side; v1–v2–v4 and c1–c2, c1–c3 are intra-modal edges.
    pub fn ablation_figure() -> (MultimodalSemanticGraph, HashMap<&'static str, usize>) {
        let mut g = MultimodalSemanticGraph::new();
        let mut ids = HashMap::new();
        let f = |x: f64| vec![x, 1.0 - x];
        ids.insert("z", g.add_node(NodeType::Z, "z", "t:z", f(0.1)));
        for (i, name) in ["v1", "v2", "v3", "v4"].iter().enumerate() {
            ids.insert(
                *name,
                g.add_node(NodeType::S, name, name, f(0.2 + i as f64 * 0.1)),
            );
        }
        for (i, name) in ["c1", "c2", "c3"].iter().enumerate() {
            ids.insert(
                *name,
                g.add_node(NodeType::C, name, name, f(0.7 + i as f64 * 0.05)),
            );
        }
        for v in ["v1", "v2", "v3", "v4"] {
            g.connect(ids["z"], ids[v], REL_IMAGE);
        }
        // The scene side of z is restricted to v2 and v4 by dropping the
        // image edges to v1 and v3 from its receiving side.
        g.edges
            .retain(|e| !(e.dst == ids["z"] && (e.src == ids["v1"] || e.src == ids["v3"])));
        g.edges
            .retain(|e| !(e.src == ids["z"] && (e.dst == ids["v1"] || e.dst == ids["v3"])));
        g.connect(ids["v1"], ids["v2"], "near");
        g.connect(ids["v2"], ids["v4"], "near");
        g.connect(ids["v3"], ids["v4"], "holds");
        g.connect(ids["z"], ids["c1"], REL_ANSWER);
        g.connect(ids["z"], ids["c3"], REL_QUESTION);
        g.connect(ids["c1"], ids["c2"], "related_to");
        g.connect(ids["c1"], ids["c3"], "at_location");
        (g, ids)
    }
}
