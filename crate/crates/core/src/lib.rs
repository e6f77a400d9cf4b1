//! Multimodal semantic-graph engine: graph construction from scene triples,
//! a concept knowledge graph and QA text, a relation-aware attention GNN
//! with bidirectional context fusion, and answer scoring.

pub mod answer;
pub mod autodiff;
pub mod builder;
pub mod error;
pub mod graph;
pub mod harness;
pub mod knowledge;
pub mod mrgat;
pub mod scalar;

pub use error::{Error, Result, TensorError};
pub use graph::{MultimodalSemanticGraph, NodeType, RelationVocab};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamSet = autodiff::ParamSet<f64>;
