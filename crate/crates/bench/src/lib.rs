//! Shared inputs for the benchmarks.

use std::sync::Arc;

use kgfuse_core::kg::{DatasetSplit, KnowledgeGraph, Triple};
use kgfuse_core::model::{InferenceGraph, Model, ModelConfig};
use kgfuse_core::relgraph::SparsifierPolicy;
use kgfuse_core::synthetic::{self, ConceptEmbedder};
use kgfuse_core::text::EmbeddingTable;

/// Deterministic pseudo-random graph (64-bit LCG) with the given sizes.
pub fn random_graph(entities: usize, relations: usize, facts: usize) -> KnowledgeGraph {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = |n: usize| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) % n as u64) as usize
    };
    let facts: Vec<Triple> = (0..facts).map(|_| Triple::new(next(entities), next(relations), next(entities))).collect();
    KnowledgeGraph::new(entities, relations, facts).expect("ids in range")
}

pub struct ScoringFixture {
    pub split: DatasetSplit,
    pub model: Model,
    pub graph: InferenceGraph,
}

/// Untrained reference-width model over the synthetic kinship test graph.
pub fn scoring_fixture() -> ScoringFixture {
    let split = synthetic::kinship_split(12, 0).expect("synthetic split");
    let table: Arc<EmbeddingTable> = Arc::new(synthetic::name_table(&split, &ConceptEmbedder::new(32, 0.2, 0)).expect("table"));
    let model = Model::new(ModelConfig { d_text: 32, ..Default::default() }).expect("model");
    let heads = split.test_queries.iter().map(|q| q.head);
    let graph = InferenceGraph::new(&split.test_graph.graph, heads, Some((table, SparsifierPolicy::Threshold { threshold: 0.8 })))
        .expect("inference graph");
    ScoringFixture { split, model, graph }
}
