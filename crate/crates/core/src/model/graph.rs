//! The compacted view of one inference graph that the model runs on.
//!
//! Only relations with at least one fact become relation-graph nodes, and only
//! entities that occur in facts or queries become entity nodes. A query whose
//! relation has no fact in the graph gets its own two extra relation nodes,
//! connected through text similarity alone.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::Array2;

use crate::kg::{KnowledgeGraph, Triple};
use crate::relgraph::{self, SparsifierPolicy, StructuralRelationGraph, TextualRelationGraph};
use crate::text::EmbeddingTable;
use crate::{Error, Result};

/// Edge lists of both relation graphs over the same node set.
#[derive(Debug)]
pub struct RelationContext {
    pub num_nodes: usize,
    pub structural: StructuralRelationGraph,
    pub textual: Option<TextualRelationGraph>,
    /// `num_nodes × d_text`, present iff `textual` is.
    pub text: Option<Array2<f64>>,
}

impl RelationContext {
    fn new(structural: StructuralRelationGraph, textual: Option<(TextualRelationGraph, Array2<f64>)>) -> Self {
        let (textual, text) = textual.map_or((None, None), |(g, t)| (Some(g), Some(t)));
        Self {
            num_nodes: structural.num_nodes(),
            structural,
            textual,
            text,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QueryNode {
    pub context: Arc<RelationContext>,
    pub node: usize,
    /// True when the relation has no fact in the graph.
    pub extended: bool,
}

#[derive(Clone)]
struct TextSource {
    table: Arc<EmbeddingTable>,
    policy: SparsifierPolicy,
}

pub struct InferenceGraph {
    entities: Vec<usize>,
    entity_index: HashMap<usize, usize>,
    relations: Vec<usize>,
    relation_index: HashMap<usize, usize>,
    /// Augmented local facts: relation `r` inverse is `r + num_relations()`.
    facts: Vec<Triple>,
    fact_index: HashMap<Triple, usize>,
    pub(crate) src: Vec<usize>,
    pub(crate) dst: Vec<usize>,
    pub(crate) rel: Vec<usize>,
    base: Arc<RelationContext>,
    text: Option<TextSource>,
    extensions: Mutex<HashMap<usize, Arc<RelationContext>>>,
}

impl std::fmt::Debug for InferenceGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InferenceGraph")
            .field("entities", &self.entities.len())
            .field("relations", &self.relations.len())
            .field("facts", &self.facts.len())
            .field("text", &self.text.is_some())
            .finish()
    }
}

impl InferenceGraph {
    /// `extra_entities` are query entities that must be scorable even without facts.
    pub fn new(
        graph: &KnowledgeGraph,
        extra_entities: impl IntoIterator<Item = usize>,
        text: Option<(Arc<EmbeddingTable>, SparsifierPolicy)>,
    ) -> Result<Self> {
        let mut entities = graph.active_entities();
        entities.extend(extra_entities);
        entities.sort_unstable();
        entities.dedup();
        let entity_index: HashMap<usize, usize> = entities.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let relations = graph.active_relations();
        let relation_index: HashMap<usize, usize> = relations.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let local = KnowledgeGraph::new(
            entities.len(),
            relations.len(),
            graph
                .facts()
                .iter()
                .map(|t| Triple::new(entity_index[&t.head], relation_index[&t.relation], entity_index[&t.tail])),
        )?;
        let aug = local.augment();
        let facts = aug.facts().to_vec();
        let fact_index = facts.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        let structural = relgraph::build_structural(&aug);

        let text = match text {
            None => None,
            Some((table, policy)) => {
                policy.validate()?;
                if let Some(&r) = relations.iter().find(|&&r| r >= table.num_base_relations()) {
                    return Err(Error::Validation(format!(
                        "embedding table covers {} relations but the graph uses relation id {r}",
                        table.num_base_relations()
                    )));
                }
                Some(TextSource { table, policy })
            }
        };
        let textual = match &text {
            None => None,
            Some(src) => {
                let rows = src.table.select(&relations);
                Some((relgraph::build_textual(&rows, src.policy)?, rows))
            }
        };
        Ok(Self {
            src: facts.iter().map(|t| t.head).collect(),
            dst: facts.iter().map(|t| t.tail).collect(),
            rel: facts.iter().map(|t| t.relation).collect(),
            entities,
            entity_index,
            relations,
            relation_index,
            facts,
            fact_index,
            base: Arc::new(RelationContext::new(structural, textual)),
            text,
            extensions: Mutex::new(HashMap::new()),
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Number of base relations with at least one fact.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &[usize] {
        &self.entities
    }

    pub fn relations(&self) -> &[usize] {
        &self.relations
    }

    pub fn facts(&self) -> &[Triple] {
        &self.facts
    }

    pub fn has_text(&self) -> bool {
        self.text.is_some()
    }

    pub fn base_context(&self) -> &Arc<RelationContext> {
        &self.base
    }

    pub fn local_entity(&self, global: usize) -> Option<usize> {
        self.entity_index.get(&global).copied()
    }

    pub fn local_relation(&self, global: usize) -> Option<usize> {
        self.relation_index.get(&global).copied()
    }

    /// Edge index of an augmented local fact.
    pub fn fact_position(&self, t: &Triple) -> Option<usize> {
        self.fact_index.get(t).copied()
    }

    /// Relation-graph node for querying global relation `relation` (or its inverse).
    pub fn query_node(&self, relation: usize, inverse: bool) -> Result<QueryNode> {
        if let Some(r) = self.local_relation(relation) {
            return Ok(QueryNode {
                context: self.base.clone(),
                node: if inverse { r + self.relations.len() } else { r },
                extended: false,
            });
        }
        let ctx = self.extension(relation)?;
        let n = self.base.num_nodes;
        Ok(QueryNode {
            context: ctx,
            node: if inverse { n + 1 } else { n },
            extended: true,
        })
    }

    fn extension(&self, relation: usize) -> Result<Arc<RelationContext>> {
        if let Some(c) = self.extensions.lock().expect("poisoned").get(&relation) {
            return Ok(c.clone());
        }
        let ctx = match (&self.text, &self.base.textual, &self.base.text) {
            (Some(src), Some(textual), Some(rows)) => {
                let total = src.table.num_base_relations();
                if relation >= total {
                    return Err(Error::RelationGraph(format!(
                        "query relation {relation} has no text embedding"
                    )));
                }
                let q = src.table.select(&[relation]);
                let (s, t) = relgraph::extend_for_query(&self.base.structural, textual, rows, &q, src.policy)?;
                let all = ndarray::concatenate(ndarray::Axis(0), &[rows.view(), q.view()])
                    .map_err(|e| Error::Shape(e.to_string()))?;
                RelationContext::new(s, Some((t, all)))
            }
            _ => RelationContext::new(self.base.structural.with_isolated_nodes(2), None),
        };
        let ctx = Arc::new(ctx);
        self.extensions.lock().expect("poisoned").insert(relation, ctx.clone());
        Ok(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TextVariant;
    use ndarray::array;

    fn graph() -> KnowledgeGraph {
        // Relation 1 and entity 3 are unused.
        KnowledgeGraph::new(5, 3, [Triple::new(0, 0, 1), Triple::new(1, 2, 4)]).unwrap()
    }

    #[test]
    fn compacts_active_relations_and_entities() {
        let g = InferenceGraph::new(&graph(), [2], None).unwrap();
        assert_eq!(g.entities(), &[0, 1, 2, 4]);
        assert_eq!(g.relations(), &[0, 2]);
        assert_eq!(g.num_entities(), 4);
        assert_eq!(g.facts().len(), 4);
        assert_eq!(g.base_context().num_nodes, 4);
        let q = g.query_node(2, true).unwrap();
        assert_eq!(q.node, 3);
        assert!(!q.extended);
    }

    #[test]
    fn unseen_query_relation_gets_extension_nodes() {
        let table = EmbeddingTable {
            variant: TextVariant::RelName,
            data: array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-1.0, 0.0], [-0.9, -0.1], [0.0, -1.0]],
        };
        let policy = SparsifierPolicy::Threshold { threshold: 0.8 };
        let g = InferenceGraph::new(&graph(), [], Some((Arc::new(table), policy))).unwrap();
        let q = g.query_node(1, false).unwrap();
        assert!(q.extended);
        assert_eq!(q.node, 4);
        assert_eq!(q.context.num_nodes, 6);
        let t = q.context.textual.as_ref().unwrap();
        // Relation 1 is textually close to relation 0 (local node 0).
        assert!(t.weight(4, 0).unwrap() > 0.99);
        assert_eq!(q.context.text.as_ref().unwrap().nrows(), 6);
        // Structure-only graphs still extend, with isolated nodes.
        let s = InferenceGraph::new(&graph(), [], None).unwrap();
        let q = s.query_node(1, true).unwrap();
        assert_eq!((q.node, q.context.num_nodes), (5, 6));
    }
}
