//! Knowledge-graph data model: facts, inverse augmentation, text attributes
//! and dataset splits.

mod io;

use std::collections::HashSet;
use std::sync::Arc;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_dataset, read_label_file, read_triple_file, write_dataset, write_triple_file,
    DatasetManifest, HarderInfo, LoadReport,
};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// A set of facts over dense entity and relation ids.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    facts: Vec<Triple>,
    by_relation: Vec<Vec<usize>>,
    by_head: Vec<Vec<usize>>,
    by_tail: Vec<Vec<usize>>,
    duplicates_removed: usize,
}

impl KnowledgeGraph {
    /// Builds a graph, dropping duplicate triples (first occurrence wins).
    pub fn new(
        num_entities: usize,
        num_relations: usize,
        facts: impl IntoIterator<Item = Triple>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        let mut duplicates_removed = 0;
        for t in facts {
            if t.head >= num_entities || t.tail >= num_entities {
                return Err(Error::Validation(format!(
                    "triple {t:?} references an entity outside 0..{num_entities}"
                )));
            }
            if t.relation >= num_relations {
                return Err(Error::Validation(format!(
                    "triple {t:?} references a relation outside 0..{num_relations}"
                )));
            }
            if seen.insert(t) {
                kept.push(t);
            } else {
                duplicates_removed += 1;
            }
        }
        if duplicates_removed > 0 {
            log::warn!("dropped {duplicates_removed} duplicate triple(s)");
        }
        let mut by_relation = vec![Vec::new(); num_relations];
        let mut by_head = vec![Vec::new(); num_entities];
        let mut by_tail = vec![Vec::new(); num_entities];
        for (i, t) in kept.iter().enumerate() {
            by_relation[t.relation].push(i);
            by_head[t.head].push(i);
            by_tail[t.tail].push(i);
        }
        Ok(KnowledgeGraph {
            num_entities,
            num_relations,
            facts: kept,
            by_relation,
            by_head,
            by_tail,
            duplicates_removed,
        })
    }

    pub fn empty(num_entities: usize, num_relations: usize) -> Self {
        Self::new(num_entities, num_relations, std::iter::empty()).expect("empty graph is valid")
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn facts(&self) -> &[Triple] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn duplicates_removed(&self) -> usize {
        self.duplicates_removed
    }

    pub fn facts_with_relation(&self, r: RelationId) -> impl Iterator<Item = &Triple> {
        self.by_relation[r].iter().map(move |&i| &self.facts[i])
    }

    pub fn facts_with_head(&self, e: EntityId) -> impl Iterator<Item = &Triple> {
        self.by_head[e].iter().map(move |&i| &self.facts[i])
    }

    pub fn facts_with_tail(&self, e: EntityId) -> impl Iterator<Item = &Triple> {
        self.by_tail[e].iter().map(move |&i| &self.facts[i])
    }

    /// Relations that have at least one fact, ascending.
    pub fn active_relations(&self) -> Vec<RelationId> {
        (0..self.num_relations)
            .filter(|&r| !self.by_relation[r].is_empty())
            .collect()
    }

    /// Entities that occur in at least one fact, ascending.
    pub fn active_entities(&self) -> Vec<EntityId> {
        (0..self.num_entities)
            .filter(|&e| !self.by_head[e].is_empty() || !self.by_tail[e].is_empty())
            .collect()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.by_head
            .get(t.head)
            .is_some_and(|ix| ix.iter().any(|&i| self.facts[i] == *t))
    }

    /// Returns a copy with entity ids renamed through `perm` (`perm[old] = new`).
    pub fn relabel_entities(&self, perm: &[EntityId]) -> Result<Self> {
        if perm.len() != self.num_entities {
            return Err(Error::Shape(format!(
                "permutation has {} entries for {} entities",
                perm.len(),
                self.num_entities
            )));
        }
        Self::new(
            self.num_entities,
            self.num_relations,
            self.facts
                .iter()
                .map(|t| Triple::new(perm[t.head], t.relation, perm[t.tail])),
        )
    }

    pub fn augment(&self) -> AugmentedKG {
        augment_inverses(self)
    }
}

/// A graph whose relation vocabulary is doubled: id `r + |R|` is the inverse of `r`.
#[derive(Clone, Debug)]
pub struct AugmentedKG {
    base_relations: usize,
    num_entities: usize,
    facts: Vec<Triple>,
}

impl AugmentedKG {
    pub fn base_relations(&self) -> usize {
        self.base_relations
    }

    pub fn num_relations(&self) -> usize {
        2 * self.base_relations
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn facts(&self) -> &[Triple] {
        &self.facts
    }

    pub fn inverse(&self, r: RelationId) -> RelationId {
        inverse_relation(r, self.base_relations)
    }
}

pub fn inverse_relation(r: RelationId, base_relations: usize) -> RelationId {
    if r < base_relations {
        r + base_relations
    } else {
        r - base_relations
    }
}

pub fn augment_inverses(g: &KnowledgeGraph) -> AugmentedKG {
    let n = g.num_relations();
    let mut facts = Vec::with_capacity(2 * g.len());
    facts.extend_from_slice(g.facts());
    facts.extend(
        g.facts()
            .iter()
            .map(|t| Triple::new(t.tail, t.relation + n, t.head)),
    );
    AugmentedKG {
        base_relations: n,
        num_entities: g.num_entities(),
        facts,
    }
}

/// Entity and relation string vocabularies; ids follow first occurrence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    pub entities: IndexSet<String>,
    pub relations: IndexSet<String>,
}

impl Vocabulary {
    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get_index_of(name)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get_index_of(name)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id]
    }

    pub fn intern(&mut self, head: &str, relation: &str, tail: &str) -> Triple {
        let (h, _) = self.entities.insert_full(head.to_owned());
        let (r, _) = self.relations.insert_full(relation.to_owned());
        let (t, _) = self.entities.insert_full(tail.to_owned());
        Triple::new(h, r, t)
    }
}

/// A graph together with its relation labels. Entity labels are carried for
/// completeness but nothing in the model reads them.
#[derive(Clone, Debug)]
pub struct TextAttributedKG {
    pub graph: KnowledgeGraph,
    pub relation_labels: Arc<Vec<String>>,
    pub entity_labels: Option<Arc<Vec<String>>>,
}

impl TextAttributedKG {
    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relation_labels[r]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    BothDirections,
    TailsOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    InductiveEntityRelation,
    InductiveEntity,
    Transductive,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::InductiveEntityRelation => "Inductive e,r",
            Regime::InductiveEntity => "Inductive e",
            Regime::Transductive => "Transductive",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: String,
    pub vocab: Arc<Vocabulary>,
    pub train_graph: TextAttributedKG,
    pub valid_graph: TextAttributedKG,
    pub test_graph: TextAttributedKG,
    pub valid_queries: Vec<Triple>,
    pub test_queries: Vec<Triple>,
    pub task_mode: TaskMode,
    pub regime: Regime,
    pub harder: Option<HarderInfo>,
}

impl DatasetSplit {
    /// Builds a split from string triples, assigning ids by first occurrence in
    /// the order train graph, valid graph, valid queries, test graph, test queries.
    #[allow(clippy::too_many_arguments)]
    pub fn from_labeled(
        name: &str,
        train_graph: &[[&str; 3]],
        valid_graph: Option<&[[&str; 3]]>,
        valid_queries: &[[&str; 3]],
        test_graph: Option<&[[&str; 3]]>,
        test_queries: &[[&str; 3]],
        task_mode: TaskMode,
        regime: Regime,
    ) -> Result<Self> {
        let owned = |xs: &[[&str; 3]]| -> Vec<[String; 3]> {
            xs.iter()
                .map(|t| [t[0].to_owned(), t[1].to_owned(), t[2].to_owned()])
                .collect()
        };
        io::assemble_split(
            name,
            io::RawSplit {
                train_graph: owned(train_graph),
                valid_graph: valid_graph.map(owned),
                valid_queries: owned(valid_queries),
                test_graph: test_graph.map(owned),
                test_queries: owned(test_queries),
            },
            &Default::default(),
            None,
            task_mode,
            regime,
            None,
        )
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.relations.len()
    }

    pub fn relation_labels(&self) -> &Arc<Vec<String>> {
        &self.train_graph.relation_labels
    }

    /// Every fact known anywhere in the dataset: graphs and query sets.
    pub fn known_facts(&self) -> HashSet<Triple> {
        let mut all = HashSet::new();
        for g in [&self.train_graph, &self.valid_graph, &self.test_graph] {
            all.extend(g.graph.facts().iter().copied());
        }
        all.extend(self.valid_queries.iter().copied());
        all.extend(self.test_queries.iter().copied());
        all
    }
}
