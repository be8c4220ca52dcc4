//! Running a model over a split's validation or test queries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rank_filtered, DatasetResults, Direction, QueryResult};
use crate::kg::{DatasetSplit, TaskMode, Triple};
use crate::model::{InferenceGraph, Model};
use crate::relgraph::SparsifierPolicy;
use crate::text::EmbeddingTable;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSide {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub alpha: bool,
    pub parallel: bool,
    /// Heads scored together on one tape.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { alpha: true, parallel: true, chunk: 16 }
    }
}

struct Task {
    order: (usize, Direction),
    query: Triple,
    head: usize,
    answer: usize,
}

pub fn evaluate_split(
    model: &Model,
    split: &DatasetSplit,
    side: EvalSide,
    text: Option<(Arc<EmbeddingTable>, SparsifierPolicy)>,
    opt: &EvalOptions,
) -> Result<DatasetResults> {
    let (graph, queries) = match side {
        EvalSide::Valid => (&split.valid_graph.graph, &split.valid_queries),
        EvalSide::Test => (&split.test_graph.graph, &split.test_queries),
    };
    if queries.is_empty() {
        return Err(Error::Eval(format!("{}: no {side:?} queries", split.name)));
    }
    if opt.alpha && text.is_none() {
        return Err(Error::Config(format!("{}: α = 1 needs a text embedding table", split.name)));
    }
    let text = if opt.alpha { text } else { None };
    let g = InferenceGraph::new(graph, queries.iter().flat_map(|q| [q.head, q.tail]), text)?;

    let known = split.known_facts();
    let mut tails: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    let mut heads: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for t in &known {
        tails.entry((t.head, t.relation)).or_default().push(t.tail);
        heads.entry((t.tail, t.relation)).or_default().push(t.head);
    }

    let directions: &[Direction] = match split.task_mode {
        TaskMode::TailsOnly => &[Direction::Tail],
        TaskMode::BothDirections => &[Direction::Tail, Direction::Head],
    };
    let mut groups: BTreeMap<(usize, bool), Vec<Task>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        for &d in directions {
            let (h, a, inverse) = match d {
                Direction::Tail => (q.head, q.tail, false),
                Direction::Head => (q.tail, q.head, true),
            };
            groups.entry((q.relation, inverse)).or_default().push(Task {
                order: (i, d),
                query: *q,
                head: g.local_entity(h).expect("query entities are in the graph"),
                answer: g.local_entity(a).expect("query entities are in the graph"),
            });
        }
    }
    let groups: Vec<((usize, bool), Vec<Task>)> = groups.into_iter().collect();
    let run = |((relation, inverse), tasks): &((usize, bool), Vec<Task>)| -> Result<Vec<((usize, Direction), QueryResult)>> {
        let q = g.query_node(*relation, *inverse)?;
        let fused = model.relation_reps(&q, opt.alpha)?;
        let mut uniq: Vec<usize> = tasks.iter().map(|t| t.head).collect();
        uniq.sort_unstable();
        uniq.dedup();
        let mut scores: HashMap<usize, Vec<f64>> = HashMap::new();
        for chunk in uniq.chunks(opt.chunk.max(1)) {
            for (h, s) in chunk.iter().zip(model.score_heads(&g, &fused, q.node, chunk)?) {
                scores.insert(*h, s);
            }
        }
        tasks
            .iter()
            .map(|t| {
                let s = &scores[&t.head];
                let others = match t.order.1 {
                    Direction::Tail => tails.get(&(t.query.head, t.query.relation)),
                    Direction::Head => heads.get(&(t.query.tail, t.query.relation)),
                };
                let filtered: HashSet<usize> = others
                    .into_iter()
                    .flatten()
                    .filter_map(|&e| g.local_entity(e))
                    .filter(|&e| e != t.answer)
                    .collect();
                let rank = rank_filtered(s, t.answer, &filtered)?;
                Ok((t.order, QueryResult { query: t.query, direction: t.order.1, rank }))
            })
            .collect()
    };
    let parts: Vec<Result<Vec<_>>> = if opt.parallel {
        groups.par_iter().map(run).collect()
    } else {
        groups.iter().map(run).collect()
    };
    let mut all = Vec::new();
    for p in parts {
        all.extend(p?);
    }
    all.sort_by_key(|(o, _)| *o);
    Ok(DatasetResults {
        name: split.name.clone(),
        regime: split.regime,
        results: all.into_iter().map(|(_, r)| r).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Regime;
    use crate::model::ModelConfig;

    fn split(mode: TaskMode) -> DatasetSplit {
        let train = [["a", "r", "b"], ["b", "s", "c"], ["c", "r", "d"], ["d", "s", "a"]];
        let test_q = [["a", "r", "c"], ["b", "s", "d"]];
        DatasetSplit::from_labeled("toy", &train, None, &test_q, None, &test_q, mode, Regime::Transductive).unwrap()
    }

    #[test]
    fn both_directions_and_tails_only() {
        let m = Model::new(ModelConfig { dim: 4, layers: 2, d_text: 0, fusion_hidden: 4, ..Default::default() }).unwrap();
        let opt = EvalOptions { alpha: false, parallel: false, chunk: 1 };
        let both = evaluate_split(&m, &split(TaskMode::BothDirections), EvalSide::Test, None, &opt).unwrap();
        assert_eq!(both.results.len(), 4);
        assert_eq!(both.results[0].direction, Direction::Tail);
        assert_eq!(both.results[1].direction, Direction::Head);
        let tails = evaluate_split(&m, &split(TaskMode::TailsOnly), EvalSide::Test, None, &opt).unwrap();
        assert_eq!(tails.results.len(), 2);
        assert!(tails.results.iter().all(|r| r.rank >= 1 && r.rank <= 4));
        let par = evaluate_split(&m, &split(TaskMode::BothDirections), EvalSide::Test, None, &EvalOptions { parallel: true, chunk: 3, ..opt }).unwrap();
        assert_eq!(par.results, both.results);
    }

    #[test]
    fn text_is_required_for_alpha_one() {
        let m = Model::new(ModelConfig { dim: 4, layers: 1, d_text: 0, fusion_hidden: 4, ..Default::default() }).unwrap();
        let err = evaluate_split(&m, &split(TaskMode::TailsOnly), EvalSide::Test, None, &EvalOptions::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
