//! Harder evaluation split: every query relation is absent from the graph the
//! model sees at inference time.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{DatasetSplit, HarderInfo, KnowledgeGraph, RelationId, Triple};
use crate::seed::component_rng;

const ATTEMPTS: usize = 100;
const RATIO_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct HarderSplit {
    pub graph: KnowledgeGraph,
    pub queries: Vec<Triple>,
    pub masked_relations: Vec<RelationId>,
    pub info: HarderInfo,
}

impl HarderSplit {
    /// The source split with its test side replaced.
    pub fn into_split(self, source: &DatasetSplit) -> DatasetSplit {
        let mut out = source.clone();
        out.name = format!("{}-harder", source.name);
        out.test_graph.graph = self.graph;
        out.test_queries = self.queries;
        out.harder = Some(self.info);
        out
    }
}

fn pick<T: Copy>(items: &[T], k: usize, rng: &mut impl Rng) -> Vec<T> {
    if k >= items.len() {
        return items.to_vec();
    }
    let mut idx = sample(rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// Pools the test graph and test queries, masks a random fraction of the
/// relations, and rebuilds a test graph from the unmasked facts and a query set
/// from masked facts whose entities the new graph covers, keeping the original
/// graph-to-query size ratio.
pub fn generate_harder_split(split: &DatasetSplit, mask_ratio: f64, seed: u64) -> Result<HarderSplit> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::HarderSplit(format!("mask ratio must lie in (0, 1), got {mask_ratio}")));
    }
    let graph = &split.test_graph.graph;
    if split.test_queries.is_empty() || graph.is_empty() {
        return Err(Error::HarderSplit("source split needs a non-empty test graph and test queries".into()));
    }
    let original_ratio = graph.len() as f64 / split.test_queries.len() as f64;

    let mut seen = HashSet::new();
    let pooled: Vec<Triple> =
        graph.facts().iter().chain(&split.test_queries).copied().filter(|t| seen.insert(*t)).collect();
    let relations: Vec<RelationId> = pooled.iter().map(|t| t.relation).collect::<BTreeSet<_>>().into_iter().collect();
    if relations.len() < 2 {
        return Err(Error::HarderSplit("need at least two relations to mask one and keep another".into()));
    }

    let mut rng = component_rng(seed, "harder", 0);
    let n_mask = ((mask_ratio * relations.len() as f64).round() as usize).clamp(1, relations.len() - 1);
    let masked: BTreeSet<RelationId> = pick(&relations, n_mask, &mut rng).into_iter().collect();
    let (candidates, remainder): (Vec<Triple>, Vec<Triple>) =
        pooled.into_iter().partition(|t| masked.contains(&t.relation));

    let mut incident: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, t) in remainder.iter().enumerate() {
        incident.entry(t.head).or_default().push(i);
        incident.entry(t.tail).or_default().push(i);
    }
    let mut coverable: Vec<Triple> = candidates
        .into_iter()
        .filter(|t| incident.contains_key(&t.head) && incident.contains_key(&t.tail))
        .collect();

    let target_q = (remainder.len() as f64 / original_ratio).round() as usize;
    let mut n_q = target_q.min(coverable.len());
    let mut attempts = 0;
    while n_q >= 1 && attempts < ATTEMPTS {
        attempts += 1;
        let g = ((n_q as f64 * original_ratio).round() as usize).clamp(1, remainder.len());
        let achieved = g as f64 / n_q as f64;
        if (achieved - original_ratio).abs() > RATIO_TOLERANCE * original_ratio {
            n_q -= 1;
            continue;
        }
        // Accept queries in random order while one incident fact per new
        // entity keeps the covering set within the graph budget.
        coverable.shuffle(&mut rng);
        let mut chosen: BTreeSet<usize> = BTreeSet::new();
        let mut covered: HashSet<usize> = HashSet::new();
        let mut queries = Vec::with_capacity(n_q);
        for q in &coverable {
            let mut extra: Vec<usize> = Vec::new();
            let mut reach = covered.clone();
            for e in [q.head, q.tail] {
                if reach.contains(&e) {
                    continue;
                }
                let opts = &incident[&e];
                let f = opts[rng.random_range(0..opts.len())];
                reach.extend([remainder[f].head, remainder[f].tail]);
                extra.push(f);
            }
            let fresh = extra.iter().filter(|f| !chosen.contains(f)).count();
            if chosen.len() + fresh > g {
                continue;
            }
            chosen.extend(extra);
            covered = reach;
            queries.push(*q);
            if queries.len() == n_q {
                break;
            }
        }
        if queries.len() < n_q {
            n_q = queries.len().min(n_q - 1);
            continue;
        }
        let rest: Vec<usize> = (0..remainder.len()).filter(|i| !chosen.contains(i)).collect();
        chosen.extend(pick(&rest, g - chosen.len(), &mut rng));
        let facts: Vec<Triple> = chosen.iter().map(|&i| remainder[i]).collect();
        queries.sort_unstable();
        let info = HarderInfo {
            source: split.name.clone(),
            mask_ratio,
            seed,
            masked_relations: masked.iter().map(|&r| split.vocab.relation_name(r).to_owned()).collect(),
            original_ratio,
            achieved_ratio: achieved,
        };
        return Ok(HarderSplit {
            graph: KnowledgeGraph::new(graph.num_entities(), graph.num_relations(), facts)?,
            queries,
            masked_relations: masked.into_iter().collect(),
            info,
        });
    }
    Err(Error::HarderSplit(format!(
        "could not find an entity-covered query set at graph/query ratio {original_ratio:.2} with {n_mask} of {} relations masked; try a lower mask ratio",
        relations.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Regime, TaskMode};

    /// 40 entities on a ring, 8 relations, dense enough that masked facts are
    /// covered by the remaining graph.
    fn ring(name: &str) -> DatasetSplit {
        let mut graph = Vec::new();
        let mut queries = Vec::new();
        for r in 0..8 {
            for i in 0..40 {
                let t = [format!("e{i}"), format!("r{r}"), format!("e{}", (i + r + 1) % 40)];
                if (i + r) % 8 == 0 { queries.push(t) } else { graph.push(t) }
            }
        }
        fn as_ref(v: &[[String; 3]]) -> Vec<[&str; 3]> {
            v.iter().map(|t| [t[0].as_str(), t[1].as_str(), t[2].as_str()]).collect()
        }
        let (g, q) = (as_ref(&graph), as_ref(&queries));
        DatasetSplit::from_labeled(name, &g, None, &q, Some(&g), &q, TaskMode::BothDirections, Regime::InductiveEntityRelation)
            .unwrap()
    }

    fn check_invariants(src: &DatasetSplit, h: &HarderSplit) {
        let graph_rels: HashSet<_> = h.graph.facts().iter().map(|t| t.relation).collect();
        let query_rels: HashSet<_> = h.queries.iter().map(|t| t.relation).collect();
        assert!(graph_rels.is_disjoint(&query_rels));
        assert!(query_rels.iter().all(|r| h.masked_relations.contains(r)));
        let ents: HashSet<_> = h.graph.facts().iter().flat_map(|t| [t.head, t.tail]).collect();
        assert!(h.queries.iter().all(|t| ents.contains(&t.head) && ents.contains(&t.tail)));
        let ratio = h.graph.len() as f64 / h.queries.len() as f64;
        let orig = src.test_graph.graph.len() as f64 / src.test_queries.len() as f64;
        assert!((ratio - orig).abs() <= 0.05 * orig, "{ratio} vs {orig}");
        assert_eq!(h.info.achieved_ratio, ratio);
        let pooled: HashSet<_> = src.test_graph.graph.facts().iter().chain(&src.test_queries).collect();
        assert!(h.graph.facts().iter().chain(&h.queries).all(|t| pooled.contains(t)));
        assert_eq!(h.queries.iter().collect::<HashSet<_>>().len(), h.queries.len());
    }

    #[test]
    fn invariants_hold_across_seeds() {
        let src = ring("ring");
        for seed in 0..25 {
            let h = generate_harder_split(&src, 0.25, seed).unwrap();
            assert_eq!(h.masked_relations.len(), 2);
            check_invariants(&src, &h);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let src = ring("ring");
        let a = generate_harder_split(&src, 0.25, 3).unwrap();
        let b = generate_harder_split(&src, 0.25, 3).unwrap();
        assert_eq!(a.graph.facts(), b.graph.facts());
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn infeasible_coverage_is_reported() {
        // Whichever relation is masked, some entity only occurs in its facts.
        let g = [["a", "r0", "b"], ["b", "r0", "c"], ["c", "r1", "d"]];
        let q = [["a", "r1", "d"]];
        let src = DatasetSplit::from_labeled("t", &g, None, &q, Some(&g), &q, TaskMode::BothDirections, Regime::InductiveEntity)
            .unwrap();
        let err = generate_harder_split(&src, 0.5, 0).unwrap_err().to_string();
        assert!(err.contains("lower mask ratio"), "{err}");
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(generate_harder_split(&ring("r"), 1.0, 0).is_err());
        assert!(generate_harder_split(&ring("r"), 0.0, 0).is_err());
    }

    #[test]
    fn split_roundtrip_carries_manifest() {
        let src = ring("ring");
        let h = generate_harder_split(&src, 0.25, 1).unwrap();
        let out = h.into_split(&src);
        let dir = tempfile::tempdir().unwrap();
        crate::kg::write_dataset(dir.path(), &out).unwrap();
        let (back, _) = crate::kg::load_dataset(dir.path()).unwrap();
        let info = back.harder.unwrap();
        assert_eq!(info.masked_relations.len(), 2);
        assert_eq!(back.test_queries.len(), out.test_queries.len());
    }
}
