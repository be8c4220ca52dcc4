//! Relation-level graphs over the inverse-augmented relation vocabulary.
//!
//! The structural graph links two relations when some entity plays a role in a
//! fact of each (head-to-head, tail-to-head, head-to-tail, tail-to-tail). The
//! textual graph links relations whose text embeddings are cosine-similar.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::AugmentedKG;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    H2h,
    T2h,
    H2t,
    T2t,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 4] = [Self::H2h, Self::T2h, Self::H2t, Self::T2t];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Edge `(u, kind, v)`: node `u` receives messages from `v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StructuralEdge {
    pub u: usize,
    pub kind: InteractionKind,
    pub v: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuralRelationGraph {
    num_nodes: usize,
    edges: Vec<StructuralEdge>,
}

impl StructuralRelationGraph {
    /// Validates node bounds, then sorts and deduplicates the edges.
    pub fn from_parts(num_nodes: usize, mut edges: Vec<StructuralEdge>) -> Result<Self> {
        if let Some(e) = edges.iter().find(|e| e.u >= num_nodes || e.v >= num_nodes) {
            return Err(Error::RelationGraph(format!("edge {e:?} outside {num_nodes} nodes")));
        }
        edges.sort();
        edges.dedup();
        Ok(Self { num_nodes, edges })
    }

    /// The same edges over `extra` additional isolated nodes.
    pub fn with_isolated_nodes(&self, extra: usize) -> Self {
        Self {
            num_nodes: self.num_nodes + extra,
            edges: self.edges.clone(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Deduplicated edges in `(u, kind, v)` order.
    pub fn edges(&self) -> &[StructuralEdge] {
        &self.edges
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for e in &self.edges {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Builds the structural relation graph of `g`.
///
/// An edge requires two distinct augmented facts witnessing the interaction,
/// so `(r, h2h, r)` appears only when some entity heads two `r`-facts.
pub fn build_structural(g: &AugmentedKG) -> StructuralRelationGraph {
    let n_ent = g.num_entities();
    let mut heads: Vec<Vec<usize>> = vec![Vec::new(); n_ent];
    let mut tails: Vec<Vec<usize>> = vec![Vec::new(); n_ent];
    let mut self_loops: HashMap<(usize, usize), usize> = HashMap::new();
    for t in g.facts() {
        heads[t.head].push(t.relation);
        tails[t.tail].push(t.relation);
        if t.head == t.tail {
            *self_loops.entry((t.head, t.relation)).or_default() += 1;
        }
    }

    let count = |xs: &[usize]| {
        let mut m: BTreeMap<usize, usize> = BTreeMap::new();
        for &r in xs {
            *m.entry(r).or_default() += 1;
        }
        m
    };

    let mut edges: Vec<StructuralEdge> = (0..n_ent)
        .into_par_iter()
        .flat_map_iter(|e| {
            let hs = count(&heads[e]);
            let ts = count(&tails[e]);
            let loops = |r: usize| self_loops.get(&(e, r)).copied().unwrap_or(0);
            let mut out = Vec::new();
            for (&u, &cu) in &hs {
                for &v in hs.keys() {
                    if u != v || cu >= 2 {
                        out.push(StructuralEdge { u, kind: InteractionKind::H2h, v });
                    }
                }
                for (&v, &cv) in &ts {
                    if u != v || cu * cv > loops(u) {
                        out.push(StructuralEdge { u, kind: InteractionKind::H2t, v });
                    }
                }
            }
            for (&u, &cu) in &ts {
                for &v in ts.keys() {
                    if u != v || cu >= 2 {
                        out.push(StructuralEdge { u, kind: InteractionKind::T2t, v });
                    }
                }
                for (&v, &cv) in &hs {
                    if u != v || cu * cv > loops(u) {
                        out.push(StructuralEdge { u, kind: InteractionKind::T2h, v });
                    }
                }
            }
            out
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    StructuralRelationGraph {
        num_nodes: g.num_relations(),
        edges,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SparsifierPolicy {
    Threshold { threshold: f64 },
    TopXPercent { x: f64 },
}

impl Default for SparsifierPolicy {
    fn default() -> Self {
        SparsifierPolicy::Threshold { threshold: 0.8 }
    }
}

impl SparsifierPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsifierPolicy::Threshold { threshold } if !(-1.0..=1.0).contains(&threshold) => Err(
                Error::Config(format!("threshold {threshold} outside [-1, 1]")),
            ),
            SparsifierPolicy::TopXPercent { x } if !(x > 0.0 && x <= 100.0) => {
                Err(Error::Config(format!("top-x percentage {x} outside (0, 100]")))
            }
            _ => Ok(()),
        }
    }

    /// Number of neighbours kept per node out of `candidates` under top-x%.
    fn keep_count(x: f64, candidates: usize) -> usize {
        ((x / 100.0) * candidates as f64).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextualEdge {
    pub u: usize,
    pub w: f64,
    pub v: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextualRelationGraph {
    num_nodes: usize,
    edges: Vec<TextualEdge>,
}

impl TextualRelationGraph {
    /// Validates node bounds and weights, then sorts the edges by `(u, v)`.
    pub fn from_parts(num_nodes: usize, mut edges: Vec<TextualEdge>) -> Result<Self> {
        if let Some(e) = edges
            .iter()
            .find(|e| e.u >= num_nodes || e.v >= num_nodes || !e.w.is_finite())
        {
            return Err(Error::RelationGraph(format!("bad textual edge {e:?} over {num_nodes} nodes")));
        }
        edges.sort_by_key(|e| (e.u, e.v));
        Ok(Self { num_nodes, edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Edges sorted by `(u, v)`, each present in both directions.
    pub fn edges(&self) -> &[TextualEdge] {
        &self.edges
    }

    pub fn weight(&self, u: usize, v: usize) -> Option<f64> {
        self.edges
            .binary_search_by(|e| (e.u, e.v).cmp(&(u, v)))
            .ok()
            .map(|i| self.edges[i].w)
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for e in &self.edges {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

fn check_nonzero(emb: &Array2<f64>, offset: usize) -> Result<()> {
    for (i, row) in emb.rows().into_iter().enumerate() {
        let n = row.dot(&row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::RelationGraph(format!(
                "embedding of relation node {} has zero or non-finite norm",
                i + offset
            )));
        }
    }
    Ok(())
}

/// Keeps the candidates of one node allowed by `policy`. `cands` holds
/// `(neighbour, weight)` in ascending neighbour order.
fn select(policy: SparsifierPolicy, mut cands: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    match policy {
        SparsifierPolicy::Threshold { threshold } => {
            cands.retain(|&(_, w)| w >= threshold);
            cands
        }
        SparsifierPolicy::TopXPercent { x } => {
            let k = SparsifierPolicy::keep_count(x, cands.len());
            // stable: equal weights keep ascending neighbour order
            cands.sort_by(|a, b| b.1.total_cmp(&a.1));
            cands.truncate(k);
            cands
        }
    }
}

fn symmetrize(num_nodes: usize, picked: impl IntoIterator<Item = (usize, usize, f64)>) -> TextualRelationGraph {
    let mut set: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (u, v, w) in picked {
        set.insert((u, v), w);
        set.insert((v, u), w);
    }
    TextualRelationGraph {
        num_nodes,
        edges: set.into_iter().map(|((u, v), w)| TextualEdge { u, w, v }).collect(),
    }
}

/// Builds the textual relation graph from one embedding row per node.
pub fn build_textual(embeddings: &Array2<f64>, policy: SparsifierPolicy) -> Result<TextualRelationGraph> {
    policy.validate()?;
    check_nonzero(embeddings, 0)?;
    let n = embeddings.nrows();
    let picked: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|u| {
            let eu = embeddings.row(u);
            let cands: Vec<(usize, f64)> = (0..n)
                .filter(|&v| v != u)
                .map(|v| (v, cosine(eu, embeddings.row(v))))
                .collect();
            select(policy, cands).into_iter().map(move |(v, w)| (u, v, w))
        })
        .collect();
    Ok(symmetrize(n, picked))
}

/// Appends a query relation and its inverse as two new nodes (ids `n` and
/// `n + 1`). The structural graph gains no edges; the textual graph gains
/// edges between each new node and the existing nodes it passes the policy with.
pub fn extend_for_query(
    structural: &StructuralRelationGraph,
    textual: &TextualRelationGraph,
    base_embeddings: &Array2<f64>,
    query_embeddings: &Array2<f64>,
    policy: SparsifierPolicy,
) -> Result<(StructuralRelationGraph, TextualRelationGraph)> {
    policy.validate()?;
    let n = textual.num_nodes();
    if base_embeddings.nrows() != n {
        return Err(Error::Shape(format!(
            "{} base embeddings for {} textual nodes",
            base_embeddings.nrows(),
            n
        )));
    }
    if query_embeddings.nrows() != 2 {
        return Err(Error::RelationGraph(
            "query relation embedding missing (need forward and inverse rows)".into(),
        ));
    }
    if query_embeddings.ncols() != base_embeddings.ncols() {
        return Err(Error::Shape("query embedding dimension differs from base".into()));
    }
    check_nonzero(query_embeddings, n)?;

    let mut picked: Vec<(usize, usize, f64)> =
        textual.edges().iter().map(|e| (e.u, e.v, e.w)).collect();
    for q in 0..2 {
        let eq = query_embeddings.row(q);
        let cands: Vec<(usize, f64)> = (0..n)
            .map(|v| (v, cosine(eq, base_embeddings.row(v))))
            .collect();
        picked.extend(select(policy, cands).into_iter().map(|(v, w)| (n + q, v, w)));
    }
    let s = StructuralRelationGraph {
        num_nodes: structural.num_nodes() + 2,
        edges: structural.edges().to_vec(),
    };
    Ok((s, symmetrize(n + 2, picked)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{KnowledgeGraph, Triple};
    use ndarray::array;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    pub(crate) fn brute_force(g: &AugmentedKG) -> BTreeSet<StructuralEdge> {
        let f = g.facts();
        let mut out = BTreeSet::new();
        for (i, a) in f.iter().enumerate() {
            for (j, b) in f.iter().enumerate() {
                if i == j {
                    continue;
                }
                let (u, v) = (a.relation, b.relation);
                if a.head == b.head {
                    out.insert(StructuralEdge { u, kind: InteractionKind::H2h, v });
                }
                if a.tail == b.head {
                    out.insert(StructuralEdge { u, kind: InteractionKind::T2h, v });
                }
                if a.head == b.tail {
                    out.insert(StructuralEdge { u, kind: InteractionKind::H2t, v });
                }
                if a.tail == b.tail {
                    out.insert(StructuralEdge { u, kind: InteractionKind::T2t, v });
                }
            }
        }
        out
    }

    fn has(g: &StructuralRelationGraph, u: usize, kind: InteractionKind, v: usize) -> bool {
        g.edges().contains(&StructuralEdge { u, kind, v })
    }

    #[test]
    fn shared_head_links_both_relations() {
        // (a, r0, b), (a, r1, c)
        let kg = KnowledgeGraph::new(3, 2, [Triple::new(0, 0, 1), Triple::new(0, 1, 2)]).unwrap();
        let s = build_structural(&kg.augment());
        assert!(has(&s, 0, InteractionKind::H2h, 1));
        assert!(has(&s, 1, InteractionKind::H2h, 0));
        assert_eq!(s.edges().iter().copied().collect::<BTreeSet<_>>(), brute_force(&kg.augment()));
    }

    #[test]
    fn single_fact_links_relation_and_inverse() {
        let kg = KnowledgeGraph::new(2, 1, [Triple::new(0, 0, 1)]).unwrap();
        let s = build_structural(&kg.augment());
        let expected: BTreeSet<_> = [
            StructuralEdge { u: 0, kind: InteractionKind::T2h, v: 1 },
            StructuralEdge { u: 0, kind: InteractionKind::H2t, v: 1 },
            StructuralEdge { u: 1, kind: InteractionKind::T2h, v: 0 },
            StructuralEdge { u: 1, kind: InteractionKind::H2t, v: 0 },
        ]
        .into_iter()
        .collect();
        assert_eq!(s.edges().iter().copied().collect::<BTreeSet<_>>(), expected);
    }

    #[test]
    fn self_loop_fact_alone_does_not_pair_with_itself() {
        let kg = KnowledgeGraph::new(1, 1, [Triple::new(0, 0, 0)]).unwrap();
        let aug = kg.augment();
        let s = build_structural(&aug);
        assert_eq!(s.edges().iter().copied().collect::<BTreeSet<_>>(), brute_force(&aug));
        assert!(!has(&s, 0, InteractionKind::T2h, 0));
    }

    #[test]
    fn empty_graph_has_no_edges() {
        let kg = KnowledgeGraph::empty(0, 3);
        let s = build_structural(&kg.augment());
        assert!(s.edges().is_empty());
        assert_eq!(s.num_nodes(), 6);
    }

    #[test]
    fn identical_embeddings_give_unit_weight() {
        let e = array![[1.0, 2.0], [1.0, 2.0]];
        let t = build_textual(&e, SparsifierPolicy::default()).unwrap();
        assert_eq!(t.edges().len(), 2);
        assert!((t.weight(0, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_pair_is_dropped_at_default_threshold() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let e = array![[1.0, 0.0], [s, s]];
        // cos = 1/sqrt(2) = 0.7071... < 0.8
        let w = cosine(e.row(0), e.row(1));
        assert!((w - 0.707_106_781_186_547_5).abs() < 1e-12);
        let t = build_textual(&e, SparsifierPolicy::default()).unwrap();
        assert!(t.edges().is_empty());
        let t = build_textual(&e, SparsifierPolicy::Threshold { threshold: 0.7 }).unwrap();
        assert_eq!(t.edges().len(), 2);
    }

    #[test]
    fn orthogonal_vectors_are_not_linked() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let t = build_textual(&e, SparsifierPolicy::default()).unwrap();
        assert!(t.edges().is_empty());
    }

    #[test]
    fn zero_embedding_is_an_error_naming_the_node() {
        let e = array![[1.0, 0.0], [0.0, 0.0]];
        let err = build_textual(&e, SparsifierPolicy::default()).unwrap_err();
        assert!(err.to_string().contains("node 1"), "{err}");
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(build_textual(&e, SparsifierPolicy::Threshold { threshold: 1.5 }).is_err());
        assert!(build_textual(&e, SparsifierPolicy::TopXPercent { x: 0.0 }).is_err());
        assert!(build_textual(&e, SparsifierPolicy::TopXPercent { x: 120.0 }).is_err());
    }

    #[test]
    fn top_x_breaks_ties_by_neighbour_id() {
        // node 0 sees nodes 1,2,3 at equal weight; 34% of 3 candidates keeps 2
        let e = array![[1.0, 0.0], [1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
        let t = build_textual(&e, SparsifierPolicy::TopXPercent { x: 34.0 }).unwrap();
        assert!(t.weight(0, 1).is_some());
        assert!(t.weight(0, 2).is_some());
        // node 3 keeps (1: w=1) and (0: w=.707) so (3,0) appears through 3's own list
        assert!(t.weight(3, 0).is_some());
    }

    #[test]
    fn extension_links_query_to_its_textual_twin() {
        let kg = KnowledgeGraph::new(2, 1, [Triple::new(0, 0, 1)]).unwrap();
        let s = build_structural(&kg.augment());
        let base = array![[1.0, 0.0], [-1.0, 0.0]];
        let t = build_textual(&base, SparsifierPolicy::default()).unwrap();
        let q = array![[1.0, 0.0], [-1.0, 0.0]];
        let (s2, t2) = extend_for_query(&s, &t, &base, &q, SparsifierPolicy::default()).unwrap();
        assert_eq!(s2.num_nodes(), 4);
        assert_eq!(s2.edges(), s.edges());
        assert_eq!(t2.weight(2, 0), Some(1.0));
        assert_eq!(t2.weight(0, 2), Some(1.0));
        assert_eq!(t2.weight(3, 1), Some(1.0));
        assert!(t2.weight(2, 1).is_none());
    }

    #[test]
    fn orthogonal_query_stays_isolated() {
        let base = array![[1.0, 0.0], [-1.0, 0.0]];
        let s = build_structural(&KnowledgeGraph::new(2, 1, [Triple::new(0, 0, 1)]).unwrap().augment());
        let t = build_textual(&base, SparsifierPolicy::default()).unwrap();
        let q = array![[0.0, 1.0], [0.0, -1.0]];
        let (_, t2) = extend_for_query(&s, &t, &base, &q, SparsifierPolicy::default()).unwrap();
        assert!(t2.edges().iter().all(|e| e.u < 2 && e.v < 2));
    }

    #[test]
    fn missing_query_embedding_is_an_error() {
        let base = array![[1.0, 0.0], [-1.0, 0.0]];
        let s = build_structural(&KnowledgeGraph::new(2, 1, [Triple::new(0, 0, 1)]).unwrap().augment());
        let t = build_textual(&base, SparsifierPolicy::default()).unwrap();
        let q = Array2::<f64>::zeros((0, 2));
        assert!(extend_for_query(&s, &t, &base, &q, SparsifierPolicy::default()).is_err());
    }

    #[test]
    fn jsonl_lines_carry_kind_and_weight() {
        let kg = KnowledgeGraph::new(2, 1, [Triple::new(0, 0, 1)]).unwrap();
        let mut buf = Vec::new();
        build_structural(&kg.augment()).write_jsonl(&mut buf).unwrap();
        let first = String::from_utf8(buf).unwrap().lines().next().unwrap().to_owned();
        assert_eq!(first, r#"{"u":0,"kind":"t2h","v":1}"#);
        let t = build_textual(&array![[1.0, 0.0], [1.0, 0.0]], SparsifierPolicy::default()).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(r#"{"u":0,"w":1.0,"v":1}"#));
    }

    fn random_kg() -> impl Strategy<Value = KnowledgeGraph> {
        prop::collection::vec((0usize..15, 0usize..5, 0usize..15), 0..60).prop_map(|raw| {
            KnowledgeGraph::new(15, 5, raw.into_iter().map(|(h, r, t)| Triple::new(h, r, t))).unwrap()
        })
    }

    proptest! {
        #[test]
        fn structural_matches_brute_force(kg in random_kg()) {
            let aug = kg.augment();
            let fast: BTreeSet<_> = build_structural(&aug).edges().iter().copied().collect();
            prop_assert_eq!(fast, brute_force(&aug));
        }

        #[test]
        fn raising_threshold_never_adds_edges(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..12),
            lo in -1.0f64..1.0,
            bump in 0.0f64..1.0,
        ) {
            let n = rows.len();
            let mut e = Array2::from_shape_vec((n, 4), rows.concat()).unwrap();
            e.rows_mut().into_iter().for_each(|mut r| r[0] += 2.0); // keep norms away from 0
            let hi = (lo + bump).min(1.0);
            let a = build_textual(&e, SparsifierPolicy::Threshold { threshold: lo }).unwrap();
            let b = build_textual(&e, SparsifierPolicy::Threshold { threshold: hi }).unwrap();
            for edge in b.edges() {
                prop_assert!(edge.w >= hi);
                prop_assert!(a.weight(edge.u, edge.v).is_some());
                prop_assert_eq!(b.weight(edge.v, edge.u), Some(edge.w));
                prop_assert!(edge.u != edge.v);
            }
        }
    }
}
