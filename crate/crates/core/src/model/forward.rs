//! Forward computations recorded on an autodiff tape.

use std::rc::Rc;

use ndarray::Array2;

use super::graph::{InferenceGraph, QueryNode, RelationContext};
use super::{FusionIds, LayerIds, Model};
use crate::autodiff::{Tape, Var};
use crate::relgraph::{StructuralRelationGraph, TextualRelationGraph};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub enum EdgeFeature {
    /// Index into the learned interaction-type embeddings.
    Typed(Rc<[usize]>),
    /// Scalar weight broadcast across dimensions.
    Scalar(Rc<[f64]>),
}

/// Directed message edges: node `dst[k]` aggregates from node `src[k]`.
#[derive(Clone, Debug)]
pub struct MessageEdges {
    pub num_nodes: usize,
    pub dst: Rc<[usize]>,
    pub src: Rc<[usize]>,
    pub feature: EdgeFeature,
}

impl MessageEdges {
    pub fn structural(g: &StructuralRelationGraph) -> Self {
        Self {
            num_nodes: g.num_nodes(),
            dst: g.edges().iter().map(|e| e.u).collect(),
            src: g.edges().iter().map(|e| e.v).collect(),
            feature: EdgeFeature::Typed(g.edges().iter().map(|e| e.kind.index()).collect()),
        }
    }

    pub fn textual(g: &TextualRelationGraph) -> Self {
        Self {
            num_nodes: g.num_nodes(),
            dst: g.edges().iter().map(|e| e.u).collect(),
            src: g.edges().iter().map(|e| e.v).collect(),
            feature: EdgeFeature::Scalar(g.edges().iter().map(|e| e.w).collect()),
        }
    }
}

fn param(tape: &mut Tape, model: &Model, id: usize) -> Var {
    tape.param(id, &model.tensors[id])
}

/// `relu(LN([h ‖ agg]·W + b)) + h`.
fn update(tape: &mut Tape, model: &Model, l: LayerIds, h: Var, agg: Var) -> Var {
    let w = param(tape, model, l.w);
    let b = param(tape, model, l.b);
    let g = param(tape, model, l.ln_gain);
    let beta = param(tape, model, l.ln_bias);
    let cat = tape.concat_cols(h, agg);
    let lin = tape.matmul(cat, w);
    let lin = tape.add_row(lin, b);
    let ln = tape.layer_norm(lin, g, beta);
    let act = tape.relu(ln);
    tape.add(act, h)
}

/// Message passing with elementwise-product messages and sum aggregation.
pub fn relation_pass(
    tape: &mut Tape,
    model: &Model,
    layers: &[LayerIds],
    init: Var,
    edges: &MessageEdges,
) -> Result<Var> {
    let (n, d) = tape.value(init).dim();
    if n != edges.num_nodes || d != model.config.dim {
        return Err(Error::Shape(format!(
            "relation pass: initial state is {n}×{d}, graph has {} nodes and the model width is {}",
            edges.num_nodes, model.config.dim
        )));
    }
    let feature = match &edges.feature {
        EdgeFeature::Typed(kinds) => {
            let table = param(tape, model, model.layout.edge_types);
            Some(tape.gather_rows(table, kinds.clone()))
        }
        EdgeFeature::Scalar(_) => None,
    };
    let mut h = init;
    for &l in layers {
        let nbr = tape.gather_rows(h, edges.src.clone());
        let msg = match (&edges.feature, feature) {
            (EdgeFeature::Typed(_), Some(f)) => tape.mul(nbr, f),
            (EdgeFeature::Scalar(w), _) => tape.scale_rows(nbr, w.clone()),
            _ => unreachable!(),
        };
        let agg = tape.scatter_add_rows(msg, edges.dst.clone(), n);
        h = update(tape, model, l, h, agg);
    }
    Ok(h)
}

/// `F(h ‖ z)`, with `z = None` standing for the disabled textual branch.
pub fn fuse(tape: &mut Tape, model: &Model, h: Var, z: Option<Var>) -> Var {
    let z = z.unwrap_or_else(|| tape.constant(Array2::zeros(tape.value(h).raw_dim())));
    match model.layout.fusion {
        FusionIds::Mlp { w1, b1, w2, b2 } => {
            let (w1, b1, w2, b2) = (
                param(tape, model, w1),
                param(tape, model, b1),
                param(tape, model, w2),
                param(tape, model, b2),
            );
            let cat = tape.concat_cols(h, z);
            let a = tape.matmul(cat, w1);
            let a = tape.add_row(a, b1);
            let a = tape.relu(a);
            let o = tape.matmul(a, w2);
            tape.add_row(o, b2)
        }
        FusionIds::Attention { u, w_o, b_o } => {
            let (u, w_o, b_o) = (param(tape, model, u), param(tape, model, w_o), param(tape, model, b_o));
            let lh = tape.matmul(h, u);
            let lz = tape.matmul(z, u);
            let logits = tape.concat_cols(lh, lz);
            let p = tape.softmax_rows(logits);
            let ph = tape.slice_cols(p, 0, 1);
            let pz = tape.slice_cols(p, 1, 2);
            let mh = tape.mul_col(h, ph);
            let mz = tape.mul_col(z, pz);
            let mix = tape.add(mh, mz);
            let o = tape.matmul(mix, w_o);
            tape.add_row(o, b_o)
        }
    }
}

/// Query-conditioned fused relation representations, one row per node of `ctx`.
pub fn relation_representations(
    tape: &mut Tape,
    model: &Model,
    ctx: &RelationContext,
    query_node: usize,
    alpha: bool,
) -> Result<Var> {
    let n = ctx.num_nodes;
    if query_node >= n {
        return Err(Error::Shape(format!("query node {query_node} outside {n} relation nodes")));
    }
    let mut h0 = Array2::zeros((n, model.config.dim));
    h0.row_mut(query_node).fill(1.0);
    let h0 = tape.constant(h0);
    let h = relation_pass(tape, model, &model.layout.structural, h0, &MessageEdges::structural(&ctx.structural))?;
    let z = if alpha {
        let ids = model
            .layout
            .text
            .as_ref()
            .ok_or_else(|| Error::Config("text branch requested but the model has no text parameters".into()))?;
        let (textual, text) = match (&ctx.textual, &ctx.text) {
            (Some(g), Some(t)) => (g, t),
            _ => return Err(Error::Config("text branch requested but the graph has no text embeddings".into())),
        };
        if text.ncols() != model.config.d_text {
            return Err(Error::Shape(format!(
                "text embeddings are {}-dimensional, the model expects {}",
                text.ncols(),
                model.config.d_text
            )));
        }
        let t = tape.constant(text.clone());
        let p = param(tape, model, ids.proj_w);
        let pb = param(tape, model, ids.proj_b);
        let z0 = tape.matmul(t, p);
        let z0 = tape.add_row(z0, pb);
        Some(relation_pass(tape, model, &ids.layers, z0, &MessageEdges::textual(textual))?)
    } else {
        None
    };
    Ok(fuse(tape, model, h, z))
}

/// One entity-level query: local head, relation node, and edges to hide.
#[derive(Clone, Debug, Default)]
pub struct EntityQuery {
    pub head: usize,
    pub node: usize,
    pub removed: Vec<usize>,
}

/// Scores every entity of `g` for each query; the result is a `(B·|E|) × 1`
/// column, query `b` occupying rows `b·|E| .. (b+1)·|E|`.
pub fn entity_pass(
    tape: &mut Tape,
    model: &Model,
    g: &InferenceGraph,
    fused: Var,
    queries: &[EntityQuery],
) -> Result<Var> {
    let n = g.num_entities();
    let nodes = tape.value(fused).nrows();
    let total = n * queries.len();
    let mut heads = Vec::with_capacity(queries.len());
    for (b, q) in queries.iter().enumerate() {
        if q.head >= n {
            return Err(Error::Validation(format!("head entity {} not in the inference graph", q.head)));
        }
        if q.node >= nodes {
            return Err(Error::Shape(format!("relation node {} outside {nodes} representations", q.node)));
        }
        heads.push(b * n + q.head);
    }
    let q_rows = tape.gather_rows(fused, queries.iter().map(|q| q.node).collect());
    let x0 = tape.scatter_add_rows(q_rows, heads.into(), total);

    let m = g.src.len();
    let (mut src, mut dst, mut rel) = (Vec::new(), Vec::new(), Vec::new());
    for (b, q) in queries.iter().enumerate() {
        let off = b * n;
        for e in 0..m {
            if q.removed.contains(&e) {
                continue;
            }
            src.push(g.src[e] + off);
            dst.push(g.dst[e] + off);
            rel.push(g.rel[e]);
        }
    }
    let (src, dst): (Rc<[usize]>, Rc<[usize]>) = (src.into(), dst.into());
    let feat = tape.gather_rows(fused, rel.into());
    let mut x = x0;
    for &l in &model.layout.entity {
        let nbr = tape.gather_rows(x, src.clone());
        let msg = tape.mul(nbr, feat);
        let agg = tape.scatter_add_rows(msg, dst.clone(), total);
        x = update(tape, model, l, x, agg);
    }
    let lay = &model.layout;
    let (w1, b1, w2, b2) = (
        param(tape, model, lay.score_w1),
        param(tape, model, lay.score_b1),
        param(tape, model, lay.score_w2),
        param(tape, model, lay.score_b2),
    );
    let a = tape.matmul(x, w1);
    let a = tape.add_row(a, b1);
    let a = tape.relu(a);
    let s = tape.matmul(a, w2);
    Ok(tape.add_row(s, b2))
}

/// Inference helpers that discard the tape.
impl Model {
    pub fn relation_reps(&self, q: &QueryNode, alpha: bool) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let v = relation_representations(&mut tape, self, &q.context, q.node, alpha)?;
        Ok(tape.value(v).clone())
    }

    /// Scores all entities of `g` for each local head, given precomputed representations.
    pub fn score_heads(&self, g: &InferenceGraph, fused: &Array2<f64>, node: usize, heads: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let f = tape.constant(fused.clone());
        let qs: Vec<EntityQuery> = heads.iter().map(|&h| EntityQuery { head: h, node, removed: Vec::new() }).collect();
        let s = entity_pass(&mut tape, self, g, f, &qs)?;
        let col = tape.value(s);
        let n = g.num_entities();
        let out: Vec<Vec<f64>> = (0..heads.len()).map(|b| (0..n).map(|i| col[[b * n + i, 0]]).collect()).collect();
        if out.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("entity scores".into()));
        }
        Ok(out)
    }

    /// Scores for `(head, relation, ?)`, or `(?, relation, head)` when `inverse`; global ids in.
    pub fn score(&self, g: &InferenceGraph, head: usize, relation: usize, inverse: bool, alpha: bool) -> Result<Vec<f64>> {
        let h = g
            .local_entity(head)
            .ok_or_else(|| Error::Validation(format!("entity {head} is not in the inference graph")))?;
        let q = g.query_node(relation, inverse)?;
        let fused = self.relation_reps(&q, alpha)?;
        Ok(self.score_heads(g, &fused, q.node, &[h])?.remove(0))
    }
}
