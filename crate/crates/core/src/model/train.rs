//! Negative-sampling training with a self-adversarial objective and AdamW.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{entity_pass, relation_representations, EntityQuery};
use super::graph::InferenceGraph;
use super::{checkpoint, Model};
use crate::autodiff::{softplus, tempered_softmax, Tape};
use crate::kg::{inverse_relation, DatasetSplit, KnowledgeGraph, Triple};
use crate::relgraph::SparsifierPolicy;
use crate::text::EmbeddingTable;
use crate::{seed, Error, Result};

/// Self-adversarial logistic loss of one query.
pub fn loss(positive: f64, negatives: &[f64], temperature: f64) -> Result<f64> {
    if !positive.is_finite() || negatives.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores passed to the loss".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("adversarial temperature must be positive".into()));
    }
    let w = tempered_softmax(negatives, temperature);
    Ok(softplus(-positive) + negatives.iter().zip(&w).map(|(s, w)| w * softplus(*s)).sum::<f64>())
}

/// Queries and graph of one pretraining dataset.
pub struct TrainingSet {
    pub name: String,
    pub graph: Arc<InferenceGraph>,
    pub queries: Vec<Triple>,
    /// Known answers per (local head, global relation, inverse), for filtering negatives.
    answers: HashMap<(usize, usize, bool), HashSet<usize>>,
    /// Hide each training query's own edge (both directions) from the entity pass.
    pub remove_easy_edges: bool,
}

impl TrainingSet {
    pub fn new(
        name: &str,
        graph: &KnowledgeGraph,
        queries: Vec<Triple>,
        known: impl IntoIterator<Item = Triple>,
        text: Option<(Arc<EmbeddingTable>, SparsifierPolicy)>,
        remove_easy_edges: bool,
    ) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Validation(format!("training set {name} has no queries")));
        }
        let extra: Vec<usize> = queries.iter().flat_map(|q| [q.head, q.tail]).collect();
        let g = InferenceGraph::new(graph, extra, text)?;
        let mut answers: HashMap<(usize, usize, bool), HashSet<usize>> = HashMap::new();
        for t in known.into_iter().chain(queries.iter().copied()) {
            if let (Some(h), Some(tl)) = (g.local_entity(t.head), g.local_entity(t.tail)) {
                answers.entry((h, t.relation, false)).or_default().insert(tl);
                answers.entry((tl, t.relation, true)).or_default().insert(h);
            }
        }
        Ok(Self {
            name: name.into(),
            graph: Arc::new(g),
            queries,
            answers,
            remove_easy_edges,
        })
    }

    /// Standard pretraining: the training graph's own facts are the queries.
    pub fn from_split(split: &DatasetSplit, text: Option<(Arc<EmbeddingTable>, SparsifierPolicy)>) -> Result<Self> {
        let g = &split.train_graph.graph;
        Self::new(&split.name, g, g.facts().to_vec(), g.facts().iter().copied(), text, true)
    }

    /// Harder-style data: test queries over relations absent from the test graph.
    pub fn from_test_side(split: &DatasetSplit, text: Option<(Arc<EmbeddingTable>, SparsifierPolicy)>) -> Result<Self> {
        let g = &split.test_graph.graph;
        Self::new(
            &split.name,
            g,
            split.test_queries.clone(),
            g.facts().iter().copied(),
            text,
            true,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub negatives: usize,
    pub adversarial_temperature: f64,
    pub seed: u64,
    /// Train with the textual branch enabled.
    pub alpha: bool,
    /// Run independent query groups of a batch on the rayon pool.
    pub parallel: bool,
    pub log_every: usize,
    /// Save an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200_000,
            batch_size: 64,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            negatives: 128,
            adversarial_temperature: 1.0,
            seed: 0,
            alpha: true,
            parallel: true,
            log_every: 100,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.negatives == 0 {
            return bad("batch_size and negatives must be positive");
        }
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return bad("lr must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.adversarial_temperature <= 0.0 || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("temperature and eps must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

/// One sampled training query in local ids of its set's graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub set: usize,
    pub head: usize,
    pub answer: usize,
    pub relation: usize,
    pub inverse: bool,
    pub negatives: Vec<usize>,
    pub removed: Vec<usize>,
}

pub fn sample_batch(
    sets: &[TrainingSet],
    batch_size: usize,
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let total: usize = sets.iter().map(|s| s.queries.len()).sum();
    let mut pick = rng.random_range(0..total);
    let set_idx = sets
        .iter()
        .position(|s| {
            if pick < s.queries.len() {
                true
            } else {
                pick -= s.queries.len();
                false
            }
        })
        .expect("pick < total");
    let set = &sets[set_idx];
    let g = &set.graph;
    let n = g.num_entities();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let q = set.queries[rng.random_range(0..set.queries.len())];
        let inverse = rng.random_bool(0.5);
        let (h, t) = if inverse { (q.tail, q.head) } else { (q.head, q.tail) };
        let head = g.local_entity(h).expect("query entities are in the graph");
        let answer = g.local_entity(t).expect("query entities are in the graph");
        let known = set.answers.get(&(head, q.relation, inverse));
        let n_known = known.map_or(0, HashSet::len);
        if n_known >= n {
            continue;
        }
        let mut negs = Vec::with_capacity(negatives);
        while negs.len() < negatives {
            let e = rng.random_range(0..n);
            if !known.is_some_and(|k| k.contains(&e)) {
                negs.push(e);
            }
        }
        let mut removed = Vec::new();
        if set.remove_easy_edges {
            if let Some(r) = g.local_relation(q.relation) {
                let (lh, lt) = (g.local_entity(q.head).unwrap(), g.local_entity(q.tail).unwrap());
                let ri = inverse_relation(r, g.num_relations());
                removed.extend(g.fact_position(&Triple::new(lh, r, lt)));
                removed.extend(g.fact_position(&Triple::new(lt, ri, lh)));
            }
        }
        out.push(Sample {
            set: set_idx,
            head,
            answer,
            relation: q.relation,
            inverse,
            negatives: negs,
            removed,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    pub alpha: bool,
    pub temperature: f64,
    pub gradients: bool,
    pub relu_signature: bool,
    pub parallel: bool,
}

#[derive(Debug)]
pub struct BatchResult {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Mean gradient per parameter tensor (empty unless requested).
    pub grads: Vec<Array2<f64>>,
    pub relu_signature: Vec<u64>,
}

type GroupKey = (usize, usize, bool);

struct GroupOut {
    loss: f64,
    grads: Vec<(usize, Array2<f64>)>,
    signature: Vec<u64>,
}

fn run_group(model: &Model, sets: &[TrainingSet], key: GroupKey, samples: &[&Sample], opt: BatchOptions) -> Result<GroupOut> {
    let (set_idx, relation, inverse) = key;
    let g = &sets[set_idx].graph;
    let q = g.query_node(relation, inverse)?;
    let mut tape = if opt.relu_signature { Tape::with_relu_signature() } else { Tape::new() };
    let fused = relation_representations(&mut tape, model, &q.context, q.node, opt.alpha)?;
    let eq: Vec<EntityQuery> = samples
        .iter()
        .map(|s| EntityQuery { head: s.head, node: q.node, removed: s.removed.clone() })
        .collect();
    let scores = entity_pass(&mut tape, model, g, fused, &eq)?;
    let n = g.num_entities();
    let mut total = None;
    for (b, s) in samples.iter().enumerate() {
        let negs: std::rc::Rc<[usize]> = s.negatives.iter().map(|&e| b * n + e).collect();
        let l = tape.self_adversarial_loss(scores, b * n + s.answer, negs, opt.temperature);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    let total = total.expect("groups are non-empty");
    let loss = tape.scalar(total);
    let grads = if opt.gradients {
        let gr = tape.backward(total);
        tape.param_gradients(&gr)
    } else {
        Vec::new()
    };
    Ok(GroupOut {
        loss,
        grads,
        signature: tape.relu_signature().map(<[u64]>::to_vec).unwrap_or_default(),
    })
}

/// Loss (and optionally exact gradients) of a batch. Queries sharing a
/// relation share one relation pass; groups are combined in key order so the
/// result does not depend on scheduling.
pub fn batch_gradients(model: &Model, sets: &[TrainingSet], batch: &[Sample], opt: BatchOptions) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut groups: BTreeMap<GroupKey, Vec<&Sample>> = BTreeMap::new();
    for s in batch {
        groups.entry((s.set, s.relation, s.inverse)).or_default().push(s);
    }
    let groups: Vec<(GroupKey, Vec<&Sample>)> = groups.into_iter().collect();
    let outs: Vec<Result<GroupOut>> = if opt.parallel {
        groups.par_iter().map(|(k, s)| run_group(model, sets, *k, s, opt)).collect()
    } else {
        groups.iter().map(|(k, s)| run_group(model, sets, *k, s, opt)).collect()
    };
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Array2<f64>> = if opt.gradients {
        model.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect()
    } else {
        Vec::new()
    };
    let mut signature = Vec::new();
    for out in outs {
        let out = out?;
        loss += out.loss;
        for (id, g) in out.grads {
            grads[id].scaled_add(scale, &g);
        }
        signature.extend(out.signature);
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    for (name, g) in model.names.iter().zip(&grads) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(BatchResult { loss, grads, relu_signature: signature })
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros = || model.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *p *= 1.0 - lr * wd;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(step, loss, grad_norm)` for every step.
    pub rows: Vec<(usize, f64, f64)>,
}

impl TrainLog {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,loss,grad_norm")?;
        for (s, l, g) in &self.rows {
            writeln!(w, "{s},{l:.17e},{g:.17e}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))
    }

    /// Moving average of the loss over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        self.rows
            .windows(w.min(self.rows.len()).max(1))
            .map(|c| c.iter().map(|r| r.1).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Trains `model` in place on a mixture of datasets. Each step draws one
/// dataset with probability proportional to its query count.
pub fn train(model: &mut Model, sets: &[TrainingSet], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if sets.is_empty() {
        return Err(Error::Validation("no training data".into()));
    }
    if cfg.alpha && (!model.has_text() || sets.iter().any(|s| !s.graph.has_text())) {
        return Err(Error::Config("alpha = 1 needs text embeddings for every training set".into()));
    }
    log::info!("training {} parameters on {} dataset(s) for {} steps", model.num_parameters(), sets.len(), cfg.steps);
    let mut rng = seed::component_rng(cfg.seed, "train", 0);
    let mut opt = AdamW::new(model, cfg);
    let mut log = TrainLog::default();
    let options = BatchOptions {
        alpha: cfg.alpha,
        temperature: cfg.adversarial_temperature,
        gradients: true,
        relu_signature: false,
        parallel: cfg.parallel,
    };
    for step in 1..=cfg.steps {
        let batch = sample_batch(sets, cfg.batch_size, cfg.negatives, &mut rng)?;
        if batch.is_empty() {
            log::warn!("step {step}: no query with a valid negative; skipped");
            continue;
        }
        let res = match batch_gradients(model, sets, &batch, options) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                let loss = f64::NAN;
                if let Some(dir) = &cfg.checkpoint_dir {
                    let path = dir.join("diverged.ckpt");
                    checkpoint::save(model, &path)?;
                    log::error!("non-finite {what} at step {step}; checkpoint saved to {}", path.display());
                }
                return Err(Error::Diverged { step, loss });
            }
            Err(e) => return Err(e),
        };
        let norm = res.grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        opt.step(&mut model.tensors, &res.grads);
        log.rows.push((step, res.loss, norm));
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step}: loss {:.5} grad-norm {:.4}", res.loss, norm);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                checkpoint::save(model, &dir.join(format!("step_{step}.ckpt")))?;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, FusionKind};
    use rand::SeedableRng;

    #[test]
    fn loss_saturates_and_has_the_closed_form_at_zero() {
        assert!((loss(0.0, &[0.0], 1.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(loss(50.0, &[-50.0, -60.0], 1.0).unwrap() < 1e-20);
        assert!(loss(f64::NAN, &[0.0], 1.0).is_err());
        assert!(loss(0.0, &[f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn cold_temperature_focuses_on_the_hardest_negative() {
        let (a, b) = (1.0, -2.0);
        let l = loss(0.5, &[a, b], 1e-3).unwrap();
        let hard = softplus(-0.5) + softplus(a);
        assert!((l - hard).abs() < 1e-12);
        let warm = loss(0.5, &[a, b], 1.0).unwrap();
        let w = [1.0 / (1.0 + (b - a).exp()), 1.0 / (1.0 + (a - b).exp())];
        assert!((warm - (softplus(-0.5) + w[0] * softplus(a) + w[1] * softplus(b))).abs() < 1e-12);
    }

    fn one_fact_set() -> TrainingSet {
        let g = KnowledgeGraph::new(4, 1, [Triple::new(0, 0, 1), Triple::new(2, 0, 3)]).unwrap();
        TrainingSet::new("one", &g, vec![Triple::new(0, 0, 1)], g.facts().to_vec(), None, false).unwrap()
    }

    #[test]
    fn overfitting_one_fact_puts_the_answer_on_top() {
        let mut m = Model::new(ModelConfig { dim: 8, layers: 2, d_text: 0, fusion_hidden: 8, ..Default::default() }).unwrap();
        let sets = [one_fact_set()];
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 4,
            negatives: 8,
            lr: 1e-2,
            alpha: false,
            parallel: false,
            ..Default::default()
        };
        train(&mut m, &sets, &cfg).unwrap();
        let s = m.score(&sets[0].graph, 0, 0, false, false).unwrap();
        let best = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(sets[0].graph.entities()[best], 1, "{s:?}");
    }

    #[test]
    fn text_parameters_get_zero_gradient_without_text() {
        let m = Model::new(ModelConfig { dim: 4, layers: 2, d_text: 3, fusion_hidden: 4, fusion: FusionKind::Mlp, init_seed: 1 }).unwrap();
        let sets = [one_fact_set()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(&sets, 3, 4, &mut rng).unwrap();
        let opt = BatchOptions { alpha: false, temperature: 1.0, gradients: true, relu_signature: false, parallel: false };
        let r = batch_gradients(&m, &sets, &batch, opt).unwrap();
        for id in m.text_parameter_ids() {
            assert!(r.grads[id].iter().all(|x| *x == 0.0), "{}", m.names[id]);
        }
        assert!(r.grads[m.layout.edge_types].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn negatives_avoid_known_answers_and_easy_edges_are_hidden() {
        let g = KnowledgeGraph::new(6, 1, (0..5).map(|i| Triple::new(0, 0, i + 1))).unwrap();
        let set = TrainingSet::new("star", &g, g.facts().to_vec(), g.facts().to_vec(), None, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_batch(std::slice::from_ref(&set), 32, 16, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        for s in &batch {
            assert_eq!(s.removed.len(), 2);
            let known = &set.answers[&(s.head, 0, s.inverse)];
            assert!(s.negatives.iter().all(|n| !known.contains(n)));
        }
    }

    #[test]
    fn parallel_and_serial_batches_agree_bitwise() {
        let g = KnowledgeGraph::new(6, 2, [Triple::new(0, 0, 1), Triple::new(1, 1, 2), Triple::new(2, 0, 3), Triple::new(3, 1, 4), Triple::new(4, 0, 5)]).unwrap();
        let set = TrainingSet::from_split_like(&g);
        let m = Model::new(ModelConfig { dim: 4, layers: 2, d_text: 0, fusion_hidden: 4, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sets = [set];
        let batch = sample_batch(&sets, 16, 3, &mut rng).unwrap();
        let mut opt = BatchOptions { alpha: false, temperature: 1.0, gradients: true, relu_signature: false, parallel: false };
        let a = batch_gradients(&m, &sets, &batch, opt).unwrap();
        opt.parallel = true;
        let b = batch_gradients(&m, &sets, &batch, opt).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
    }

    impl TrainingSet {
        fn from_split_like(g: &KnowledgeGraph) -> Self {
            TrainingSet::new("t", g, g.facts().to_vec(), g.facts().to_vec(), None, true).unwrap()
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let m = Model::new(ModelConfig { dim: 2, layers: 1, d_text: 0, fusion_hidden: 2, ..Default::default() }).unwrap();
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&m, &cfg);
        let mut p = vec![ndarray::array![[1.0, -1.0]]];
        opt.m = vec![Array2::zeros((1, 2))];
        opt.v = vec![Array2::zeros((1, 2))];
        opt.step(&mut p, &[ndarray::array![[0.5, -2.0]]]);
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[0][[0, 1]] + 0.9).abs() < 1e-6);
    }
}

#[cfg(test)]
mod gradient_check {
    use super::*;
    use crate::model::{FusionKind, ModelConfig};
    use crate::text::TextVariant;
    use rand::SeedableRng;

    fn toy(seed: u64, d_text: usize) -> (KnowledgeGraph, Arc<EmbeddingTable>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let facts: Vec<Triple> = (0..60)
            .map(|_| Triple::new(rng.random_range(0..15), rng.random_range(0..20), rng.random_range(0..15)))
            .collect();
        let g = KnowledgeGraph::new(15, 20, facts).unwrap();
        let data = Array2::from_shape_fn((40, d_text), |_| rng.random_range(-1.0..1.0));
        (g, Arc::new(EmbeddingTable { variant: TextVariant::RelName, data }))
    }

    fn check(fusion: FusionKind, seed: u64) -> (f64, usize, usize) {
        let (g, table) = toy(seed, 6);
        let policy = SparsifierPolicy::TopXPercent { x: 20.0 };
        let set = TrainingSet::new("toy", &g, g.facts().to_vec(), g.facts().to_vec(), Some((table, policy)), true).unwrap();
        let sets = [set];
        let mut model = Model::new(ModelConfig { dim: 8, layers: 2, d_text: 6, fusion, fusion_hidden: 8, init_seed: seed }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let batch = sample_batch(&sets, 4, 5, &mut rng).unwrap();
        let opt = BatchOptions { alpha: true, temperature: 1.0, gradients: true, relu_signature: true, parallel: false };
        let analytic = batch_gradients(&model, &sets, &batch, opt).unwrap();
        let fwd = BatchOptions { gradients: false, ..opt };
        let h = 1e-5;
        let (mut worst, mut checked, mut kinks) = (0.0f64, 0, 0);
        for id in 0..model.tensors.len() {
            for k in 0..model.tensors[id].len() {
                let orig = model.tensors[id].as_slice().unwrap()[k];
                model.tensors[id].as_slice_mut().unwrap()[k] = orig + h;
                let plus = batch_gradients(&model, &sets, &batch, fwd).unwrap();
                model.tensors[id].as_slice_mut().unwrap()[k] = orig - h;
                let minus = batch_gradients(&model, &sets, &batch, fwd).unwrap();
                model.tensors[id].as_slice_mut().unwrap()[k] = orig;
                if plus.relu_signature != minus.relu_signature {
                    kinks += 1;
                    continue;
                }
                let numeric = (plus.loss - minus.loss) / (2.0 * h);
                let a = analytic.grads[id].as_slice().unwrap()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        (worst, checked, kinks)
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        for (fusion, seed) in [(FusionKind::Mlp, 1), (FusionKind::Attention, 2)] {
            let (worst, checked, kinks) = check(fusion, seed);
            eprintln!("{fusion:?}: worst {worst:e} over {checked} coords, {kinks} kinks skipped");
            assert!(worst <= 1e-4, "{fusion:?}: {worst}");
            assert!(checked > 1000);
        }
    }
}
