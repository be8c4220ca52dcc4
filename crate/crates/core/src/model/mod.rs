//! The learnable core: conditional message passing over the two relation
//! graphs, fusion, entity-level message passing, scoring and training.

pub mod checkpoint;
pub mod forward;
pub mod graph;
pub mod train;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

pub use forward::{entity_pass, fuse, relation_pass, EdgeFeature, MessageEdges};
pub use graph::{InferenceGraph, QueryNode, RelationContext};
pub use train::{train, AdamW, TrainConfig, TrainLog, TrainingSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    Mlp,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub fusion: FusionKind,
    pub fusion_hidden: usize,
    /// Width of the text embeddings; 0 builds a structural-only model.
    pub d_text: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 6,
            fusion: FusionKind::Mlp,
            fusion_hidden: 128,
            d_text: 1024,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.fusion_hidden == 0 {
            return Err(Error::Config("dim, layers and fusion_hidden must be positive".into()));
        }
        if self.dim > 4096 || self.layers > 64 {
            return Err(Error::Config("dim or layers out of range".into()));
        }
        Ok(())
    }
}

/// Parameter ids of one message-passing layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub w: usize,
    pub b: usize,
    pub ln_gain: usize,
    pub ln_bias: usize,
}

#[derive(Clone, Debug)]
pub enum FusionIds {
    Mlp { w1: usize, b1: usize, w2: usize, b2: usize },
    Attention { u: usize, w_o: usize, b_o: usize },
}

#[derive(Clone, Debug)]
pub struct TextIds {
    pub proj_w: usize,
    pub proj_b: usize,
    pub layers: Vec<LayerIds>,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub edge_types: usize,
    pub structural: Vec<LayerIds>,
    pub text: Option<TextIds>,
    pub fusion: FusionIds,
    pub entity: Vec<LayerIds>,
    pub score_w1: usize,
    pub score_b1: usize,
    pub score_w2: usize,
    pub score_b2: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
    pub layout: Layout,
}

enum Init {
    FanIn(usize),
    Normal,
    Ones,
    Zeros,
}

struct Builder<R> {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    rng: R,
}

impl<R: Rng> Builder<R> {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        let t = match init {
            Init::FanIn(fan) => {
                let b = 1.0 / (fan as f64).sqrt();
                Array2::from_shape_fn(shape, |_| self.rng.random_range(-b..b))
            }
            Init::Normal => Array2::from_shape_fn(shape, |_| StandardNormal.sample(&mut self.rng)),
            Init::Ones => Array2::ones(shape),
            Init::Zeros => Array2::zeros(shape),
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn layer(&mut self, prefix: &str, i: usize, d: usize) -> LayerIds {
        LayerIds {
            w: self.add(format!("{prefix}.{i}.w"), (2 * d, d), Init::FanIn(2 * d)),
            b: self.add(format!("{prefix}.{i}.b"), (1, d), Init::FanIn(2 * d)),
            ln_gain: self.add(format!("{prefix}.{i}.ln_gain"), (1, d), Init::Ones),
            ln_bias: self.add(format!("{prefix}.{i}.ln_bias"), (1, d), Init::Zeros),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: seed::component_rng(config.init_seed, "model-init", 0),
        };
        let edge_types = b.add("edge_types".into(), (4, d), Init::Normal);
        let structural = (0..config.layers).map(|i| b.layer("structural", i, d)).collect();
        let text = (config.d_text > 0).then(|| TextIds {
            proj_w: b.add("text.proj.w".into(), (config.d_text, d), Init::FanIn(config.d_text)),
            proj_b: b.add("text.proj.b".into(), (1, d), Init::FanIn(config.d_text)),
            layers: (0..config.layers).map(|i| b.layer("textual", i, d)).collect(),
        });
        let fusion = match config.fusion {
            FusionKind::Mlp => {
                let h = config.fusion_hidden;
                FusionIds::Mlp {
                    w1: b.add("fusion.w1".into(), (2 * d, h), Init::FanIn(2 * d)),
                    b1: b.add("fusion.b1".into(), (1, h), Init::FanIn(2 * d)),
                    w2: b.add("fusion.w2".into(), (h, d), Init::FanIn(h)),
                    b2: b.add("fusion.b2".into(), (1, d), Init::FanIn(h)),
                }
            }
            FusionKind::Attention => FusionIds::Attention {
                u: b.add("fusion.u".into(), (d, 1), Init::FanIn(d)),
                w_o: b.add("fusion.w_o".into(), (d, d), Init::FanIn(d)),
                b_o: b.add("fusion.b_o".into(), (1, d), Init::FanIn(d)),
            },
        };
        let entity = (0..config.layers).map(|i| b.layer("entity", i, d)).collect();
        let layout = Layout {
            edge_types,
            structural,
            text,
            fusion,
            entity,
            score_w1: b.add("score.w1".into(), (d, d), Init::FanIn(d)),
            score_b1: b.add("score.b1".into(), (1, d), Init::FanIn(d)),
            score_w2: b.add("score.w2".into(), (d, 1), Init::FanIn(d)),
            score_b2: b.add("score.b2".into(), (1, 1), Init::FanIn(d)),
        };
        Ok(Self {
            config,
            names: b.names,
            tensors: b.tensors,
            layout,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn has_text(&self) -> bool {
        self.layout.text.is_some()
    }

    /// Ids of parameters that only the textual branch reads.
    pub fn text_parameter_ids(&self) -> Vec<usize> {
        match &self.layout.text {
            None => Vec::new(),
            Some(t) => {
                let mut ids = vec![t.proj_w, t.proj_b];
                for l in &t.layers {
                    ids.extend([l.w, l.b, l.ln_gain, l.ln_bias]);
                }
                ids
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}
