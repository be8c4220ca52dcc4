//! Relation text enrichment: prompting, parsing and per-variant embedding tables.

pub mod backend;
pub mod cache;
pub mod parse;
pub mod pipeline;
pub mod prompt;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::kg::DatasetSplit;
use crate::{Error, Result};

pub use parse::{parse_response, ParsedEnrichment};
pub use prompt::{build_prompt, build_prompts, Prompt, SYSTEM_INSTRUCTION};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTextRecord {
    pub raw_identifier: String,
    pub cleaned_name: String,
    pub forward_description: String,
    pub inverse_description: String,
    pub example_triple: (String, String, String),
    /// False when the fields are fallbacks copied from the raw identifier.
    pub enriched: bool,
}

impl RelationTextRecord {
    pub fn unenriched(raw: &str, example: (String, String, String)) -> Self {
        Self {
            raw_identifier: raw.to_owned(),
            cleaned_name: raw.to_owned(),
            forward_description: raw.to_owned(),
            inverse_description: raw.to_owned(),
            example_triple: example,
            enriched: false,
        }
    }

    pub fn apply(&mut self, parsed: &ParsedEnrichment) -> bool {
        let key = &self.raw_identifier;
        match (parsed.cleaned.get(key), parsed.descriptions.get(key)) {
            (Some(c), Some((f, i))) => {
                self.cleaned_name = c.clone();
                self.forward_description = f.clone();
                self.inverse_description = i.clone();
                self.enriched = true;
                true
            }
            _ => false,
        }
    }

    pub fn fall_back(&mut self) {
        log::warn!(
            "relation {:?}: enrichment unavailable, using raw identifier",
            self.raw_identifier
        );
        let raw = self.raw_identifier.clone();
        self.cleaned_name = raw.clone();
        self.forward_description = raw.clone();
        self.inverse_description = raw;
        self.enriched = false;
    }
}

/// One record per relation, each with the first training occurrence as its example.
pub fn records_for_split(split: &DatasetSplit) -> Vec<RelationTextRecord> {
    let labels = split.relation_labels();
    let vocab = &split.vocab;
    let entity_labels = split.train_graph.entity_labels.clone();
    let ent = |e: usize| -> String {
        entity_labels
            .as_ref()
            .and_then(|l| l.get(e))
            .map_or_else(|| vocab.entity_name(e).to_owned(), Clone::clone)
    };
    let sources = [
        split.train_graph.graph.facts(),
        split.valid_graph.graph.facts(),
        split.test_graph.graph.facts(),
        &split.valid_queries[..],
        &split.test_queries[..],
    ];
    let mut example = vec![None; split.num_relations()];
    for facts in sources {
        for f in facts {
            if example[f.relation].is_none() {
                example[f.relation] = Some((f.head, f.tail));
            }
        }
    }
    (0..split.num_relations())
        .map(|r| {
            let label = labels.get(r).cloned().unwrap_or_else(|| vocab.relation_name(r).to_owned());
            let (h, t) = match example[r] {
                Some((h, t)) => (ent(h), ent(t)),
                None => (String::new(), String::new()),
            };
            RelationTextRecord::unenriched(&label, (h, label.clone(), t))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextVariant {
    RelName,
    LlmRelName,
    LlmRelDesc,
    CombinedSum,
    CombinedAvg,
}

impl TextVariant {
    pub const ALL: [TextVariant; 5] = [
        TextVariant::RelName,
        TextVariant::LlmRelName,
        TextVariant::LlmRelDesc,
        TextVariant::CombinedSum,
        TextVariant::CombinedAvg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TextVariant::RelName => "rel_name",
            TextVariant::LlmRelName => "llm_rel_name",
            TextVariant::LlmRelDesc => "llm_rel_desc",
            TextVariant::CombinedSum => "combined_sum",
            TextVariant::CombinedAvg => "combined_avg",
        }
    }
}

impl fmt::Display for TextVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TextVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown text variant {s:?}")))
    }
}

/// Per-relation embeddings of each text field, `R × d_text` each.
#[derive(Clone, Debug)]
pub struct SourceEmbeddings {
    pub raw: Array2<f64>,
    pub cleaned: Array2<f64>,
    pub forward: Array2<f64>,
    pub inverse: Array2<f64>,
}

impl SourceEmbeddings {
    fn check(&self) -> Result<(usize, usize)> {
        let shape = self.raw.dim();
        for (name, m) in [
            ("cleaned_name", &self.cleaned),
            ("forward_description", &self.forward),
            ("inverse_description", &self.inverse),
        ] {
            if m.dim() != shape {
                return Err(Error::Shape(format!(
                    "{name} embeddings are {:?}, raw identifier embeddings are {:?}",
                    m.dim(),
                    shape
                )));
            }
        }
        Ok(shape)
    }
}

/// Relation-node text embeddings: rows `0..R` forward, `R..2R` inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub variant: TextVariant,
    pub data: Array2<f64>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn num_nodes(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_base_relations(&self) -> usize {
        self.data.nrows() / 2
    }

    /// Rows for a subset of base relations, laid out as `[fwd…, inv…]`.
    pub fn select(&self, relations: &[usize]) -> Array2<f64> {
        let r = self.num_base_relations();
        let idx: Vec<usize> = relations.iter().copied().chain(relations.iter().map(|x| x + r)).collect();
        self.data.select(ndarray::Axis(0), &idx)
    }
}

pub fn invert_embedding(tau: ArrayView1<f64>) -> Result<Array1<f64>> {
    if tau.iter().all(|x| *x == 0.0) {
        return Err(Error::Validation("cannot invert a zero embedding".into()));
    }
    Ok(tau.mapv(|x| -x))
}

pub fn assemble_variant(
    records: &[RelationTextRecord],
    sources: &SourceEmbeddings,
    variant: TextVariant,
) -> Result<EmbeddingTable> {
    let (r, d) = sources.check()?;
    if records.len() != r {
        return Err(Error::Shape(format!("{} records but {r} embedding rows", records.len())));
    }
    let mut data = Array2::zeros((2 * r, d));
    for (i, rec) in records.iter().enumerate() {
        let raw = sources.raw.row(i);
        let fwd: Array1<f64> = if !rec.enriched {
            raw.to_owned()
        } else {
            match variant {
                TextVariant::RelName => raw.to_owned(),
                TextVariant::LlmRelName => sources.cleaned.row(i).to_owned(),
                TextVariant::LlmRelDesc => sources.forward.row(i).to_owned(),
                TextVariant::CombinedSum | TextVariant::CombinedAvg => {
                    let s = &raw + &sources.cleaned.row(i) + sources.forward.row(i);
                    if variant == TextVariant::CombinedAvg {
                        s / 3.0
                    } else {
                        s
                    }
                }
            }
        };
        let inv = if rec.enriched && variant == TextVariant::LlmRelDesc {
            sources.inverse.row(i).to_owned()
        } else {
            invert_embedding(fwd.view()).map_err(|_| {
                Error::Validation(format!(
                    "relation {:?} has a zero {variant} embedding",
                    rec.raw_identifier
                ))
            })?
        };
        if fwd.iter().chain(inv.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {:?}", rec.raw_identifier)));
        }
        data.row_mut(i).assign(&fwd);
        data.row_mut(i + r).assign(&inv);
    }
    Ok(EmbeddingTable { variant, data })
}
