//! End-to-end enrichment: batch prompts, retry, fall back, embed, assemble.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backend::{ChatBackend, Embedder};
use super::cache::{CacheStats, EmbeddingCache};
use super::parse::{parse_partial, parse_response};
use super::prompt::build_prompts;
use super::{RelationTextRecord, SourceEmbeddings};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrichConfig {
    pub max_relations_per_request: usize,
    /// Extra attempts after a failed or unparsable reply.
    pub retries: usize,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self {
            max_relations_per_request: 500,
            retries: 1,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EnrichReport {
    pub batches: usize,
    pub requests: usize,
    pub enriched: usize,
    pub fallback: Vec<String>,
}

struct BatchOutcome {
    parsed: Option<super::ParsedEnrichment>,
    requests: usize,
}

fn run_batch(backend: &dyn ChatBackend, prompt: &super::Prompt, cfg: &EnrichConfig) -> BatchOutcome {
    let mut last_reply = None;
    let attempts = cfg.retries + 1;
    for attempt in 1..=attempts {
        match backend.complete(&prompt.system, &prompt.user) {
            Ok(reply) => match parse_response(&reply, &prompt.relations) {
                Ok(p) => {
                    return BatchOutcome { parsed: Some(p), requests: attempt };
                }
                Err(e) => {
                    log::warn!("enrichment attempt {attempt}/{attempts}: {e}");
                    last_reply = Some(reply);
                }
            },
            Err(e) => log::warn!("enrichment attempt {attempt}/{attempts}: {e}"),
        }
    }
    // Salvage whatever was well-formed in the last reply.
    let parsed = last_reply.and_then(|r| parse_partial(&r, &prompt.relations).ok().map(|(p, _)| p));
    BatchOutcome { parsed, requests: attempts }
}

pub fn enrich(
    mut records: Vec<RelationTextRecord>,
    backend: &dyn ChatBackend,
    cfg: &EnrichConfig,
) -> (Vec<RelationTextRecord>, EnrichReport) {
    let mut report = EnrichReport::default();
    if records.is_empty() {
        return (records, report);
    }
    let chunk = cfg.max_relations_per_request.max(1);
    let prompts = build_prompts(&records, chunk);
    report.batches = prompts.len();
    let outcomes: Vec<BatchOutcome> = prompts.par_iter().map(|p| run_batch(backend, p, cfg)).collect();
    for (batch, outcome) in records.chunks_mut(chunk).zip(outcomes) {
        report.requests += outcome.requests;
        for rec in batch {
            let ok = outcome.parsed.as_ref().is_some_and(|p| rec.apply(p));
            if ok {
                report.enriched += 1;
            } else {
                rec.fall_back();
                report.fallback.push(rec.raw_identifier.clone());
            }
        }
    }
    (records, report)
}

pub fn embed_sources(
    records: &[RelationTextRecord],
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
) -> Result<(SourceEmbeddings, CacheStats)> {
    let mut total = CacheStats::default();
    let mut field = |name: &str, f: fn(&RelationTextRecord) -> &String| -> Result<Array2<f64>> {
        let texts: Vec<String> = records.iter().map(|r| f(r).clone()).collect();
        let (m, s) = cache.field(name, embedder, &texts)?;
        total.hits += s.hits;
        total.misses += s.misses;
        Ok(m)
    };
    let sources = SourceEmbeddings {
        raw: field("raw_identifier", |r| &r.raw_identifier)?,
        cleaned: field("cleaned_name", |r| &r.cleaned_name)?,
        forward: field("forward_description", |r| &r.forward_description)?,
        inverse: field("inverse_description", |r| &r.inverse_description)?,
    };
    Ok((sources, total))
}

pub fn save_records(path: &Path, records: &[RelationTextRecord]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(records)?).map_err(|e| Error::io(path, e))
}

pub fn load_records(path: &Path) -> Result<Vec<RelationTextRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let recs: Vec<RelationTextRecord> = serde_json::from_slice(&bytes)?;
    if let Some(r) = recs.iter().find(|r| r.cleaned_name.is_empty() || r.forward_description.is_empty()) {
        return Err(Error::Validation(format!("record {:?} has empty text fields", r.raw_identifier)));
    }
    Ok(recs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::backend::{OfflineChat, ScriptedChat};
    use std::sync::atomic::Ordering;

    fn recs(names: &[&str]) -> Vec<RelationTextRecord> {
        names
            .iter()
            .map(|n| RelationTextRecord::unenriched(n, ("a".into(), n.to_string(), "b".into())))
            .collect()
    }

    const GOOD: &str = r#"{"Causes": "Causes", "GpMF": "Gene participates Molecular Function"}
{"Causes": ["leads to effect", "effect caused by"], "GpMF": ["gene function", "function of gene"]}"#;

    #[test]
    fn successful_reply_enriches_every_record() {
        let chat = ScriptedChat::new(vec![GOOD.into()]);
        let (out, rep) = enrich(recs(&["Causes", "GpMF"]), &chat, &EnrichConfig::default());
        assert_eq!(rep.enriched, 2);
        assert!(out.iter().all(|r| r.enriched));
        assert_eq!(out[1].cleaned_name, "Gene participates Molecular Function");
        assert_eq!(out[0].inverse_description, "effect caused by");
    }

    #[test]
    fn a_bad_reply_is_retried_once() {
        let chat = ScriptedChat::new(vec!["sorry".into(), GOOD.into()]);
        let (_, rep) = enrich(recs(&["Causes", "GpMF"]), &chat, &EnrichConfig::default());
        assert_eq!(chat.calls.load(Ordering::SeqCst), 2);
        assert_eq!(rep.requests, 2);
        assert_eq!(rep.enriched, 2);
    }

    #[test]
    fn partially_valid_reply_salvages_good_relations() {
        let chat = ScriptedChat::new(vec![GOOD.into()]);
        let (out, rep) = enrich(recs(&["Causes", "GpMF", "Other"]), &chat, &EnrichConfig::default());
        assert_eq!(rep.enriched, 2);
        assert_eq!(rep.fallback, vec!["Other"]);
        assert_eq!(out[2].cleaned_name, "Other");
        assert!(!out[2].enriched);
    }

    #[test]
    fn offline_backend_falls_back_everywhere() {
        let (out, rep) = enrich(recs(&["x", "y"]), &OfflineChat, &EnrichConfig { retries: 0, ..Default::default() });
        assert_eq!(rep.requests, 1);
        assert_eq!(rep.fallback.len(), 2);
        assert!(out.iter().all(|r| r.forward_description == r.raw_identifier));
    }
}
