use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, KnowledgeGraph, Regime, TaskMode, TextAttributedKG, Triple, Vocabulary};
use crate::error::{Error, Result};

/// JSON manifest describing where a dataset's files live, relative to the
/// manifest's directory. Missing graph entries default to the train graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default)]
    pub task_mode: TaskMode,
    #[serde(default)]
    pub regime: Regime,
    pub train_graph: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_graph: Option<String>,
    pub valid_queries: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_graph: Option<String>,
    pub test_queries: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harder: Option<HarderInfo>,
}

/// Provenance recorded for generated harder-setting splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarderInfo {
    pub source: String,
    pub mask_ratio: f64,
    pub seed: u64,
    pub masked_relations: Vec<String>,
    pub original_ratio: f64,
    pub achieved_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub train_facts: usize,
    pub valid_facts: usize,
    pub test_facts: usize,
    pub valid_queries: usize,
    pub test_queries: usize,
    pub duplicates_removed: usize,
}

pub(crate) struct RawSplit {
    pub train_graph: Vec<[String; 3]>,
    pub valid_graph: Option<Vec<[String; 3]>>,
    pub valid_queries: Vec<[String; 3]>,
    pub test_graph: Option<Vec<[String; 3]>>,
    pub test_queries: Vec<[String; 3]>,
}

/// Reads `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
pub fn read_triple_file(path: &Path) -> Result<Vec<[String; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: format!("expected 3 non-empty tab-separated fields, found {:?}", fields),
            });
        }
        out.push([
            fields[0].to_owned(),
            fields[1].to_owned(),
            fields[2].to_owned(),
        ]);
    }
    Ok(out)
}

/// Reads `identifier<TAB>label` lines.
pub fn read_label_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, label)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: "expected identifier<TAB>label".into(),
            });
        };
        out.insert(id.to_owned(), label.to_owned());
    }
    Ok(out)
}

pub fn write_triple_file<'a>(
    path: &Path,
    triples: impl IntoIterator<Item = &'a Triple>,
    vocab: &Vocabulary,
) -> Result<()> {
    let mut s = String::new();
    for t in triples {
        s.push_str(vocab.entity_name(t.head));
        s.push('\t');
        s.push_str(vocab.relation_name(t.relation));
        s.push('\t');
        s.push_str(vocab.entity_name(t.tail));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_owned()
    }
}

/// Loads a dataset from a directory holding `manifest.json` (or from the
/// manifest file itself).
pub fn load_dataset(path: &Path) -> Result<(DatasetSplit, LoadReport)> {
    let manifest_path = resolve_manifest(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let file = |rel: &str| root.join(rel);

    let train_graph = read_triple_file(&file(&manifest.train_graph))?;
    let read_opt = |p: &Option<String>| -> Result<Option<Vec<[String; 3]>>> {
        match p {
            Some(p) if *p != manifest.train_graph => Ok(Some(read_triple_file(&file(p))?)),
            _ => Ok(None),
        }
    };
    let raw = RawSplit {
        valid_graph: read_opt(&manifest.valid_graph)?,
        test_graph: read_opt(&manifest.test_graph)?,
        valid_queries: read_triple_file(&file(&manifest.valid_queries))?,
        test_queries: read_triple_file(&file(&manifest.test_queries))?,
        train_graph,
    };
    let rel_labels = match &manifest.relation_labels {
        Some(p) => read_label_file(&file(p))?,
        None => HashMap::new(),
    };
    let ent_labels = match &manifest.entity_labels {
        Some(p) => Some(read_label_file(&file(p))?),
        None => None,
    };
    let split = assemble_split(
        &manifest.name,
        raw,
        &rel_labels,
        ent_labels.as_ref(),
        manifest.task_mode,
        manifest.regime,
        manifest.harder.clone(),
    )?;
    let report = LoadReport {
        train_facts: split.train_graph.graph.len(),
        valid_facts: split.valid_graph.graph.len(),
        test_facts: split.test_graph.graph.len(),
        valid_queries: split.valid_queries.len(),
        test_queries: split.test_queries.len(),
        duplicates_removed: split.train_graph.graph.duplicates_removed()
            + if manifest.valid_graph.is_some() { split.valid_graph.graph.duplicates_removed() } else { 0 }
            + if manifest.test_graph.is_some() { split.test_graph.graph.duplicates_removed() } else { 0 },
    };
    log::info!(
        "loaded {}: {} entities, {} relations, train/valid/test facts {}/{}/{}, queries {}/{}",
        split.name,
        split.num_entities(),
        split.num_relations(),
        report.train_facts,
        report.valid_facts,
        report.test_facts,
        report.valid_queries,
        report.test_queries
    );
    Ok((split, report))
}

fn dedup_queries(qs: Vec<Triple>, what: &str) -> Vec<Triple> {
    let mut seen = std::collections::HashSet::new();
    let n = qs.len();
    let out: Vec<Triple> = qs.into_iter().filter(|t| seen.insert(*t)).collect();
    if out.len() < n {
        log::warn!("dropped {} duplicate {what}", n - out.len());
    }
    out
}

pub(crate) fn assemble_split(
    name: &str,
    raw: RawSplit,
    rel_labels: &HashMap<String, String>,
    ent_labels: Option<&HashMap<String, String>>,
    task_mode: TaskMode,
    regime: Regime,
    harder: Option<HarderInfo>,
) -> Result<DatasetSplit> {
    let mut vocab = Vocabulary::default();
    let mut intern_all = |xs: &[[String; 3]]| -> Vec<Triple> {
        xs.iter().map(|t| vocab.intern(&t[0], &t[1], &t[2])).collect()
    };
    let train = intern_all(&raw.train_graph);
    let valid_g = raw.valid_graph.as_deref().map(&mut intern_all);
    let valid_q = intern_all(&raw.valid_queries);
    let test_g = raw.test_graph.as_deref().map(&mut intern_all);
    let test_q = intern_all(&raw.test_queries);

    let ne = vocab.entities.len();
    let nr = vocab.relations.len();
    let relation_labels = Arc::new(
        vocab
            .relations
            .iter()
            .map(|r| rel_labels.get(r).cloned().unwrap_or_else(|| r.clone()))
            .collect::<Vec<_>>(),
    );
    let entity_labels = ent_labels.map(|m| {
        Arc::new(
            vocab
                .entities
                .iter()
                .map(|e| m.get(e).cloned().unwrap_or_else(|| e.clone()))
                .collect::<Vec<_>>(),
        )
    });
    let wrap = |g: KnowledgeGraph| TextAttributedKG {
        graph: g,
        relation_labels: relation_labels.clone(),
        entity_labels: entity_labels.clone(),
    };
    let train_graph = wrap(KnowledgeGraph::new(ne, nr, train)?);
    let valid_graph = match valid_g {
        Some(v) => wrap(KnowledgeGraph::new(ne, nr, v)?),
        None => train_graph.clone(),
    };
    let test_graph = match test_g {
        Some(v) => wrap(KnowledgeGraph::new(ne, nr, v)?),
        None => train_graph.clone(),
    };
    let valid_queries = dedup_queries(valid_q, "validation queries");
    let test_queries = dedup_queries(test_q, "test queries");

    let mut in_some_graph = vec![false; ne];
    for g in [&train_graph, &valid_graph, &test_graph] {
        for t in g.graph.facts() {
            in_some_graph[t.head] = true;
            in_some_graph[t.tail] = true;
        }
    }
    let vocab = Arc::new(vocab);
    for (queries, graph, what) in [
        (&valid_queries, &valid_graph, "validation"),
        (&test_queries, &test_graph, "test"),
    ] {
        let mut in_graph = vec![false; ne];
        for t in graph.graph.facts() {
            in_graph[t.head] = true;
            in_graph[t.tail] = true;
        }
        for q in queries.iter() {
            for e in [q.head, q.tail] {
                if !in_some_graph[e] {
                    return Err(Error::Validation(format!(
                        "{what} query entity {:?} does not occur in any graph",
                        vocab.entity_name(e)
                    )));
                }
                if !in_graph[e] {
                    log::warn!(
                        "{what} query entity {:?} is missing from the {what} graph",
                        vocab.entity_name(e)
                    );
                }
            }
        }
    }

    Ok(DatasetSplit {
        name: name.to_owned(),
        vocab,
        train_graph,
        valid_graph,
        valid_queries,
        test_graph,
        test_queries,
        task_mode,
        regime,
        harder,
    })
}

/// Writes a split in the directory layout understood by [`load_dataset`].
pub fn write_dataset(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab = &split.vocab;
    write_triple_file(&dir.join("train_graph.txt"), split.train_graph.graph.facts(), vocab)?;
    write_triple_file(&dir.join("valid_graph.txt"), split.valid_graph.graph.facts(), vocab)?;
    write_triple_file(&dir.join("valid_queries.txt"), &split.valid_queries, vocab)?;
    write_triple_file(&dir.join("test_graph.txt"), split.test_graph.graph.facts(), vocab)?;
    write_triple_file(&dir.join("test_queries.txt"), &split.test_queries, vocab)?;

    let mut labels = String::new();
    for (i, r) in vocab.relations.iter().enumerate() {
        labels.push_str(r);
        labels.push('\t');
        labels.push_str(&split.relation_labels()[i]);
        labels.push('\n');
    }
    let labels_path = dir.join("relation_labels.txt");
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;

    let entity_labels = match &split.train_graph.entity_labels {
        Some(el) => {
            let mut s = String::new();
            for (i, e) in vocab.entities.iter().enumerate() {
                s.push_str(e);
                s.push('\t');
                s.push_str(&el[i]);
                s.push('\n');
            }
            let p = dir.join("entity_labels.txt");
            fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
            Some("entity_labels.txt".to_owned())
        }
        None => None,
    };

    let manifest = DatasetManifest {
        name: split.name.clone(),
        task_mode: split.task_mode,
        regime: split.regime,
        train_graph: "train_graph.txt".into(),
        valid_graph: Some("valid_graph.txt".into()),
        valid_queries: "valid_queries.txt".into(),
        test_graph: Some("test_graph.txt".into()),
        test_queries: "test_queries.txt".into(),
        relation_labels: Some("relation_labels.txt".into()),
        entity_labels,
        harder: split.harder.clone(),
    };
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))
}
