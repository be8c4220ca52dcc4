//! Exact-match overlap between pretraining corpora and test datasets.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::eval::csv_field;
use crate::kg::{DatasetSplit, Triple};

pub type LabelTriple = (String, String, String);

/// Trim, collapse internal whitespace, lowercase.
pub fn canonical_relation(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn labelled(split: &DatasetSplit, facts: &[Triple]) -> Vec<LabelTriple> {
    let v = &split.vocab;
    facts
        .iter()
        .map(|t| {
            (
                v.entity_name(t.head).to_owned(),
                canonical_relation(v.relation_name(t.relation)),
                v.entity_name(t.tail).to_owned(),
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusScope {
    /// The training graph only (what pretraining consumes).
    #[default]
    Train,
    /// Every graph and query set of the dataset.
    All,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    pub facts: HashSet<LabelTriple>,
}

impl Corpus {
    pub fn from_split(split: &DatasetSplit, scope: CorpusScope) -> Self {
        let mut facts: HashSet<LabelTriple> = labelled(split, split.train_graph.graph.facts()).into_iter().collect();
        if scope == CorpusScope::All {
            for part in [
                split.valid_graph.graph.facts(),
                split.test_graph.graph.facts(),
                &split.valid_queries[..],
                &split.test_queries[..],
            ] {
                facts.extend(labelled(split, part));
            }
        }
        Self { name: split.name.clone(), facts }
    }

    pub fn from_labels<'a>(name: &str, facts: impl IntoIterator<Item = [&'a str; 3]>) -> Self {
        Self {
            name: name.into(),
            facts: facts
                .into_iter()
                .map(|[h, r, t]| (h.to_owned(), canonical_relation(r), t.to_owned()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceLeak {
    pub test_graph: usize,
    pub queries: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetLeak {
    pub dataset: String,
    pub test_graph_facts: usize,
    pub queries: usize,
    /// Test-graph facts found in any corpus.
    pub indirect: usize,
    pub indirect_pct: f64,
    /// Test queries found in any corpus.
    pub direct: usize,
    pub direct_pct: f64,
    pub sources: BTreeMap<String, SourceLeak>,
}

impl DatasetLeak {
    pub fn leaks(&self) -> bool {
        self.indirect > 0 || self.direct > 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub datasets: Vec<DatasetLeak>,
}

fn pct(n: usize, of: usize) -> f64 {
    if of == 0 {
        0.0
    } else {
        100.0 * n as f64 / of as f64
    }
}

pub fn audit_leakage(corpora: &[Corpus], tests: &[DatasetSplit]) -> LeakageReport {
    let datasets = tests
        .iter()
        .map(|split| {
            let graph: HashSet<LabelTriple> = labelled(split, split.test_graph.graph.facts()).into_iter().collect();
            let queries: HashSet<LabelTriple> = labelled(split, &split.test_queries).into_iter().collect();
            let in_any = |set: &HashSet<LabelTriple>| set.iter().filter(|t| corpora.iter().any(|c| c.facts.contains(*t))).count();
            let mut sources = BTreeMap::new();
            for c in corpora {
                let s = SourceLeak {
                    test_graph: graph.intersection(&c.facts).count(),
                    queries: queries.intersection(&c.facts).count(),
                };
                if s.test_graph > 0 || s.queries > 0 {
                    sources.insert(c.name.clone(), s);
                }
            }
            let (indirect, direct) = (in_any(&graph), in_any(&queries));
            DatasetLeak {
                dataset: split.name.clone(),
                test_graph_facts: graph.len(),
                queries: queries.len(),
                indirect,
                indirect_pct: pct(indirect, graph.len()),
                direct,
                direct_pct: pct(direct, queries.len()),
                sources,
            }
        })
        .collect();
    LeakageReport { datasets }
}

impl LeakageReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per (dataset, leak kind, source); percentages relative to the
    /// dataset's test graph or query set.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "dataset,kind,source,count,percent")?;
        for d in &self.datasets {
            for (kind, of) in [("indirect", d.test_graph_facts), ("direct", d.queries)] {
                let mut any = false;
                for (src, s) in &d.sources {
                    let n = if kind == "indirect" { s.test_graph } else { s.queries };
                    if n > 0 {
                        any = true;
                        writeln!(w, "{},{kind},{},{n},{:.4}", csv_field(&d.dataset), csv_field(src), pct(n, of))?;
                    }
                }
                if !any {
                    writeln!(w, "{},{kind},,0,0.0000", csv_field(&d.dataset))?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Regime, TaskMode};

    fn names(prefix: &str, n: usize) -> Vec<[String; 3]> {
        (0..n).map(|i| [format!("{prefix}e{i}"), "rel".into(), format!("{prefix}e{}", i + 1)]).collect()
    }

    fn split_of(name: &str, graph: &[[String; 3]], queries: &[[String; 3]]) -> DatasetSplit {
        let g: Vec<[&str; 3]> = graph.iter().map(|t| [t[0].as_str(), t[1].as_str(), t[2].as_str()]).collect();
        let q: Vec<[&str; 3]> = queries.iter().map(|t| [t[0].as_str(), t[1].as_str(), t[2].as_str()]).collect();
        DatasetSplit::from_labeled(name, &g, None, &q, Some(&g), &q, TaskMode::BothDirections, Regime::InductiveEntity).unwrap()
    }

    #[test]
    fn relation_canonicalisation() {
        assert_eq!(canonical_relation("  Located   In "), "located in");
    }

    #[test]
    fn disjoint_corpora_do_not_leak() {
        let pre = Corpus::from_labels("pre", [["x", "r", "y"]]);
        let g = names("t", 5);
        let rep = audit_leakage(&[pre], &[split_of("test", &g, &g[..1])]);
        assert_eq!(rep.datasets[0].indirect, 0);
        assert_eq!(rep.datasets[0].direct_pct, 0.0);
        assert!(!rep.datasets[0].leaks());
    }

    #[test]
    fn planted_subset_counts_exactly() {
        let corpus = names("p", 100);
        let pre = Corpus::from_labels("pre", corpus.iter().map(|t| [t[0].as_str(), t[1].as_str(), t[2].as_str()]));
        let mut graph = corpus[20..30].to_vec();
        graph.extend(names("fresh", 15));
        let q = vec![["freshe0".to_string(), "other".into(), "freshe3".into()]];
        let rep = audit_leakage(&[pre], &[split_of("test", &graph, &q)]);
        let d = &rep.datasets[0];
        assert_eq!((d.indirect, d.test_graph_facts), (10, 25));
        assert!((d.indirect_pct - 40.0).abs() < 1e-12);
        assert_eq!(d.sources["pre"].test_graph, 10);
    }

    #[test]
    fn planted_queries_are_direct_leakage() {
        let g = names("g", 8);
        let q: Vec<[String; 3]> = (0..4).map(|i| [format!("ge{i}"), "q".into(), format!("ge{}", i + 2)]).collect();
        let mut pre_facts = names("other", 30);
        pre_facts.extend(q[..2].iter().cloned());
        let pre = Corpus::from_labels("pre", pre_facts.iter().map(|t| [t[0].as_str(), t[1].as_str(), t[2].as_str()]));
        let rep = audit_leakage(&[pre], &[split_of("test", &g, &q)]);
        let d = &rep.datasets[0];
        assert_eq!(d.direct, 2);
        assert_eq!(d.direct_pct, 50.0);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.contains("test,direct,pre,2,50.0000"));
        assert!(csv.contains("test,indirect,,0,0.0000"));
    }

    #[test]
    fn relation_labels_match_after_canonicalisation() {
        let pre = Corpus::from_labels("pre", [["a", "Works  For", "b"]]);
        let g = vec![["a".to_string(), "works for".to_string(), "b".to_string()]];
        let rep = audit_leakage(&[pre], &[split_of("t", &g, &g)]);
        assert_eq!(rep.datasets[0].indirect, 1);
    }
}
