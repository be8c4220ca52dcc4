//! Filtered ranking, metric aggregation, hybrid selection and significance tests.

pub mod run;
pub mod stats;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::kg::{Regime, Triple, Vocabulary};
use crate::{Error, Result};

pub use run::{evaluate_split, EvalOptions, EvalSide};
pub use stats::{mann_whitney_u, MannWhitney};

pub const HITS_AT: [usize; 3] = [1, 3, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Tail,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: Triple,
    pub direction: Direction,
    pub rank: usize,
}

/// Pessimistic filtered rank: one plus the number of unfiltered competitors
/// scoring at least as high as the answer.
pub fn rank_filtered(scores: &[f64], answer: usize, filtered: &HashSet<usize>) -> Result<usize> {
    let s = *scores
        .get(answer)
        .ok_or_else(|| Error::Eval(format!("answer {answer} outside {} scores", scores.len())))?;
    if filtered.contains(&answer) {
        return Err(Error::Eval(format!("answer {answer} is in its own filter set")));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("score of answer {answer}")));
    }
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| i != answer && !filtered.contains(&i) && x >= s)
        .count())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub queries: usize,
    pub mrr: f64,
    /// Keyed `"1"`, `"3"`, `"10"`.
    pub hits: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Eval("no ranks to aggregate".into()));
        }
        if ranks.contains(&0) {
            return Err(Error::Eval("ranks are 1-based".into()));
        }
        let n = ranks.len() as f64;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        let hits = HITS_AT
            .iter()
            .map(|&k| (k.to_string(), ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
            .collect();
        Ok(Self { queries: ranks.len(), mrr, hits })
    }

    pub fn hits_at(&self, k: usize) -> f64 {
        self.hits.get(&k.to_string()).copied().unwrap_or(f64::NAN)
    }

    fn mean_of<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Self {
        let items: Vec<&Metrics> = items.into_iter().collect();
        let n = items.len() as f64;
        Self {
            queries: items.iter().map(|m| m.queries).sum(),
            mrr: items.iter().map(|m| m.mrr).sum::<f64>() / n,
            hits: HITS_AT
                .iter()
                .map(|k| (k.to_string(), items.iter().map(|m| m.hits_at(*k)).sum::<f64>() / n))
                .collect(),
        }
    }
}

/// Ranks of one dataset in one run.
#[derive(Clone, Debug)]
pub struct DatasetResults {
    pub name: String,
    pub regime: Regime,
    pub results: Vec<QueryResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub regime: Regime,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Metrics of one run: per dataset, per regime (unweighted), and total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub datasets: BTreeMap<String, DatasetMetrics>,
    pub regimes: BTreeMap<String, Metrics>,
    pub total: Metrics,
}

pub fn aggregate(results: &[DatasetResults]) -> Result<RunMetrics> {
    if results.is_empty() {
        return Err(Error::Eval("empty result set".into()));
    }
    let mut datasets = BTreeMap::new();
    for d in results {
        let ranks: Vec<usize> = d.results.iter().map(|r| r.rank).collect();
        let metrics = Metrics::from_ranks(&ranks).map_err(|_| Error::Eval(format!("dataset {} has no queries", d.name)))?;
        if datasets.insert(d.name.clone(), DatasetMetrics { regime: d.regime, metrics }).is_some() {
            return Err(Error::Eval(format!("dataset {} listed twice", d.name)));
        }
    }
    let mut regimes = BTreeMap::new();
    for regime in [Regime::InductiveEntityRelation, Regime::InductiveEntity, Regime::Transductive] {
        let members: Vec<&Metrics> = datasets.values().filter(|d| d.regime == regime).map(|d| &d.metrics).collect();
        if !members.is_empty() {
            regimes.insert(regime.label().to_owned(), Metrics::mean_of(members));
        }
    }
    let total = Metrics::mean_of(datasets.values().map(|d| &d.metrics));
    Ok(RunMetrics { datasets, regimes, total })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mrr: MeanStd,
    pub hits10: MeanStd,
}

impl Summary {
    fn over<'a>(ms: impl Iterator<Item = &'a Metrics>) -> Self {
        let ms: Vec<&Metrics> = ms.collect();
        Self {
            mrr: mean_std(&ms.iter().map(|m| m.mrr).collect::<Vec<_>>()),
            hits10: mean_std(&ms.iter().map(|m| m.hits_at(10)).collect::<Vec<_>>()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    /// Mean and sample standard deviation across runs.
    pub datasets: BTreeMap<String, Summary>,
    pub regimes: BTreeMap<String, Summary>,
    pub total: Summary,
    /// Per-dataset α used, when a policy chose it.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub alpha: BTreeMap<String, u8>,
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Eval("no runs".into()))?;
        let names: Vec<String> = first.datasets.keys().cloned().collect();
        if runs.iter().any(|r| r.datasets.keys().ne(names.iter())) {
            return Err(Error::Eval("runs cover different datasets".into()));
        }
        let datasets = names
            .iter()
            .map(|n| (n.clone(), Summary::over(runs.iter().map(|r| &r.datasets[n].metrics))))
            .collect();
        let regimes = first
            .regimes
            .keys()
            .map(|k| (k.clone(), Summary::over(runs.iter().map(|r| &r.regimes[k]))))
            .collect();
        let total = Summary::over(runs.iter().map(|r| &r.total));
        Ok(Self { runs, datasets, regimes, total, alpha: BTreeMap::new() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned text table grouped by regime, with run mean ± std.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<28} {:>5} {:>17} {:>17}", "Regime", "Dataset", "alpha", "MRR", "H@10");
        let fmt = |m: &MeanStd| {
            if self.runs.len() > 1 {
                format!("{:.4} ± {:.4}", m.mean, m.std)
            } else {
                format!("{:.4}", m.mean)
            }
        };
        let first = &self.runs[0];
        for regime in [Regime::InductiveEntityRelation, Regime::InductiveEntity, Regime::Transductive] {
            let label = regime.label();
            let Some(avg) = self.regimes.get(label) else { continue };
            for (name, d) in &first.datasets {
                if d.regime != regime {
                    continue;
                }
                let s = &self.datasets[name];
                let alpha = self.alpha.get(name).map_or("-".to_string(), |a| a.to_string());
                let _ = writeln!(out, "{label:<16} {name:<28} {alpha:>5} {:>17} {:>17}", fmt(&s.mrr), fmt(&s.hits10));
            }
            let n = first.datasets.values().filter(|d| d.regime == regime).count();
            let _ = writeln!(out, "{label:<16} {:<28} {:>5} {:>17} {:>17}", format!("Avg ({n} graphs)"), "", fmt(&avg.mrr), fmt(&avg.hits10));
        }
        let _ = writeln!(
            out,
            "{:<16} {:<28} {:>5} {:>17} {:>17}",
            "Total Avg",
            format!("({} graphs)", first.datasets.len()),
            "",
            fmt(&self.total.mrr),
            fmt(&self.total.hits10)
        );
        out
    }
}

/// Per-query ranks as CSV, labelled through the dataset vocabulary.
pub fn write_ranks_csv(
    w: &mut impl Write,
    run: usize,
    results: &DatasetResults,
    vocab: &Vocabulary,
) -> std::io::Result<()> {
    for r in &results.results {
        let q = r.query;
        writeln!(
            w,
            "{},{},{},{},{},{:?},{}",
            csv_field(&results.name),
            run,
            csv_field(vocab.entity_name(q.head)),
            csv_field(vocab.relation_name(q.relation)),
            csv_field(vocab.entity_name(q.tail)),
            r.direction,
            r.rank
        )?;
    }
    Ok(())
}

pub const RANKS_CSV_HEADER: &str = "dataset,run,head,relation,tail,direction,rank";

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// α = 1 iff validation MRR with text is at least the MRR without.
pub fn select_hybrid(with_text: &RunMetrics, without_text: &RunMetrics) -> Result<BTreeMap<String, u8>> {
    let mut out = BTreeMap::new();
    for (name, on) in &with_text.datasets {
        let off = without_text
            .datasets
            .get(name)
            .ok_or_else(|| Error::Eval(format!("dataset {name} missing from the α = 0 evaluation")))?;
        if on.metrics.queries != off.metrics.queries {
            return Err(Error::Eval(format!("dataset {name}: evaluations used different query sets")));
        }
        let alpha = u8::from(on.metrics.mrr >= off.metrics.mrr);
        log::info!(
            "hybrid: {name}: validation MRR {:.4} (α=1) vs {:.4} (α=0) → α = {alpha}",
            on.metrics.mrr,
            off.metrics.mrr
        );
        out.insert(name.clone(), alpha);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rank_edge_cases() {
        let none = HashSet::new();
        assert_eq!(rank_filtered(&[0.1, 0.9, 0.3], 1, &none).unwrap(), 1);
        assert_eq!(rank_filtered(&[0.5; 5], 2, &none).unwrap(), 5);
        assert!(rank_filtered(&[0.5; 5], 2, &HashSet::from([2])).is_err());
        assert!(rank_filtered(&[0.5; 5], 7, &none).is_err());
    }

    #[test]
    fn filtering_matches_a_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..10).map(|_| rng.random_range(0..4) as f64).collect();
            let answer = rng.random_range(0..10);
            let mut filtered = HashSet::new();
            while filtered.len() < 2 {
                let f = rng.random_range(0..10);
                if f != answer {
                    filtered.insert(f);
                }
            }
            // Oracle: drop filtered, sort descending with the answer last among ties.
            let mut kept: Vec<(f64, bool)> = (0..10)
                .filter(|i| !filtered.contains(i))
                .map(|i| (scores[i], i == answer))
                .collect();
            kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let oracle = kept.iter().position(|x| x.1).unwrap() + 1;
            assert_eq!(rank_filtered(&scores, answer, &filtered).unwrap(), oracle);
        }
    }

    #[test]
    fn hand_arithmetic() {
        let m = Metrics::from_ranks(&[1, 2, 4]).unwrap();
        assert!((m.mrr - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.hits_at(10), 1.0);
        assert_eq!(m.hits_at(1), 1.0 / 3.0);
        assert_eq!(Metrics::from_ranks(&[1]).unwrap().mrr, 1.0);
        assert!(Metrics::from_ranks(&[]).is_err());
    }

    fn ds(name: &str, regime: Regime, ranks: &[usize]) -> DatasetResults {
        DatasetResults {
            name: name.into(),
            regime,
            results: ranks
                .iter()
                .map(|&rank| QueryResult { query: Triple::new(0, 0, 0), direction: Direction::Tail, rank })
                .collect(),
        }
    }

    #[test]
    fn regime_and_total_averages_are_unweighted() {
        let run = aggregate(&[
            ds("a", Regime::Transductive, &[1]),
            ds("b", Regime::Transductive, &[2, 2, 2, 2]),
            ds("c", Regime::InductiveEntity, &[4]),
        ])
        .unwrap();
        assert!((run.regimes["Transductive"].mrr - 0.75).abs() < 1e-15);
        assert!((run.total.mrr - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn hybrid_prefers_text_on_ties() {
        let on = aggregate(&[ds("x", Regime::Transductive, &[1, 3]), ds("y", Regime::Transductive, &[2])]).unwrap();
        let off = aggregate(&[ds("x", Regime::Transductive, &[1, 3]), ds("y", Regime::Transductive, &[1])]).unwrap();
        let pick = select_hybrid(&on, &off).unwrap();
        assert_eq!(pick["x"], 1);
        assert_eq!(pick["y"], 0);
    }

    #[test]
    fn report_statistics_and_rendering() {
        let r1 = aggregate(&[ds("x", Regime::Transductive, &[1])]).unwrap();
        let r2 = aggregate(&[ds("x", Regime::Transductive, &[2])]).unwrap();
        let rep = MetricsReport::from_runs(vec![r1, r2]).unwrap();
        assert!((rep.total.mrr.mean - 0.75).abs() < 1e-15);
        assert!((rep.total.mrr.std - (0.125f64).sqrt()).abs() < 1e-15);
        let table = rep.to_table();
        assert!(table.contains("Total Avg"));
        assert!(table.contains("0.7500 ± 0.3536"));
        assert_eq!(rep.to_json().unwrap(), rep.to_json().unwrap());
    }

    #[test]
    fn csv_fields_are_quoted_when_needed() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
