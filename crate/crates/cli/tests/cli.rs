use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").canonicalize().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.json"), config.to_string()).unwrap();
        Self { dir }
    }

    fn work(&self) -> PathBuf {
        self.dir.path().join("work")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.dir.path().join("run.json");
        let work = self.work();
        Command::new(env!("CARGO_BIN_EXE_kgfuse"))
            .args(["--config", config.to_str().unwrap(), "--work-dir", work.to_str().unwrap(), "--threads", "1"])
            .args(["--fixtures", data().join("fixtures").to_str().unwrap()])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        // The summary object is the last line; `evaluate` prints its table above it.
        let stdout = String::from_utf8(out.stdout).unwrap();
        serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
    }
}

fn small(datasets: &[&str], pretrain: &[&str]) -> Value {
    let d = data();
    serde_json::json!({
        "datasets": datasets.iter().map(|n| d.join(n)).collect::<Vec<_>>(),
        "pretrain": pretrain.iter().map(|n| d.join(n)).collect::<Vec<_>>(),
        "model": {"dim": 8, "layers": 2, "fusion_hidden": 8, "d_text": 32},
        "train": {"steps": 4, "batch_size": 4, "negatives": 8, "log_every": 1},
    })
}

#[test]
fn enrich_reuses_cached_records_and_embeddings() {
    let ws = Workspace::new(small(&["kinship"], &[]));
    let first = ws.ok(&["enrich"]);
    let d = &first["datasets"][0];
    assert_eq!(d["reused"], false);
    assert!(d["requests"].as_u64().unwrap() >= 1);
    assert_eq!(d["fallback"].as_array().unwrap().len(), 0);

    let second = ws.ok(&["enrich"]);
    let d = &second["datasets"][0];
    assert_eq!(d["reused"], true);
    assert_eq!(d["requests"], 0);
    assert_eq!(d["embedding_cache"]["misses"], 0);
    for variant in ["rel_name", "llm_rel_name", "llm_rel_desc", "combined_sum", "combined_avg"] {
        assert!(ws.work().join("text/kinship").read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains(variant)));
    }
}

#[test]
fn embed_requires_enrichment() {
    let ws = Workspace::new(small(&["kinship"], &[]));
    let out = ws.run(&["embed"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `kgfuse enrich` first"));
}

#[test]
fn evaluate_requires_a_checkpoint() {
    let ws = Workspace::new(small(&["organization"], &["kinship"]));
    ws.ok(&["enrich"]);
    let out = ws.run(&["evaluate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `kgfuse pretrain` first"));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let ws = Workspace::new(serde_json::json!({"datasets": ["/nonexistent/kg"]}));
    let out = ws.run(&["audit-leakage"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no manifest.json"));
}

#[test]
fn hybrid_pipeline_writes_reports() {
    let ws = Workspace::new(small(&["organization", "kinship-paraphrase"], &["kinship"]));
    ws.ok(&["enrich"]);
    ws.ok(&["--alpha", "hybrid", "pretrain"]);
    let out = ws.ok(&["--alpha", "hybrid", "evaluate"]);
    for key in ["metrics", "table", "ranks", "hybrid"] {
        assert!(Path::new(out[key].as_str().unwrap()).is_file(), "{key} missing in {out}");
    }
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out["metrics"].as_str().unwrap()).unwrap()).unwrap();
    let alpha = metrics["alpha"].as_object().unwrap();
    assert_eq!(alpha.len(), 2);
    assert!(alpha.values().all(|a| a == 0 || a == 1));
    let ranks = std::fs::read_to_string(out["ranks"].as_str().unwrap()).unwrap();
    assert!(ranks.starts_with("dataset,run,head,relation,tail,direction,rank\n"));
    // organization: 39 test queries in both directions; paraphrase: 88.
    assert_eq!(ranks.lines().count(), 1 + 2 * (39 + 88));
}

#[test]
fn structural_policy_needs_no_text() {
    let ws = Workspace::new(small(&["organization"], &["kinship"]));
    let out = ws.ok(&["--alpha", "structural", "pretrain"]);
    assert!(out["runs"][0]["parameters"].as_u64().unwrap() > 0);
    ws.ok(&["--alpha", "structural", "evaluate"]);
}

#[test]
fn gen_harder_writes_a_loadable_dataset() {
    let ws = Workspace::new(small(&["kinship"], &[]));
    let out = ws.ok(&["gen-harder", "--mask-ratio", "0.25"]);
    let dir = PathBuf::from(out["dataset"].as_str().unwrap());
    assert!(dir.ends_with("kinship-harder"));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["harder"]["masked_relations"].as_array().unwrap().len(), 3);
    // The derived dataset feeds straight back into the pipeline.
    let again = Workspace::new(serde_json::json!({"datasets": [dir], "pretrain": [data().join("kinship")]}));
    let audit = again.ok(&["audit-leakage"]);
    assert!(Path::new(audit["csv"].as_str().unwrap()).is_file());
}

#[test]
fn gen_harder_rejects_bad_ratio() {
    let ws = Workspace::new(small(&["kinship"], &[]));
    let out = ws.run(&["gen-harder", "--mask-ratio", "1.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask_ratio"));
}

#[test]
fn audit_flags_overlapping_corpora() {
    let ws = Workspace::new(small(&["kinship", "organization"], &["kinship", "kinship-paraphrase-train"]));
    let out = ws.ok(&["audit-leakage"]);
    let flagged: Vec<&str> = out["flagged"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(flagged, ["kinship"]);
    let csv = std::fs::read_to_string(out["csv"].as_str().unwrap()).unwrap();
    assert!(csv.starts_with("dataset,kind,source,count,percent\n"));
    assert!(csv.lines().any(|l| l.starts_with("kinship,indirect,kinship,")));
    assert!(csv.lines().any(|l| l.starts_with("organization,") && l.contains(",0,")));
}
