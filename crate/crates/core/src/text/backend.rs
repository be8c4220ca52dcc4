//! Chat-completion and embedding services: HTTP, fixture replay and offline stand-ins.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub trait ChatBackend: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
    /// Identifies the embedding space; caches keyed by a different id are discarded.
    fn id(&self) -> String;
}

pub fn request_key(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct ChatFixture {
    system: String,
    user: String,
    response: String,
}

fn chat_fixture_path(dir: &Path, key: &str) -> PathBuf {
    dir.join("chat").join(format!("{key}.json"))
}

pub fn write_chat_fixture(dir: &Path, system: &str, user: &str, response: &str) -> Result<PathBuf> {
    let path = chat_fixture_path(dir, &request_key(system, user));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let body = ChatFixture {
        system: system.into(),
        user: user.into(),
        response: response.into(),
    };
    fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn api_key(var: &str) -> Option<String> {
    (!var.is_empty()).then(|| std::env::var(var).ok()).flatten()
}

fn client(timeout: Duration) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| Error::Remote(e.to_string()))
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    key: Option<&str>,
    body: &Value,
) -> Result<Value> {
    let mut req = client.post(url).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    let resp = req.send().map_err(|e| Error::Remote(format!("{url}: {e}")))?;
    let status = resp.status();
    let text = resp.text().map_err(|e| Error::Remote(e.to_string()))?;
    if !status.is_success() {
        return Err(Error::Remote(format!("{url}: HTTP {status}: {text}")));
    }
    serde_json::from_str(&text).map_err(|e| Error::Remote(format!("{url}: bad JSON body: {e}")))
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpChat {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    record_dir: Option<PathBuf>,
    client: reqwest::blocking::Client,
}

impl HttpChat {
    pub fn new(endpoint: &str, model: &str, api_key_env: &str, record_dir: Option<PathBuf>) -> Result<Self> {
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key(api_key_env),
            record_dir,
            client: client(Duration::from_secs(600))?,
        })
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let v = post_json(&self.client, &self.endpoint, self.api_key.as_deref(), &body)?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::Remote("response has no choices[0].message.content".into()))?
            .to_owned();
        if let Some(dir) = &self.record_dir {
            write_chat_fixture(dir, system, user, &content)?;
        }
        Ok(content)
    }
}

/// Replays responses recorded under `<dir>/chat/<sha256>.json`.
pub struct FixtureChat {
    pub dir: PathBuf,
}

impl ChatBackend for FixtureChat {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let key = request_key(system, user);
        let path = chat_fixture_path(&self.dir, &key);
        let bytes = fs::read(&path)
            .map_err(|_| Error::Remote(format!("no chat fixture for request {key} in {}", self.dir.display())))?;
        let fx: ChatFixture = serde_json::from_slice(&bytes)?;
        Ok(fx.response)
    }
}

/// Always fails; every relation falls back to its raw identifier.
pub struct OfflineChat;

impl ChatBackend for OfflineChat {
    fn complete(&self, _: &str, _: &str) -> Result<String> {
        Err(Error::Remote("no LLM backend configured".into()))
    }
}

/// Canned replies keyed by request, for tests.
#[derive(Default)]
pub struct ScriptedChat {
    replies: Mutex<Vec<String>>,
    pub calls: AtomicUsize,
}

impl ScriptedChat {
    /// Replies are handed out in order; the last one repeats.
    pub fn new(replies: Vec<String>) -> Self {
        Self {
            replies: Mutex::new(replies),
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, _: &str, _: &str) -> Result<String> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let r = self.replies.lock().expect("poisoned");
        r.get(n.min(r.len().saturating_sub(1)))
            .cloned()
            .ok_or_else(|| Error::Remote("script exhausted".into()))
    }
}

/// OpenAI-compatible `/embeddings` client.
pub struct HttpEmbedder {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    record_file: Option<PathBuf>,
    batch: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key_env: &str, record_file: Option<PathBuf>) -> Result<Self> {
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key(api_key_env),
            record_file,
            batch: 128,
            client: client(Duration::from_secs(300))?,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch) {
            let body = json!({"model": self.model, "input": chunk});
            let v = post_json(&self.client, &self.endpoint, self.api_key.as_deref(), &body)?;
            let data = v["data"]
                .as_array()
                .ok_or_else(|| Error::Remote("embedding response has no data array".into()))?;
            if data.len() != chunk.len() {
                return Err(Error::Remote(format!("asked for {} embeddings, got {}", chunk.len(), data.len())));
            }
            let mut rows: Vec<(usize, Vec<f64>)> = data
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let idx = d["index"].as_u64().map_or(i, |x| x as usize);
                    let vec = serde_json::from_value::<Vec<f64>>(d["embedding"].clone())?;
                    Ok((idx, vec))
                })
                .collect::<Result<_>>()?;
            rows.sort_by_key(|(i, _)| *i);
            out.extend(rows.into_iter().map(|(_, v)| v));
        }
        if let Some(path) = &self.record_file {
            let mut fx = FixtureEmbedder::load(path).map(|f| f.table).unwrap_or_default();
            for (t, v) in texts.iter().zip(&out) {
                fx.insert(t.clone(), v.clone());
            }
            FixtureEmbedder { table: fx, id: String::new() }.save(path)?;
        }
        Ok(out)
    }

    fn id(&self) -> String {
        format!("http:{}", self.model)
    }
}

/// Looks texts up in a JSON map `text → vector`.
pub struct FixtureEmbedder {
    pub table: HashMap<String, Vec<f64>>,
    id: String,
}

impl FixtureEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let table: HashMap<String, Vec<f64>> = serde_json::from_slice(&bytes)?;
        let mut keys: Vec<_> = table.keys().collect();
        keys.sort();
        let mut h = Sha256::new();
        for k in keys {
            h.update(k.as_bytes());
            for x in &table[k] {
                h.update(x.to_le_bytes());
            }
        }
        Ok(Self {
            table,
            id: format!("fixture:{}", &hex::encode(h.finalize())[..16]),
        })
    }

    pub fn from_table(table: HashMap<String, Vec<f64>>) -> Self {
        Self { table, id: "fixture:inline".into() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let sorted: std::collections::BTreeMap<_, _> = self.table.iter().collect();
        fs::write(path, serde_json::to_vec(&sorted)?).map_err(|e| Error::io(path, e))
    }
}

impl Embedder for FixtureEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Remote(format!("no embedding fixture for {t:?}")))
            })
            .collect()
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

/// Deterministic offline embedder: signed feature hashing of words and
/// character trigrams, L2-normalised. Lexically similar strings land close.
pub struct HashingEmbedder {
    pub dim: usize,
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for c in text.chars() {
        if !c.is_alphanumeric() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if c.is_uppercase() && prev_lower && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        prev_lower = c.is_lowercase() || c.is_numeric();
        cur.extend(c.to_lowercase());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl HashingEmbedder {
    fn bump(v: &mut [f64], feature: &str, weight: f64) {
        let h = crate::seed::splitmix64(crate::seed::fnv1a(feature));
        let idx = (h % v.len() as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign * weight;
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim.max(1)];
        let ws = words(text);
        for w in &ws {
            Self::bump(&mut v, &format!("w:{w}"), 1.0);
            let padded: Vec<char> = format!("^{w}$").chars().collect();
            for tri in padded.windows(3) {
                Self::bump(&mut v, &format!("c:{}", tri.iter().collect::<String>()), 0.5);
            }
        }
        if ws.is_empty() {
            Self::bump(&mut v, &format!("raw:{text}"), 1.0);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            // All features collided and cancelled; fall back to a fixed unit vector.
            let i = (crate::seed::fnv1a(text) % v.len() as u64) as usize;
            v[i] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn id(&self) -> String {
        format!("hashing:{}", self.dim)
    }
}

/// Counts calls and texts sent to an inner embedder.
pub struct CountingEmbedder<E> {
    pub inner: E,
    pub calls: AtomicUsize,
    pub texts: AtomicUsize,
}

impl<E: Embedder> CountingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
        }
    }
}

impl<E: Embedder> Embedder for CountingEmbedder<E> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.texts.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed(texts)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn hashing_is_deterministic_and_lexical() {
        let e = HashingEmbedder { dim: 256 };
        let a = e.embed_one("fatherOf");
        assert_eq!(a, e.embed_one("fatherOf"));
        assert!((cos(&a, &a) - 1.0).abs() < 1e-12);
        let near = cos(&a, &e.embed_one("father of"));
        let far = cos(&a, &e.embed_one("locatedIn"));
        assert!(near > 0.99, "{near}");
        assert!(near > far);
        assert!(e.embed_one("").iter().any(|x| *x != 0.0));
    }

    #[test]
    fn camel_case_and_paths_split_into_words() {
        assert_eq!(words("/people/person/placeOfBirth"), vec!["people", "person", "place", "of", "birth"]);
        assert_eq!(words("concept:statehascapital"), vec!["concept", "statehascapital"]);
    }

    #[test]
    fn chat_fixtures_replay_by_request_hash() {
        let dir = tempfile::tempdir().unwrap();
        write_chat_fixture(dir.path(), "sys", "user", "reply").unwrap();
        let fx = FixtureChat { dir: dir.path().into() };
        assert_eq!(fx.complete("sys", "user").unwrap(), "reply");
        assert!(matches!(fx.complete("sys", "other"), Err(Error::Remote(_))));
    }

    #[test]
    fn embedding_fixtures_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        let mut t = HashMap::new();
        t.insert("a".to_string(), vec![1.0, 2.0]);
        FixtureEmbedder::from_table(t).save(&path).unwrap();
        let fx = FixtureEmbedder::load(&path).unwrap();
        assert_eq!(fx.embed(&["a".into()]).unwrap(), vec![vec![1.0, 2.0]]);
        assert!(fx.embed(&["b".into()]).is_err());
        assert!(fx.id().starts_with("fixture:"));
    }
}
