//! Extraction of the two JSON objects from a free-form LLM reply.

use std::collections::{BTreeSet, HashMap};

use serde_json::{Map, Value};

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedEnrichment {
    pub cleaned: HashMap<String, String>,
    pub descriptions: HashMap<String, (String, String)>,
}

impl ParsedEnrichment {
    pub fn covers(&self, relation: &str) -> bool {
        self.cleaned.contains_key(relation) && self.descriptions.contains_key(relation)
    }
}

/// Byte ranges of balanced top-level `{…}` spans, ignoring braces inside strings.
fn top_level_objects(raw: &str) -> Vec<&str> {
    let bytes = raw.as_bytes();
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_str {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' if depth > 0 => in_str = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    out.push(&raw[start..=i]);
                }
            }
            _ => {}
        }
    }
    out
}

fn parse_object(text: &str) -> std::result::Result<Map<String, Value>, String> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err("not a JSON object".into()),
        Err(e) => Err(format!("malformed JSON: {e}")),
    }
}

fn looks_like_descriptions(m: &Map<String, Value>) -> bool {
    m.values().any(Value::is_array)
}

type Object = Map<String, Value>;

/// Locates the cleaned-name and description objects.
fn locate(raw: &str) -> std::result::Result<(Object, Object), String> {
    let spans = top_level_objects(raw);
    match spans.len() {
        0 => Err("no JSON object found in response".into()),
        1 => {
            // Some models wrap both outputs in a single object.
            let outer = parse_object(spans[0])?;
            let inner: Vec<&Map<String, Value>> =
                outer.values().filter_map(Value::as_object).collect();
            if outer.len() == 2 && inner.len() == 2 {
                let (a, b) = (inner[0].clone(), inner[1].clone());
                return Ok(if looks_like_descriptions(&a) && !looks_like_descriptions(&b) {
                    (b, a)
                } else {
                    (a, b)
                });
            }
            Err("second JSON object missing".into())
        }
        2 => Ok((parse_object(spans[0])?, parse_object(spans[1])?)),
        n => Err(format!("expected exactly two JSON objects, found {n}")),
    }
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_owned())
}

/// Lenient extraction: returns whatever is well-formed plus the offending relations.
pub fn parse_partial(
    raw: &str,
    expected: &[String],
) -> std::result::Result<(ParsedEnrichment, Vec<String>), String> {
    let (names, descs) = locate(raw)?;
    let mut parsed = ParsedEnrichment::default();
    let mut bad = BTreeSet::new();
    for rel in expected {
        match names.get(rel).and_then(Value::as_str).and_then(non_empty) {
            Some(c) => {
                parsed.cleaned.insert(rel.clone(), c);
            }
            None => {
                bad.insert(rel.clone());
            }
        }
        let pair = descs.get(rel).and_then(Value::as_array).and_then(|a| match a.as_slice() {
            [f, i] => Some((f.as_str().and_then(non_empty)?, i.as_str().and_then(non_empty)?)),
            _ => None,
        });
        match pair {
            Some(p) => {
                parsed.descriptions.insert(rel.clone(), p);
            }
            None => {
                bad.insert(rel.clone());
            }
        }
    }
    // Keep the order of `expected` for error messages.
    let offending = expected.iter().filter(|r| bad.contains(*r)).cloned().collect();
    Ok((parsed, offending))
}

/// Strict extraction: every expected relation must be present in both objects.
pub fn parse_response(raw: &str, expected: &[String]) -> Result<ParsedEnrichment> {
    match parse_partial(raw, expected) {
        Err(reason) => Err(Error::Enrichment {
            reason,
            relations: expected.to_vec(),
        }),
        Ok((_, bad)) if !bad.is_empty() => Err(Error::Enrichment {
            reason: "missing key or wrong arity".into(),
            relations: bad,
        }),
        Ok((parsed, _)) => Ok(parsed),
    }
}

/// Renders a conformant reply; used for fixtures and round-trip checks.
pub fn render_response(parsed: &ParsedEnrichment, order: &[String]) -> String {
    let mut names = Map::new();
    let mut descs = Map::new();
    for rel in order {
        if let Some(c) = parsed.cleaned.get(rel) {
            names.insert(rel.clone(), Value::String(c.clone()));
        }
        if let Some((f, i)) = parsed.descriptions.get(rel) {
            descs.insert(rel.clone(), Value::Array(vec![f.clone().into(), i.clone().into()]));
        }
    }
    format!(
        "{}\n\n{}\n",
        serde_json::to_string_pretty(&Value::Object(names)).expect("json"),
        serde_json::to_string_pretty(&Value::Object(descs)).expect("json")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FB_REL: &str = "/organization/organization/headquarters./location/mailing_address/citytown";

    fn sample() -> String {
        format!(
            r#"Here you go.
"cleaned_relations": {{
    "Causes": "Causes",
    "{FB_REL}":
        "Headquarters City",
    "GpMF": "Gene participates Molecular Function"
}}

"relation_descriptions": {{
    "Causes": ["leads to effect", "effect caused by"],
    "{FB_REL}":
        ["Headquarters located in city", "City has headquarters of"],
    "GpMF": ["Gene contributes to molecular function", "Molecular function involves gene"]
}}
"#
        )
    }

    fn expected() -> Vec<String> {
        vec!["Causes".into(), FB_REL.into(), "GpMF".into()]
    }

    #[test]
    fn sample_output_parses() {
        let p = parse_response(&sample(), &expected()).unwrap();
        assert_eq!(p.cleaned["GpMF"], "Gene participates Molecular Function");
        assert_eq!(p.cleaned["Causes"], "Causes");
        assert_eq!(
            p.descriptions["Causes"],
            ("leads to effect".to_string(), "effect caused by".to_string())
        );
        assert_eq!(p.cleaned[FB_REL], "Headquarters City");
    }

    #[test]
    fn single_object_is_rejected() {
        let raw = r#"{"Causes": "Causes"}"#;
        let err = parse_response(raw, &["Causes".to_string()]).unwrap_err();
        assert!(err.to_string().contains("second JSON object missing"), "{err}");
    }

    #[test]
    fn missing_key_names_the_relation() {
        let raw = sample().replace(r#""GpMF": "Gene participates Molecular Function""#, "");
        let raw = raw.replace("\"Headquarters City\",", "\"Headquarters City\"");
        match parse_response(&raw, &expected()).unwrap_err() {
            Error::Enrichment { relations, .. } => assert_eq!(relations, vec!["GpMF"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_arity_is_rejected() {
        let raw = r#"{"a": "A"} {"a": ["only one"]}"#;
        match parse_response(raw, &["a".to_string()]).unwrap_err() {
            Error::Enrichment { relations, .. } => assert_eq!(relations, vec!["a"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_json_is_an_enrichment_error() {
        let raw = r#"{"a": "A",} {"a": ["x", "y"]}"#;
        let err = parse_response(raw, &["a".to_string()]).unwrap_err();
        assert!(err.to_string().contains("malformed JSON"), "{err}");
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_the_scanner() {
        let raw = r#"```json
{"r{1}": "odd } name"}
```
```json
{"r{1}": ["has \"quoted\" }", "inverse {"]}
```"#;
        let p = parse_response(raw, &["r{1}".to_string()]).unwrap();
        assert_eq!(p.cleaned["r{1}"], "odd } name");
        assert_eq!(p.descriptions["r{1}"].0, "has \"quoted\" }");
    }

    #[test]
    fn wrapper_object_is_accepted() {
        let raw = r#"{"relation_descriptions": {"a": ["x", "y"]}, "cleaned_relations": {"a": "A"}}"#;
        let p = parse_response(raw, &["a".to_string()]).unwrap();
        assert_eq!(p.cleaned["a"], "A");
        assert_eq!(p.descriptions["a"], ("x".into(), "y".into()));
    }

    proptest! {
        #[test]
        fn rendered_fixtures_round_trip(names in proptest::collection::btree_set("[A-Za-z_/:. {}\"]{1,12}", 0..8)) {
            let order: Vec<String> = names.into_iter().filter(|n| !n.trim().is_empty()).collect();
            let mut parsed = ParsedEnrichment::default();
            for (i, r) in order.iter().enumerate() {
                parsed.cleaned.insert(r.clone(), format!("clean {i}"));
                parsed.descriptions.insert(r.clone(), (format!("fwd {i}"), format!("inv {i}")));
            }
            let back = parse_response(&render_response(&parsed, &order), &order).unwrap();
            prop_assert_eq!(back, parsed);
        }
    }
}
