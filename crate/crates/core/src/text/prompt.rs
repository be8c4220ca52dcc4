//! The two-step enrichment prompt and its system instruction.

use super::RelationTextRecord;

pub const SYSTEM_INSTRUCTION: &str = "Provide exactly two separate JSON objects in your response, corresponding to each step, strictly in the order presented above. Do not include additional explanations or metadata beyond the specified JSON objects. Always provide both JSON objects and ensure they contain all the original relation names as keys.";

const PROMPT_HEADER: &str = r#"You will be provided with a list of relation names, each accompanied by exactly one example triple from a knowledge graph. Follow the instructions below carefully, strictly adhering to the output formats specified.

Step 1: Convert Relation Names to Human-Readable Form.
Clean each provided relation name, converting it into plaintext, human-readable form.

Output Format (JSON Dictionary):
{
"original_relation_name1": "Clean Human-Readable Form",
"original_relation_name2": "Clean Human-Readable Form",
...
}

Step 2: Generate Short Descriptions

For each provided relation, generate a concise description (3-4 words) that clearly captures its semantic meaning based on the given example triple as context. Also, for each relation, generate a description of its supposed inverse relation. These descriptions will be converted into embeddings using jinaai/jina-embeddings-v3 to uniquely identify relations and to measure semantic similarities. So, avoid using common or generic words excessively, and do NOT reuse other relation names, to prevent false semantic similarities. Follow the rules below,

Be Concise and Precise: Use as few words as possible while clearly conveying the core meaning. Avoid filler words, unnecessary adjectives, and overly generic language.

Emphasize Key Semantics: Focus on the distinctive action or relationship the relation name implies. Ensure that the description highlights the unique aspects that differentiate it from similar relations.

Handle Negation Carefully: If the relation involves negation (e.g., "is not part of"), state the negation explicitly and unambiguously. Ensure that the description for a negated relation is clearly distinguishable from its affirmative counterpart.

Avoid Common Stopwords as Filler: Do not use common stopwords or phrases that add little semantic content. Every word should contribute meaning. Do not use repetitive words to avoid creating false semantic similarities.

Take care of symmetry: Ensure that for relations that are symmetric, the description does not change for its inverse relation.

Output Format (JSON Dictionary):
{
"original_relation_name1": ["concise description", "concise inverse relation description"],
"original_relation_name2": ["concise description", "concise inverse relation description"],
...
}

List of Relations:
"#;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
    /// Raw identifiers covered by this prompt, in order.
    pub relations: Vec<String>,
}

/// One line of the relation list.
pub fn relation_line(rec: &RelationTextRecord) -> String {
    let (h, r, t) = &rec.example_triple;
    format!(
        "relation_name: \"{}\" ; example: (\"{}\", \"{}\", \"{}\")",
        rec.raw_identifier, h, r, t
    )
}

pub fn build_prompt(records: &[RelationTextRecord]) -> Prompt {
    let mut user = String::from(PROMPT_HEADER);
    for rec in records {
        user.push_str(&relation_line(rec));
        user.push('\n');
    }
    Prompt {
        system: SYSTEM_INSTRUCTION.to_owned(),
        user,
        relations: records.iter().map(|r| r.raw_identifier.clone()).collect(),
    }
}

/// Splits `records` into prompts of at most `max_per_request` relations.
pub fn build_prompts(records: &[RelationTextRecord], max_per_request: usize) -> Vec<Prompt> {
    if records.is_empty() {
        return vec![build_prompt(records)];
    }
    records
        .chunks(max_per_request.max(1))
        .map(build_prompt)
        .collect()
}
