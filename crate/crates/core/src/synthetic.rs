//! Seeded synthetic knowledge graphs and concept-level text embeddings used by
//! the bundled datasets, tests and benches.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kg::{DatasetSplit, Regime, TaskMode};
use crate::seed::{component_rng, fnv1a};
use crate::text::backend::Embedder;
use crate::text::{parse::render_response, ParsedEnrichment, RelationTextRecord, TextVariant, EmbeddingTable};

pub type Fact = [String; 3];

/// A relation meaning with three interchangeable surface forms.
#[derive(Clone, Copy, Debug)]
pub struct Concept {
    pub forms: [&'static str; 3],
    pub forward: &'static str,
    pub inverse: &'static str,
}

pub const KINSHIP: [Concept; 12] = [
    Concept { forms: ["father_of", "dad_of", "is_paternal_parent_of"], forward: "the head is the father of the tail", inverse: "the head is a child of its father, the tail" },
    Concept { forms: ["mother_of", "mom_of", "is_maternal_parent_of"], forward: "the head is the mother of the tail", inverse: "the head is a child of its mother, the tail" },
    Concept { forms: ["son_of", "male_child_of", "is_a_son_to"], forward: "the head is a son of the tail", inverse: "the head is a parent of its son, the tail" },
    Concept { forms: ["daughter_of", "female_child_of", "is_a_daughter_to"], forward: "the head is a daughter of the tail", inverse: "the head is a parent of its daughter, the tail" },
    Concept { forms: ["husband_of", "male_spouse_of", "is_married_to_wife"], forward: "the head is the husband of the tail", inverse: "the head is the wife of the tail" },
    Concept { forms: ["wife_of", "female_spouse_of", "is_married_to_husband"], forward: "the head is the wife of the tail", inverse: "the head is the husband of the tail" },
    Concept { forms: ["brother_of", "male_sibling_of", "is_a_brother_to"], forward: "the head is a brother of the tail", inverse: "the head is a sibling of its brother, the tail" },
    Concept { forms: ["sister_of", "female_sibling_of", "is_a_sister_to"], forward: "the head is a sister of the tail", inverse: "the head is a sibling of its sister, the tail" },
    Concept { forms: ["grandfather_of", "grandpa_of", "is_a_grandfather_to"], forward: "the head is a grandfather of the tail", inverse: "the head is a grandchild of its grandfather, the tail" },
    Concept { forms: ["grandmother_of", "grandma_of", "is_a_grandmother_to"], forward: "the head is a grandmother of the tail", inverse: "the head is a grandchild of its grandmother, the tail" },
    Concept { forms: ["uncle_of", "paternal_or_maternal_uncle_of", "is_an_uncle_to"], forward: "the head is an uncle of the tail", inverse: "the head is a niece or nephew of its uncle, the tail" },
    Concept { forms: ["aunt_of", "paternal_or_maternal_aunt_of", "is_an_aunt_to"], forward: "the head is an aunt of the tail", inverse: "the head is a niece or nephew of its aunt, the tail" },
];

pub const ORGANIZATION: [Concept; 10] = [
    Concept { forms: ["works_in", "employed_in_department", "is_staff_of"], forward: "the head works in the department named by the tail", inverse: "the head department employs the tail" },
    Concept { forms: ["manages", "supervises", "is_manager_of"], forward: "the head manages the employee named by the tail", inverse: "the head is managed by the tail" },
    Concept { forms: ["reports_to", "answers_to", "is_subordinate_of"], forward: "the head reports to the manager named by the tail", inverse: "the head receives reports from the tail" },
    Concept { forms: ["head_of", "leads_department", "is_department_head_of"], forward: "the head is the head of the department named by the tail", inverse: "the head department is led by the tail" },
    Concept { forms: ["member_of", "contributes_to", "is_on_project"], forward: "the head is a member of the project named by the tail", inverse: "the head project has the tail as a member" },
    Concept { forms: ["leads", "runs_project", "is_project_lead_of"], forward: "the head leads the project named by the tail", inverse: "the head project is led by the tail" },
    Concept { forms: ["owned_by", "belongs_to_department", "is_project_of"], forward: "the head project is owned by the department named by the tail", inverse: "the head department owns the project named by the tail" },
    Concept { forms: ["located_in", "sited_in", "is_based_in_city"], forward: "the head department is located in the city named by the tail", inverse: "the head city hosts the department named by the tail" },
    Concept { forms: ["lives_in", "resides_in", "is_resident_of"], forward: "the head lives in the city named by the tail", inverse: "the head city is home to the tail" },
    Concept { forms: ["colleague_of", "coworker_of", "works_alongside"], forward: "the head is a colleague of the tail", inverse: "the head is a colleague of the tail" },
];

fn rel(c: usize, form: usize) -> String {
    KINSHIP[c].forms[form].to_owned()
}

/// Three-generation families; the facts use surface form `form` of each
/// kinship concept. Roughly 90 facts per family.
pub fn kinship_facts(families: usize, seed: u64, form: usize, prefix: &str) -> Vec<Fact> {
    const FATHER: usize = 0;
    const MOTHER: usize = 1;
    const SON: usize = 2;
    const DAUGHTER: usize = 3;
    const HUSBAND: usize = 4;
    const WIFE: usize = 5;
    const BROTHER: usize = 6;
    const SISTER: usize = 7;
    const GRANDFATHER: usize = 8;
    const GRANDMOTHER: usize = 9;
    const UNCLE: usize = 10;
    const AUNT: usize = 11;

    struct Person {
        male: bool,
        parents: Option<(usize, usize)>,
        spouse: Option<usize>,
    }
    let mut rng = component_rng(seed, "synthetic-kinship", 0);
    let mut out = Vec::new();
    for f in 0..families {
        let mut people: Vec<Person> = Vec::new();
        let add = |people: &mut Vec<Person>, male: bool, parents| {
            people.push(Person { male, parents, spouse: None });
            people.len() - 1
        };
        let mut couples = vec![(add(&mut people, true, None), add(&mut people, false, None))];
        for generation in 0..2 {
            let mut next = Vec::new();
            for &(dad, mom) in &couples {
                people[dad].spouse = Some(mom);
                people[mom].spouse = Some(dad);
                let kids = rng.random_range(2..=3);
                for _ in 0..kids {
                    let male = rng.random_bool(0.5);
                    let kid = add(&mut people, male, Some((dad, mom)));
                    if generation == 0 {
                        let partner = add(&mut people, !male, None);
                        next.push(if male { (kid, partner) } else { (partner, kid) });
                    }
                }
            }
            couples = next;
        }
        for &(h, w) in &couples {
            people[h].spouse = Some(w);
            people[w].spouse = Some(h);
        }

        let name = |i: usize| format!("{prefix}f{f}_p{i}");
        let mut push = |h: usize, c: usize, t: usize| out.push([name(h), rel(c, form), name(t)]);
        let children: Vec<Vec<usize>> = (0..people.len())
            .map(|p| (0..people.len()).filter(|&k| matches!(people[k].parents, Some((a, b)) if a == p || b == p)).collect())
            .collect();
        for (k, person) in people.iter().enumerate() {
            if let Some(s) = person.spouse {
                push(k, if person.male { HUSBAND } else { WIFE }, s);
            }
            let Some((dad, mom)) = person.parents else { continue };
            push(dad, FATHER, k);
            push(mom, MOTHER, k);
            let child_rel = if person.male { SON } else { DAUGHTER };
            push(k, child_rel, dad);
            push(k, child_rel, mom);
            for &sib in &children[dad] {
                if sib != k {
                    push(sib, if people[sib].male { BROTHER } else { SISTER }, k);
                }
            }
            for parent in [dad, mom] {
                if let Some((gd, gm)) = people[parent].parents {
                    push(gd, GRANDFATHER, k);
                    push(gm, GRANDMOTHER, k);
                    for &aunt_uncle in &children[gd] {
                        if aunt_uncle == parent {
                            continue;
                        }
                        push(aunt_uncle, if people[aunt_uncle].male { UNCLE } else { AUNT }, k);
                        if let Some(s) = people[aunt_uncle].spouse {
                            push(s, if people[s].male { UNCLE } else { AUNT }, k);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Companies with departments, managers, employees, projects and cities;
/// roughly 150 facts per organisation.
pub fn organization_facts(orgs: usize, seed: u64, prefix: &str) -> Vec<Fact> {
    let mut rng = component_rng(seed, "synthetic-organization", 0);
    let r = |c: usize| ORGANIZATION[c].forms[0].to_owned();
    let mut out = Vec::new();
    for o in 0..orgs {
        let city = |i: usize| format!("{prefix}o{o}_city{i}");
        let n_cities = 3;
        for d in 0..3 {
            let dept = format!("{prefix}o{o}_dept{d}");
            let manager = format!("{prefix}o{o}_d{d}_mgr");
            let staff: Vec<String> = (0..rng.random_range(3..=5)).map(|i| format!("{prefix}o{o}_d{d}_emp{i}")).collect();
            out.push([dept.clone(), r(7), city(rng.random_range(0..n_cities))]);
            out.push([manager.clone(), r(3), dept.clone()]);
            out.push([manager.clone(), r(0), dept.clone()]);
            out.push([manager.clone(), r(8), city(rng.random_range(0..n_cities))]);
            let projects: Vec<String> = (0..2).map(|p| format!("{prefix}o{o}_d{d}_proj{p}")).collect();
            for p in &projects {
                out.push([p.clone(), r(6), dept.clone()]);
                out.push([manager.clone(), r(5), p.clone()]);
            }
            for (i, e) in staff.iter().enumerate() {
                out.push([e.clone(), r(0), dept.clone()]);
                out.push([manager.clone(), r(1), e.clone()]);
                out.push([e.clone(), r(2), manager.clone()]);
                out.push([e.clone(), r(8), city(rng.random_range(0..n_cities))]);
                out.push([e.clone(), r(4), projects[rng.random_range(0..projects.len())].clone()]);
                for other in &staff[i + 1..] {
                    out.push([e.clone(), r(9), other.clone()]);
                    out.push([other.clone(), r(9), e.clone()]);
                }
            }
        }
    }
    out
}

/// Moves facts into query sets while every query entity and relation keeps at
/// least one fact in the remaining graph. Fractions are of the input size.
pub fn hold_out(facts: &[Fact], fractions: &[f64], seed: u64) -> (Vec<Fact>, Vec<Vec<Fact>>) {
    let mut rng = component_rng(seed, "synthetic-holdout", 0);
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut rng);
    let mut degree: HashMap<&str, usize> = HashMap::new();
    for f in facts {
        for key in [&f[0], &f[1], &f[2]] {
            *degree.entry(key.as_str()).or_default() += 1;
        }
    }
    let mut taken = vec![None; facts.len()];
    let mut pos = 0;
    for (set, frac) in fractions.iter().enumerate() {
        let quota = (frac * facts.len() as f64).round() as usize;
        let mut got = 0;
        while got < quota && pos < order.len() {
            let i = order[pos];
            pos += 1;
            let f = &facts[i];
            // A relation key can coincide with an entity name only in adversarial input; ignore that case.
            if [&f[0], &f[1], &f[2]].iter().all(|k| degree[k.as_str()] > 1) && f[0] != f[2] {
                for key in [&f[0], &f[1], &f[2]] {
                    *degree.get_mut(key.as_str()).unwrap() -= 1;
                }
                taken[i] = Some(set);
                got += 1;
            }
        }
    }
    let mut graph = Vec::new();
    let mut sets = vec![Vec::new(); fractions.len()];
    for (f, t) in facts.iter().zip(taken) {
        match t {
            Some(s) => sets[s].push(f.clone()),
            None => graph.push(f.clone()),
        }
    }
    (graph, sets)
}

fn refs(v: &[Fact]) -> Vec<[&str; 3]> {
    v.iter().map(|t| [t[0].as_str(), t[1].as_str(), t[2].as_str()]).collect()
}

/// Transductive kinship split: 5% validation and 10% test queries.
pub fn kinship_split(families: usize, seed: u64) -> Result<DatasetSplit> {
    let facts = kinship_facts(families, seed, 0, "");
    let (graph, q) = hold_out(&facts, &[0.05, 0.10], seed);
    DatasetSplit::from_labeled("kinship", &refs(&graph), None, &refs(&q[0]), None, &refs(&q[1]), TaskMode::BothDirections, Regime::Transductive)
}

/// Inductive-entity organisation split: disjoint companies for train, valid and test.
pub fn organization_split(seed: u64) -> Result<DatasetSplit> {
    let train = organization_facts(5, seed, "tr_");
    let (valid_g, valid_q) = hold_out(&organization_facts(1, seed ^ 1, "va_"), &[0.15], seed);
    let (test_g, test_q) = hold_out(&organization_facts(2, seed ^ 2, "te_"), &[0.15], seed);
    DatasetSplit::from_labeled(
        "organization",
        &refs(&train),
        Some(&refs(&valid_g)),
        &refs(&valid_q[0]),
        Some(&refs(&test_g)),
        &refs(&test_q[0]),
        TaskMode::BothDirections,
        Regime::InductiveEntity,
    )
}

/// Harder-style training data: the test side pairs a family graph with
/// paraphrased (form 1) copies of all its facts as queries.
pub fn paraphrase_training_split(families: usize, seed: u64) -> Result<DatasetSplit> {
    let graph = kinship_facts(families, seed ^ 3, 0, "pt_");
    let queries = paraphrase_queries(&graph, 1, 1);
    DatasetSplit::from_labeled(
        "kinship-paraphrase-train",
        &refs(&graph),
        None,
        &refs(&queries),
        None,
        &refs(&queries),
        TaskMode::BothDirections,
        Regime::InductiveEntityRelation,
    )
}

/// Copies of `graph` facts under surface form `form`, one per `stride` facts.
pub fn paraphrase_queries(graph: &[Fact], form: usize, stride: usize) -> Vec<Fact> {
    let form_of: HashMap<&str, usize> = KINSHIP.iter().enumerate().flat_map(|(c, k)| k.forms.iter().map(move |f| (*f, c))).collect();
    graph
        .iter()
        .step_by(stride.max(1))
        .map(|f| [f[0].clone(), rel(form_of[f[1].as_str()], form), f[2].clone()])
        .collect()
}

/// Kinship with held-out paraphrased relations: graphs use the canonical names,
/// while validation and test queries restate graph facts under alternative
/// names that never occur in any graph.
pub fn kinship_paraphrase_split(seed: u64) -> Result<DatasetSplit> {
    let train = kinship_facts(8, seed, 0, "tr_");
    let valid_g = kinship_facts(2, seed ^ 1, 0, "va_");
    let test_g = kinship_facts(3, seed ^ 2, 0, "te_");
    let valid_q = paraphrase_queries(&valid_g, 1, 3);
    let test_q = paraphrase_queries(&test_g, 2, 3);
    DatasetSplit::from_labeled(
        "kinship-paraphrase",
        &refs(&train),
        Some(&refs(&valid_g)),
        &refs(&valid_q),
        Some(&refs(&test_g)),
        &refs(&test_q),
        TaskMode::BothDirections,
        Regime::InductiveEntityRelation,
    )
}

/// Maps every text tied to a concept (surface forms, cleaned names and
/// descriptions) to `normalize(c + noise · g(text))`; unrelated texts get an
/// independent random direction.
#[derive(Clone, Debug)]
pub struct ConceptEmbedder {
    pub dim: usize,
    pub noise: f64,
    seed: u64,
    concept_of: HashMap<String, u64>,
}

pub fn cleaned(form: &str) -> String {
    form.replace('_', " ")
}

impl ConceptEmbedder {
    pub fn new(dim: usize, noise: f64, seed: u64) -> Self {
        let mut concept_of = HashMap::new();
        for (family, concepts) in [("kinship", &KINSHIP[..]), ("organization", &ORGANIZATION[..])] {
            for (c, k) in concepts.iter().enumerate() {
                let id = fnv1a(&format!("{family}/{c}"));
                for f in k.forms {
                    concept_of.insert(f.to_owned(), id);
                    concept_of.insert(cleaned(f), id);
                }
                concept_of.insert(k.forward.to_owned(), id);
                concept_of.insert(k.inverse.to_owned(), id ^ 1);
            }
        }
        Self { dim, noise, seed, concept_of }
    }

    fn gaussian(&self, key: u64) -> Vec<f64> {
        let mut rng = component_rng(self.seed, "synthetic-text", key);
        (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let own = self.gaussian(fnv1a(text) ^ 0x5eed);
        let v: Vec<f64> = match self.concept_of.get(text) {
            Some(&c) => {
                let base = normalize(self.gaussian(c));
                let n = normalize(own);
                base.iter().zip(&n).map(|(a, b)| a + self.noise * b).collect()
            }
            None => own,
        };
        normalize(v)
    }

    /// The full `text → vector` map for every concept text, suitable for a
    /// fixture embedder file.
    pub fn fixture_table(&self) -> BTreeMap<String, Vec<f64>> {
        self.concept_of.keys().map(|t| (t.clone(), self.embed_one(t))).collect()
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl Embedder for ConceptEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn id(&self) -> String {
        format!("concept:{}:{}:{}", self.dim, self.noise, self.seed)
    }
}

fn concept(raw: &str) -> Option<&'static Concept> {
    KINSHIP.iter().chain(ORGANIZATION.iter()).find(|c| c.forms.contains(&raw))
}

/// The reply a well-behaved model would give for these records: cleaned names
/// and descriptions from the concept catalogue. Unknown relations are omitted.
pub fn enrichment_reply(records: &[RelationTextRecord]) -> String {
    let mut parsed = ParsedEnrichment::default();
    let mut order = Vec::new();
    for rec in records {
        if let Some(c) = concept(&rec.raw_identifier) {
            let key = rec.raw_identifier.clone();
            parsed.cleaned.insert(key.clone(), cleaned(&key));
            parsed.descriptions.insert(key.clone(), (c.forward.to_owned(), c.inverse.to_owned()));
            order.push(key);
        }
    }
    render_response(&parsed, &order)
}

/// Raw-name embedding table for a split, straight from the concept embedder.
pub fn name_table(split: &DatasetSplit, embedder: &ConceptEmbedder) -> Result<EmbeddingTable> {
    let r = split.num_relations();
    let mut data = Array2::zeros((2 * r, embedder.dim));
    for id in 0..r {
        let v = embedder.embed_one(split.vocab.relation_name(id));
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::Validation(format!("zero embedding for relation {id}")));
        }
        for (j, x) in v.iter().enumerate() {
            data[[id, j]] = *x;
            data[[id + r, j]] = -x;
        }
    }
    Ok(EmbeddingTable { variant: TextVariant::RelName, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn kinship_is_about_a_thousand_facts_with_all_relations() {
        let facts = kinship_facts(11, 0, 0, "");
        assert!((850..=1300).contains(&facts.len()), "{}", facts.len());
        let rels: HashSet<_> = facts.iter().map(|f| f[1].as_str()).collect();
        assert_eq!(rels.len(), 12);
        assert_eq!(facts, kinship_facts(11, 0, 0, ""));
    }

    #[test]
    fn kinship_facts_are_consistent() {
        let facts: HashSet<Fact> = kinship_facts(3, 5, 0, "").into_iter().collect();
        for f in &facts {
            if f[1] == "father_of" {
                let back = facts.iter().any(|g| g[0] == f[2] && g[2] == f[0] && (g[1] == "son_of" || g[1] == "daughter_of"));
                assert!(back, "{f:?}");
            }
        }
    }

    #[test]
    fn holdout_keeps_query_entities_in_graph() {
        let facts = organization_facts(2, 3, "");
        let (graph, sets) = hold_out(&facts, &[0.1, 0.1], 9);
        let ents: HashSet<&str> = graph.iter().flat_map(|f| [f[0].as_str(), f[2].as_str()]).collect();
        let rels: HashSet<&str> = graph.iter().map(|f| f[1].as_str()).collect();
        for q in sets.iter().flatten() {
            assert!(ents.contains(q[0].as_str()) && ents.contains(q[2].as_str()) && rels.contains(q[1].as_str()));
        }
        assert_eq!(graph.len() + sets.iter().map(Vec::len).sum::<usize>(), facts.len());
    }

    #[test]
    fn paraphrases_are_close_and_concepts_apart() {
        let e = ConceptEmbedder::new(32, 0.2, 0);
        let f = e.embed_one("father_of");
        assert!(cos(&f, &e.embed_one("dad_of")) > 0.9);
        assert!(cos(&f, &e.embed_one("is_paternal_parent_of")) > 0.9);
        assert!(cos(&f, &e.embed_one("mother_of")) < 0.8);
        assert!((cos(&f, &f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn splits_build() {
        for s in [kinship_split(11, 0).unwrap(), organization_split(0).unwrap(), kinship_paraphrase_split(0).unwrap()] {
            assert!(!s.test_queries.is_empty() && !s.valid_queries.is_empty(), "{}", s.name);
        }
        let p = kinship_paraphrase_split(0).unwrap();
        let graph_rels: HashSet<_> = p.test_graph.graph.facts().iter().map(|t| t.relation).collect();
        assert!(p.test_queries.iter().all(|q| !graph_rels.contains(&q.relation)));
    }

    #[test]
    fn enrichment_reply_parses() {
        let split = kinship_split(2, 0).unwrap();
        let records = crate::text::records_for_split(&split);
        let reply = enrichment_reply(&records);
        let expected: Vec<String> = records.iter().map(|r| r.raw_identifier.clone()).collect();
        let parsed = crate::text::parse_response(&reply, &expected).unwrap();
        assert_eq!(parsed.cleaned["father_of"], "father of");
    }
}
