//! Commonsense knowledge store for event enrichment.
//!
//! Events are anonymized into PersonX/PersonY templates and looked up in
//! a store of (template, relation, tail) triples covering nine if-then
//! relation kinds. The point of enrichment is bridging: two causally
//! linked events can be lexically disjoint, and the inferred tails add
//! the words that make them measurably similar again.
//!
//! Lookup is exact template match first, then nearest stored template by
//! token Jaccard similarity above a threshold, then an explicit "(none)"
//! placeholder — retrieval never invents text.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Placeholder tail when the store has nothing close enough.
pub const NO_INFERENCE: &str = "(none)";

/// Default Jaccard threshold for fallback retrieval.
pub const JACCARD_THRESHOLD: f64 = 0.4;

/// The nine if-then relation kinds, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xAttr")]
    XAttr,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "oReact")]
    OReact,
    #[serde(rename = "oWant")]
    OWant,
    #[serde(rename = "oEffect")]
    OEffect,
}

impl Relation {
    /// All relations in canonical order: the six PersonX-centric kinds,
    /// then the three other-centric kinds.
    pub const ALL: [Relation; 9] = [
        Relation::XIntent,
        Relation::XNeed,
        Relation::XAttr,
        Relation::XEffect,
        Relation::XWant,
        Relation::XReact,
        Relation::OReact,
        Relation::OWant,
        Relation::OEffect,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::XIntent => "xIntent",
            Relation::XNeed => "xNeed",
            Relation::XAttr => "xAttr",
            Relation::XEffect => "xEffect",
            Relation::XWant => "xWant",
            Relation::XReact => "xReact",
            Relation::OReact => "oReact",
            Relation::OWant => "oWant",
            Relation::OEffect => "oEffect",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One stored inference: template in PersonX/PersonY form, relation kind,
/// and the inferred tail text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub template: String,
    pub relation: Relation,
    pub tail: String,
}

/// Immutable-after-load triple collection.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
}

const SEED: &str = include_str!("../data/seed_triples.jsonl");

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// The bundled seed store (the repel-attack template with all nine
    /// relations, plus the baking-competition oReact line).
    pub fn builtin() -> Self {
        Self::from_jsonl(SEED).expect("bundled seed store parses")
    }

    /// Parse JSON-lines text; blank lines are ignored, any malformed line
    /// is reported with its 1-based line number.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut triples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let triple: Triple = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("triple store line {}: {e}", i + 1)))?;
            if triple.tail.trim().is_empty() {
                return Err(Error::Data(format!(
                    "triple store line {}: empty tail",
                    i + 1
                )));
            }
            if !triple.template.contains("PersonX") {
                return Err(Error::Data(format!(
                    "triple store line {}: template lacks PersonX",
                    i + 1
                )));
            }
            triples.push(triple);
        }
        Ok(TripleStore { triples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read triple store {}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn insert(&mut self, triple: Triple) {
        self.triples.push(triple);
    }

    pub fn extend(&mut self, other: &TripleStore) {
        self.triples.extend(other.triples.iter().cloned());
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Retrieve the tail for (template, relation).
    ///
    /// Exact template match wins; otherwise the stored template of the
    /// same relation with the highest token Jaccard similarity at or
    /// above the threshold; otherwise `"(none)"`. Ties keep the earliest
    /// stored triple, so retrieval is deterministic.
    pub fn infer(&self, template: &str, relation: Relation) -> String {
        for t in &self.triples {
            if t.relation == relation && t.template == template {
                return t.tail.clone();
            }
        }
        let query_tokens = tokenize(template);
        let mut best: Option<(f64, &Triple)> = None;
        for t in &self.triples {
            if t.relation != relation {
                continue;
            }
            let sim = jaccard(&query_tokens, &tokenize(&t.template));
            if sim >= JACCARD_THRESHOLD && best.map(|(b, _)| sim > b).unwrap_or(true) {
                best = Some((sim, t));
            }
        }
        match best {
            Some((_, t)) => t.tail.clone(),
            None => NO_INFERENCE.to_string(),
        }
    }
}

fn jaccard(a: &[String], b: &[String]) -> f64 {
    use std::collections::HashSet;
    let sa: HashSet<&str> = a.iter().map(|s| s.as_str()).collect();
    let sb: HashSet<&str> = b.iter().map(|s| s.as_str()).collect();
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

/// Anonymization result: the PersonX/PersonY template plus any warnings
/// recorded along the way (missing names are not fatal).
#[derive(Debug, Clone)]
pub struct Anonymized {
    pub template: String,
    pub warnings: Vec<String>,
}

/// Is the character a word boundary for name matching? Apostrophes count
/// as boundaries so that "Fran's" matches the name "Fran" and keeps its
/// possessive suffix.
fn is_boundary(c: Option<char>) -> bool {
    match c {
        None => true,
        Some(c) => !c.is_alphanumeric(),
    }
}

/// Replace case-insensitive whole-word occurrences of `name` with
/// `replacement`; returns the new text and the number of replacements.
fn replace_name(text: &str, name: &str, replacement: &str) -> (String, usize) {
    if name.is_empty() {
        return (text.to_string(), 0);
    }
    let lower_text: Vec<char> = text.to_lowercase().chars().collect();
    let chars: Vec<char> = text.chars().collect();
    let needle: Vec<char> = name.to_lowercase().chars().collect();
    let mut out = String::new();
    let mut i = 0;
    let mut count = 0;
    while i < chars.len() {
        let end = i + needle.len();
        let matches = end <= chars.len()
            && lower_text[i..end] == needle[..]
            && is_boundary(if i == 0 { None } else { Some(chars[i - 1]) })
            && is_boundary(chars.get(end).copied());
        if matches {
            out.push_str(replacement);
            i = end;
            count += 1;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    (out, count)
}

/// A last word ending in a bare "s" (not a possessive) reads as plural:
/// "friends", "parents". This is a surrogate-scale heuristic; the corpus
/// generator avoids s-ending singular names.
fn phrase_is_plural(phrase: &str) -> bool {
    match phrase.rsplit(|c: char| c.is_whitespace()).next() {
        Some(last) => {
            let last = last.trim_end_matches(|c: char| !c.is_alphanumeric());
            last.len() > 1 && last.ends_with('s') && !last.ends_with("'s")
        }
        None => false,
    }
}

/// Third-person-singular form of a base verb.
fn third_person(verb: &str) -> String {
    let lower = verb.to_lowercase();
    if lower.ends_with('s') {
        return verb.to_string(); // already conjugated (or not a base verb)
    }
    if lower.ends_with("ch")
        || lower.ends_with("sh")
        || lower.ends_with('x')
        || lower.ends_with('z')
        || lower.ends_with('o')
    {
        return format!("{verb}es");
    }
    if lower.ends_with('y') {
        let stem: String = verb.chars().take(verb.chars().count() - 1).collect();
        let before = stem.chars().last();
        if let Some(c) = before {
            if !"aeiou".contains(c.to_ascii_lowercase()) {
                return format!("{stem}ies");
            }
        }
    }
    format!("{verb}s")
}

/// After replacing a plural subject with the singular "PersonX", the verb
/// right after it needs re-conjugation ("friends encourage" becomes
/// "PersonX encourages").
fn fix_verb_after_person_x(template: &str) -> String {
    let mut words: Vec<String> = template.split(' ').map(|s| s.to_string()).collect();
    for i in 0..words.len() {
        if words[i] == "PersonX" {
            if let Some(next) = words.get(i + 1) {
                let fixed = third_person(next);
                words[i + 1] = fixed;
            }
            break;
        }
    }
    words.join(" ")
}

/// Turn a concrete event description into a PersonX/PersonY template.
///
/// Whole-word, case-insensitive replacement; possessives keep their
/// suffix ("Fran's" becomes "PersonX's"). A subject that does not occur
/// is recorded as a warning, not an error, and the description passes
/// through unchanged — which also makes the operation idempotent on
/// already-anonymized templates.
pub fn anonymize_event(description: &str, subject: &str, object: &str) -> Anonymized {
    let mut warnings = Vec::new();
    let subject_plural = phrase_is_plural(subject);
    let (mut template, n_subj) = replace_name(description, subject, "PersonX");
    if n_subj == 0 && !subject.is_empty() && !description.contains("PersonX") {
        warnings.push(format!("subject {subject:?} not found in description"));
    }
    if !object.is_empty() {
        let (replaced, n_obj) = replace_name(&template, object, "PersonY");
        template = replaced;
        if n_obj == 0 && !description.contains("PersonY") {
            warnings.push(format!("object {object:?} not found in description"));
        }
    }
    if n_subj > 0 && subject_plural {
        template = fix_verb_after_person_x(&template);
    }
    Anonymized { template, warnings }
}

/// An event description plus its nine retrieved inferences.
#[derive(Debug, Clone)]
pub struct Enrichment {
    pub template: String,
    /// Tails in canonical relation order; "(none)" marks empty slots.
    pub inferences: [String; 9],
    /// Description followed by bracketed relation/tail pairs.
    pub enriched_text: String,
    pub warnings: Vec<String>,
}

/// Anonymize, query all nine relations in canonical order, and format
/// the enriched text as `description [rel: tail] ...`, skipping "(none)"
/// slots. Pure function of its inputs.
pub fn enrich_event(
    description: &str,
    subject: &str,
    object: &str,
    store: &TripleStore,
) -> Enrichment {
    let anon = anonymize_event(description, subject, object);
    let mut inferences: [String; 9] = Default::default();
    let mut enriched_text = description.to_string();
    for (slot, relation) in Relation::ALL.iter().enumerate() {
        let tail = store.infer(&anon.template, *relation);
        if tail != NO_INFERENCE {
            enriched_text.push_str(&format!(" [{relation}: {tail}]"));
        }
        inferences[slot] = tail;
    }
    Enrichment {
        template: anon.template,
        inferences,
        enriched_text,
        warnings: anon.warnings,
    }
}
