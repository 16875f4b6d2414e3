//! Text-overlap metrics and the evaluation protocol.
//!
//! All metrics tokenize with the corpus tokenizer (lowercase,
//! punctuation-split) so scores are consistent with training data.
//! BLEU pools n-gram counts over the whole corpus before taking the
//! geometric mean; ROUGE-L and METEOR are averaged per item.
//!
//! Clip-stage predictions are stripped of their interaction phrase and
//! character names before scoring, mirroring how the gold references
//! store the topic only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Smoothing floor for zero n-gram precision at small scale.
const BLEU_EPSILON: f64 = 1e-9;
/// ROUGE-L recall weighting.
pub const ROUGE_BETA: f64 = 1.2;
/// METEOR recall weighting in the harmonic mean.
const METEOR_ALPHA: f64 = 0.9;
/// METEOR fragmentation exponent.
const METEOR_BETA: f64 = 3.0;
/// METEOR fragmentation weight.
const METEOR_GAMMA: f64 = 0.5;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n && n > 0 {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-1..BLEU-`max_n`.
///
/// Modified n-gram precision clips each candidate n-gram count at its
/// reference count, pools matches and totals over the corpus, then each
/// order takes the geometric mean of precisions 1..=n times the brevity
/// penalty `exp(1 - r/c)` (applied only when the candidate side is
/// shorter). Zero precisions are floored at 1e-9 instead of zeroing the
/// whole score, except that an empty candidate corpus side scores 0.
pub fn bleu(candidates: &[String], references: &[String], max_n: usize) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Data("BLEU needs a non-empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "BLEU alignment: {} candidates against {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 || max_n > 4 {
        return Err(Error::Config(format!(
            "BLEU order must be in 1..=4, got {max_n}"
        )));
    }
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let c_len: usize = cand_tokens.iter().map(Vec::len).sum();
    let r_len: usize = ref_tokens.iter().map(Vec::len).sum();
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, reference) in cand_tokens.iter().zip(ref_tokens.iter()) {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        precisions.push(if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        });
    }
    let brevity = if c_len >= r_len {
        1.0
    } else if c_len == 0 {
        0.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let scores = (1..=max_n)
        .map(|n| {
            let log_sum: f64 = precisions[..n]
                .iter()
                .map(|p| p.max(BLEU_EPSILON).ln())
                .sum();
            brevity * (log_sum / n as f64).exp()
        })
        .collect();
    Ok(scores)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure over the longest common token subsequence, with
/// recall weighted by `beta` (1.2 by default). Two empty strings score
/// 0 by definition.
pub fn rouge_l(candidate: &str, reference: &str, beta: f64) -> f64 {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    let lcs = lcs_len(&cand, &reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Strip a trailing inflection so "knocks"/"knocking"/"knocked" share a
/// stem. Suffixes are only removed when at least three characters
/// remain, keeping short function words intact.
fn stem(token: &str) -> &str {
    for suffix in ["ing", "ed", "es", "ly", "s"] {
        if let Some(base) = token.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    token
}

/// Greedy left-to-right alignment: each candidate position takes the
/// earliest unmatched reference position the matcher accepts.
fn align_stage(
    cand: &[String],
    reference: &[String],
    pairs: &mut Vec<(usize, usize)>,
    cand_used: &mut [bool],
    ref_used: &mut [bool],
    matches: impl Fn(&str, &str) -> bool,
) {
    for (i, c) in cand.iter().enumerate() {
        if cand_used[i] {
            continue;
        }
        for (j, r) in reference.iter().enumerate() {
            if !ref_used[j] && matches(c, r) {
                pairs.push((i, j));
                cand_used[i] = true;
                ref_used[j] = true;
                break;
            }
        }
    }
}

/// Unigram-alignment METEOR variant: exact matches first, then
/// suffix-stem matches, scored by an `alpha`-weighted harmonic mean and
/// discounted by the fragmentation penalty
/// `gamma * (chunks / matches)^beta`.
///
/// Synonym and paraphrase tables are deliberately out of scope, so this
/// is comparable only to itself.
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut cand_used = vec![false; cand.len()];
    let mut ref_used = vec![false; reference.len()];
    align_stage(&cand, &reference, &mut pairs, &mut cand_used, &mut ref_used, |a, b| a == b);
    align_stage(&cand, &reference, &mut pairs, &mut cand_used, &mut ref_used, |a, b| {
        stem(a) == stem(b)
    });
    let m = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    pairs.sort_unstable();
    let mut chunks = 1usize;
    for w in pairs.windows(2) {
        let ((ci, ri), (cj, rj)) = (w[0], w[1]);
        if cj != ci + 1 || rj != ri + 1 {
            chunks += 1;
        }
    }
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

/// Remove the interaction phrase (as a contiguous token run) and the
/// character names (token by token) from generated text,
/// case-insensitively, returning the re-joined remainder.
pub fn strip_interaction(generated: &str, interaction_phrase: &str, names: &[String]) -> String {
    let tokens = tokenize(generated);
    let phrase = tokenize(interaction_phrase);
    let name_tokens: Vec<String> = names.iter().flat_map(|n| tokenize(n)).collect();
    let mut kept: Vec<String> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if !phrase.is_empty()
            && i + phrase.len() <= tokens.len()
            && tokens[i..i + phrase.len()] == phrase[..]
        {
            i += phrase.len();
            continue;
        }
        if !name_tokens.contains(&tokens[i]) {
            kept.push(tokens[i].clone());
        }
        i += 1;
    }
    kept.join(" ")
}

/// Which stage's protocol to apply during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalProtocol {
    /// Clip stage: predictions are stripped of interaction phrase and
    /// names before scoring against topic-only references.
    Local,
    /// Movie stage: reasons are scored as generated.
    Global,
}

/// One prediction to score, with the stripping context for the clip
/// stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionText {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub phrase: Option<String>,
    #[serde(default)]
    pub names: Vec<String>,
}

/// One gold reference, aligned with a prediction by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldReference {
    pub id: String,
    pub text: String,
}

/// Per-item metric row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

/// Corpus-level aggregates plus the per-item breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub items: Vec<ItemScores>,
}

/// Score an aligned prediction/gold run under the given protocol.
///
/// Corpus BLEU pools n-gram counts; METEOR and ROUGE-L aggregates are
/// per-item means. Ids must match pairwise in order.
pub fn evaluate_run(
    predictions: &[PredictionText],
    gold: &[GoldReference],
    protocol: EvalProtocol,
) -> Result<MetricReport> {
    if predictions.len() != gold.len() {
        return Err(Error::IdMismatch(format!(
            "{} predictions against {} references",
            predictions.len(),
            gold.len()
        )));
    }
    for (p, g) in predictions.iter().zip(gold.iter()) {
        if p.id != g.id {
            return Err(Error::IdMismatch(format!(
                "prediction '{}' aligned with reference '{}'",
                p.id, g.id
            )));
        }
    }
    let scored: Vec<String> = predictions
        .iter()
        .map(|p| match protocol {
            EvalProtocol::Local => {
                strip_interaction(&p.text, p.phrase.as_deref().unwrap_or(""), &p.names)
            }
            EvalProtocol::Global => p.text.clone(),
        })
        .collect();
    let refs: Vec<String> = gold.iter().map(|g| g.text.clone()).collect();
    let corpus_bleu = bleu(&scored, &refs, 4)?;
    let mut items = Vec::with_capacity(predictions.len());
    let mut meteor_sum = 0.0;
    let mut rouge_sum = 0.0;
    for ((text, reference), g) in scored.iter().zip(refs.iter()).zip(gold.iter()) {
        let b = bleu(
            std::slice::from_ref(text),
            std::slice::from_ref(reference),
            4,
        )?;
        let met = meteor_lite(text, reference);
        let rl = rouge_l(text, reference, ROUGE_BETA);
        meteor_sum += met;
        rouge_sum += rl;
        items.push(ItemScores {
            id: g.id.clone(),
            prediction: text.clone(),
            gold: reference.clone(),
            bleu_1: b[0],
            bleu_2: b[1],
            bleu_3: b[2],
            bleu_4: b[3],
            meteor: met,
            rouge_l: rl,
        });
    }
    let n = items.len() as f64;
    Ok(MetricReport {
        bleu_1: corpus_bleu[0],
        bleu_2: corpus_bleu[1],
        bleu_3: corpus_bleu[2],
        bleu_4: corpus_bleu[3],
        meteor: meteor_sum / n,
        rouge_l: rouge_sum / n,
        items,
    })
}
