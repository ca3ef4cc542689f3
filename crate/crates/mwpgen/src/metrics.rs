//! Generation quality metrics: corpus BLEU-4, ROUGE-L, an exact-match METEOR
//! variant, distinct-n diversity, round-trip equation accuracy, and novelty
//! against the training set.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub acc_eq: f64,
    pub novelty_fraction: f64,
    pub dist3: f64,
    pub n_examples: usize,
    /// Metrics that deliberately deviate from their reference toolkits.
    pub deviations: Vec<String>,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bleu4", self.bleu4),
            ("rouge_l", self.rouge_l),
            ("meteor_lite", self.meteor_lite),
            ("acc_eq", self.acc_eq),
            ("novelty_fraction", self.novelty_fraction),
            ("dist3", self.dist3),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Numerical(format!("{name} out of [0,1]: {v}")));
            }
        }
        Ok(())
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4: clipped n-gram counts pooled over all pairs, no
/// smoothing (any zero pooled precision gives 0), brevity penalty
/// `exp(min(0, 1 - r/c))`.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Usage("bleu4: empty candidate list".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Usage(format!(
            "bleu4: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reff) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reff.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(reff, n);
            for (gram, count) in ngram_counts(cand, n) {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
                total[n - 1] += count;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / 4.0).exp())
}

/// Per-sentence diagnostic BLEU with an epsilon floor instead of the hard
/// zero, so short or partially-overlapping sentences remain comparable.
pub fn sentence_bleu4(candidate: &[String], reference: &[String]) -> f64 {
    const EPS: f64 = 1e-9;
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let ref_counts = ngram_counts(reference, n);
        let mut matched = 0usize;
        let mut total = 0usize;
        for (gram, count) in ngram_counts(candidate, n) {
            matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            total += count;
        }
        let p = if total == 0 {
            EPS
        } else {
            (matched as f64 / total as f64).max(EPS)
        };
        log_sum += p.ln();
    }
    let bp = if candidate.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
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

const ROUGE_BETA: f64 = 1.2;

/// LCS F-score with recall-leaning beta 1.2. Empty input scores 0.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Usage("rouge_l: empty or mismatched lists".into()));
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

// Exact-unigram alignment: maximize matches, then minimize chunks. Searches
// candidate positions left to right with branch-and-bound; reference
// positions fit in a u64 mask (sequences are truncated to 64 tokens, beyond
// any MWP here). A greedy chunk-extending alignment seeds the bound, and on
// very adversarial inputs a node budget keeps the search bounded (the best
// alignment found so far is used).
struct AlignSearch<'a> {
    cand: &'a [String],
    reff: &'a [String],
    target_matches: usize,
    best_chunks: usize,
    nodes: usize,
}

const ALIGN_NODE_BUDGET: usize = 200_000;

impl AlignSearch<'_> {
    fn run(cand: &[String], reff: &[String]) -> (usize, usize) {
        let cand = &cand[..cand.len().min(64)];
        let reff = &reff[..reff.len().min(64)];
        let mut ref_avail: HashMap<&String, usize> = HashMap::new();
        for t in reff {
            *ref_avail.entry(t).or_insert(0) += 1;
        }
        let mut cand_counts: HashMap<&String, usize> = HashMap::new();
        for t in cand {
            *cand_counts.entry(t).or_insert(0) += 1;
        }
        let target: usize = cand_counts
            .iter()
            .map(|(t, c)| (*c).min(ref_avail.get(*t).copied().unwrap_or(0)))
            .sum();
        if target == 0 {
            return (0, 0);
        }
        let seed = greedy_chunks(cand, reff, target);
        let mut search = AlignSearch {
            cand,
            reff,
            target_matches: target,
            best_chunks: seed,
            nodes: 0,
        };
        search.dfs(0, 0u64, None, 0, 0);
        (target, search.best_chunks)
    }

    fn dfs(
        &mut self,
        pos: usize,
        used: u64,
        last: Option<(usize, usize)>,
        matches: usize,
        chunks: usize,
    ) {
        if chunks >= self.best_chunks || self.nodes >= ALIGN_NODE_BUDGET {
            return;
        }
        self.nodes += 1;
        if matches == self.target_matches {
            self.best_chunks = chunks;
            return;
        }
        if pos >= self.cand.len() {
            return;
        }
        // bound: remaining candidate suffix cannot supply the deficit
        if matches + (self.cand.len() - pos) < self.target_matches {
            return;
        }
        let token = &self.cand[pos];
        // chunk-extending reference position first for a tight early bound
        let preferred = last.and_then(|(c, r)| {
            if c + 1 == pos && r + 1 < self.reff.len() {
                Some(r + 1)
            } else {
                None
            }
        });
        let try_match = |search: &mut Self, rpos: usize| {
            if used & (1 << rpos) != 0 || &search.reff[rpos] != token {
                return;
            }
            let extends = matches!(last, Some((c, r)) if c + 1 == pos && r + 1 == rpos);
            let new_chunks = if extends { chunks } else { chunks + 1 };
            search.dfs(
                pos + 1,
                used | (1 << rpos),
                Some((pos, rpos)),
                matches + 1,
                new_chunks,
            );
        };
        if let Some(r) = preferred {
            try_match(self, r);
        }
        for rpos in 0..self.reff.len() {
            if Some(rpos) != preferred {
                try_match(self, rpos);
            }
        }
        // skipping is only useful when the token can be matched later or not at all
        self.dfs(pos + 1, used, last, matches, chunks);
    }
}

// In-order greedy alignment achieving the maximum match count; used as the
// initial upper bound on chunks.
fn greedy_chunks(cand: &[String], reff: &[String], target: usize) -> usize {
    let mut used = vec![false; reff.len()];
    let mut last: Option<(usize, usize)> = None;
    let mut chunks = 0;
    let mut matches = 0;
    for (pos, token) in cand.iter().enumerate() {
        if matches == target {
            break;
        }
        // prefer the chunk-extending slot, then the earliest free one
        let preferred = last.and_then(|(c, r)| {
            if c + 1 == pos && r + 1 < reff.len() && !used[r + 1] && &reff[r + 1] == token {
                Some(r + 1)
            } else {
                None
            }
        });
        let rpos = preferred.or_else(|| {
            (0..reff.len()).find(|&r| !used[r] && &reff[r] == token)
        });
        if let Some(r) = rpos {
            used[r] = true;
            let extends = matches!(last, Some((c, lr)) if c + 1 == pos && lr + 1 == r);
            if !extends {
                chunks += 1;
            }
            last = Some((pos, r));
            matches += 1;
        }
    }
    chunks
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_THETA: f64 = 3.0;

/// METEOR with exact-match alignment only (no stemming or synonyms):
/// `F = PR / (0.9 P + 0.1 R)`, penalty `0.5 (chunks/matches)^3`.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (matches, chunks) = AlignSearch::run(candidate, reference);
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / candidate.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / matches as f64).powf(METEOR_THETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor_lite_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Usage("meteor_lite: empty or mismatched lists".into()));
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_lite(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Distinct n-grams over the whole corpus divided by total n-grams.
pub fn dist_n(corpus: &[Vec<String>], n: usize) -> f64 {
    assert!(n >= 1, "dist_n needs n >= 1");
    let mut distinct: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for sentence in corpus {
        if sentence.len() >= n {
            for window in sentence.windows(n) {
                distinct.insert(window);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// Single-spaced, lowercased symbol form; idempotent.
pub fn canonicalize_equation(text: &str) -> Result<String> {
    Ok(corpus::tokenize_equation(text)?.join(" "))
}

/// Round-trip equation accuracy. `parse` maps MWP tokens to an equation
/// string, or None when decoding overflowed (counted as a mismatch).
pub fn acc_eq_with<F>(
    generated_mwps: &[Vec<String>],
    input_equations: &[String],
    mut parse: F,
) -> Result<f64>
where
    F: FnMut(&[String]) -> Option<String>,
{
    if generated_mwps.is_empty() || generated_mwps.len() != input_equations.len() {
        return Err(Error::Usage("acc_eq: empty or mismatched lists".into()));
    }
    let mut hits = 0usize;
    for (mwp, eq) in generated_mwps.iter().zip(input_equations) {
        let want = canonicalize_equation(eq)?;
        if let Some(parsed) = parse(mwp) {
            if canonicalize_equation(&parsed)? == want {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / generated_mwps.len() as f64)
}

fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Fraction of generations absent from the training set, compared as
/// lowercased, whitespace-normalized strings.
pub fn novelty(generated: &[String], training: &[String]) -> f64 {
    if generated.is_empty() {
        return 0.0;
    }
    let seen: HashSet<String> = training.iter().map(|t| normalize_text(t)).collect();
    let novel = generated
        .iter()
        .filter(|g| !seen.contains(&normalize_text(g)))
        .count();
    novel as f64 / generated.len() as f64
}
