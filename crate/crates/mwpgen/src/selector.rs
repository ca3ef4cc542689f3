//! Keyword selector: linear self-attention over frozen token embeddings, a
//! sigmoid head scoring each eligible vocabulary item, Bernoulli-KL
//! regularization toward a sparse prior, and the TF-IDF baseline.

use std::collections::HashMap;

use crate::corpus::{MaskedExample, Vocab};
use crate::discrete;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Init, ParamId, ParamStore, Tape, TensorRef};

pub const DEFAULT_PRIOR_RATE: f64 = 0.05;

/// Trainable head (`w`, `b`) plus a frozen copy of the generator's token
/// embeddings. The copy is registered in the store so checkpoints are
/// self-contained, but it never receives gradients.
#[derive(Clone)]
pub struct Selector {
    pub vocab_size: usize,
    pub d_model: usize,
    embed: ParamId,
    w: ParamId,
    b: ParamId,
}

impl Selector {
    /// `embed_snapshot` is row-major `(vocab_size, d_model)`, typically the
    /// generator's embedding table at initialization.
    pub fn new(
        store: &mut ParamStore,
        embed_snapshot: &[f64],
        vocab_size: usize,
        d_model: usize,
        rng: &mut Stream,
    ) -> Self {
        assert_eq!(embed_snapshot.len(), vocab_size * d_model, "snapshot size");
        let embed = store.register("embed", vocab_size, d_model, Init::Zeros, rng);
        store.value_mut(embed).copy_from_slice(embed_snapshot);
        let w = store.register("w", d_model, 1, Init::Normal(0.02), rng);
        let b = store.register("b", 1, 1, Init::Zeros, rng);
        Selector {
            vocab_size,
            d_model,
            embed,
            w,
            b,
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let need = |name: &str| {
            store
                .id_by_name(name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing parameter {name}")))
        };
        let embed = need("embed")?;
        let (vocab_size, d_model) = store.shape(embed);
        Ok(Selector {
            vocab_size,
            d_model,
            embed,
            w: need("w")?,
            b: need("b")?,
        })
    }
}

/// Result of [`contextual_embed`]: per-position attention-pooled features and
/// the attention matrix itself (row t holds position t's weights).
pub struct ContextualEmbed {
    pub features: Vec<f64>, // (T, D) row-major
    pub weights: Vec<f64>,  // (T, T) row-major
    pub t: usize,
    pub d: usize,
}

/// Attention pooling over the MWP's own embeddings: position t attends to
/// every position j with weight softmax_j(m_j . m_t / sqrt(D)).
pub fn contextual_embed(m: &[f64], t: usize, d: usize) -> ContextualEmbed {
    assert!(t >= 1, "need at least one token");
    assert_eq!(m.len(), t * d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; t * t];
    let mut features = vec![0.0; t * d];
    for i in 0..t {
        let mi = &m[i * d..(i + 1) * d];
        let row = &mut weights[i * t..(i + 1) * t];
        for (j, w) in row.iter_mut().enumerate() {
            let mj = &m[j * d..(j + 1) * d];
            *w = mi.iter().zip(mj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for w in row.iter_mut() {
            *w = (*w - max).exp();
            denom += *w;
        }
        for w in row.iter_mut() {
            *w /= denom;
        }
        for (j, &w) in row.iter().enumerate() {
            let mj = &m[j * d..(j + 1) * d];
            for (f, &x) in features[i * d..(i + 1) * d].iter_mut().zip(mj) {
                *f += w * x;
            }
        }
    }
    ContextualEmbed {
        features,
        weights,
        t,
        d,
    }
}

/// One eligible vocabulary item of an MWP with its selection probability.
#[derive(Debug, Clone)]
pub struct KeywordItem {
    pub token: String,
    pub q: f64,
    /// Occurrence positions in the MWP (all contribute to `q` by mean).
    pub positions: Vec<usize>,
}

/// Probabilities for the eligible items of one MWP, in first-occurrence
/// order. Items absent from the MWP or ineligible implicitly have q = 0.
#[derive(Debug, Clone, Default)]
pub struct KeywordDistribution {
    pub items: Vec<KeywordItem>,
}

impl KeywordDistribution {
    pub fn q_of(&self, token: &str) -> f64 {
        self.items
            .iter()
            .find(|i| i.token == token)
            .map_or(0.0, |i| i.q)
    }
}

// Unique eligible tokens in first-occurrence order with their positions.
fn eligible_items(vocab: &Vocab, mwp_tokens: &[String]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    for (pos, token) in mwp_tokens.iter().enumerate() {
        let id = vocab.id_or_unk(token);
        if !vocab.eligible_keyword(id) {
            continue;
        }
        match order.iter_mut().find(|(t, _)| t == token) {
            Some((_, positions)) => positions.push(pos),
            None => order.push((token.clone(), vec![pos])),
        }
    }
    order
}

fn snapshot_rows(store: &ParamStore, selector: &Selector, vocab: &Vocab, tokens: &[String]) -> Vec<f64> {
    let table = store.value(selector.embed);
    let d = selector.d_model;
    let mut m = Vec::with_capacity(tokens.len() * d);
    for token in tokens {
        let id = vocab.id_or_unk(token) as usize;
        m.extend_from_slice(&table[id * d..(id + 1) * d]);
    }
    m
}

/// Pure inference scoring: sigmoid head on contextual features, mean over
/// repeated occurrences of the same item.
pub fn keyword_probs(
    store: &ParamStore,
    selector: &Selector,
    vocab: &Vocab,
    mwp_tokens: &[String],
) -> KeywordDistribution {
    if mwp_tokens.is_empty() {
        return KeywordDistribution::default();
    }
    let m = snapshot_rows(store, selector, vocab, mwp_tokens);
    let ctx = contextual_embed(&m, mwp_tokens.len(), selector.d_model);
    let w = store.value(selector.w);
    let b = store.value(selector.b)[0];
    let scores: Vec<f64> = (0..ctx.t)
        .map(|i| {
            let logit = ctx.features[i * ctx.d..(i + 1) * ctx.d]
                .iter()
                .zip(w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + b;
            1.0 / (1.0 + (-logit).exp())
        })
        .collect();
    let items = eligible_items(vocab, mwp_tokens)
        .into_iter()
        .map(|(token, positions)| {
            let q = positions.iter().map(|&p| scores[p]).sum::<f64>() / positions.len() as f64;
            KeywordItem { token, q, positions }
        })
        .collect();
    KeywordDistribution { items }
}

/// Differentiable per-item probabilities for training. The contextual
/// features are constants (embeddings frozen); only `w` and `b` are bound as
/// parameters. Returns the item metadata and the `(I,1)` probability node.
pub struct TapeDistribution {
    pub items: Vec<(String, Vec<usize>)>,
    pub q: TensorRef,
}

pub fn keyword_probs_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    selector: &Selector,
    vocab: &Vocab,
    mwp_tokens: &[String],
) -> Option<TapeDistribution> {
    let items = eligible_items(vocab, mwp_tokens);
    if items.is_empty() {
        return None;
    }
    let t = mwp_tokens.len();
    let m = snapshot_rows(store, selector, vocab, mwp_tokens);
    let ctx = contextual_embed(&m, t, selector.d_model);
    let features = tape.leaf(t, selector.d_model, ctx.features);
    let w = tape.param(store, selector.w);
    let b = tape.param(store, selector.b);
    let logits = tape.matmul(features, w);
    let logits = tape.add(logits, b);
    let q_pos = tape.sigmoid(logits); // (T,1)

    // mean over occurrences: aggregation matrix (I,T)
    let mut agg = vec![0.0; items.len() * t];
    for (i, (_, positions)) in items.iter().enumerate() {
        for &p in positions {
            agg[i * t + p] = 1.0 / positions.len() as f64;
        }
    }
    let agg = tape.leaf(items.len(), t, agg);
    let q = tape.matmul(agg, q_pos);
    Some(TapeDistribution { items, q })
}

/// Unnormalized sum of `KL(Bernoulli(q_i) || Bernoulli(rho))` over eligible
/// items; the tape version is [`context_loss_on_tape`].
pub fn context_loss(dist: &KeywordDistribution, rho: f64) -> f64 {
    dist.items
        .iter()
        .map(|i| discrete::bernoulli_kl(i.q, rho))
        .sum()
}

pub fn context_loss_on_tape(tape: &mut Tape, q_items: TensorRef, rho: f64) -> TensorRef {
    let kl = discrete::bernoulli_kl_on_tape(tape, q_items, rho);
    tape.sum(kl)
}

pub enum SelectionMode<'a> {
    /// Independent Bernoulli draw per item.
    Sample(&'a mut Stream),
    /// Deterministic `q > 0.5`.
    Threshold,
}

/// Selected keyword tokens in first-occurrence order. Always a subset of the
/// distribution's (eligible) items.
pub fn select_keywords(dist: &KeywordDistribution, mode: SelectionMode) -> Vec<String> {
    match mode {
        SelectionMode::Sample(rng) => {
            let qs: Vec<f64> = dist.items.iter().map(|i| i.q).collect();
            let draws = discrete::sample_bernoulli(&qs, rng);
            dist.items
                .iter()
                .zip(&draws)
                .filter(|(_, &c)| c == 1.0)
                .map(|(i, _)| i.token.clone())
                .collect()
        }
        SelectionMode::Threshold => dist
            .items
            .iter()
            .filter(|i| i.q > 0.5)
            .map(|i| i.token.clone())
            .collect(),
    }
}

/// Document frequencies over a training corpus (eligible tokens only).
pub struct CorpusStats {
    pub n_docs: usize,
    df: HashMap<String, usize>,
}

pub fn build_corpus_stats(corpus: &[MaskedExample], vocab: &Vocab) -> CorpusStats {
    let mut df: HashMap<String, usize> = HashMap::new();
    for example in corpus {
        for (token, _) in eligible_items(vocab, &example.mwp_tokens) {
            *df.entry(token).or_insert(0) += 1;
        }
    }
    CorpusStats {
        n_docs: corpus.len(),
        df,
    }
}

impl CorpusStats {
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        (self.n_docs as f64 / (1.0 + df as f64)).ln()
    }
}

/// Top-k eligible tokens by `tf * idf`; ties break lexicographically. With k
/// larger than the number of eligible items, returns them all.
pub fn tfidf_keywords(
    stats: &CorpusStats,
    vocab: &Vocab,
    mwp_tokens: &[String],
    k: usize,
) -> Vec<String> {
    let mut scored: Vec<(String, f64)> = eligible_items(vocab, mwp_tokens)
        .into_iter()
        .map(|(token, positions)| {
            let score = positions.len() as f64 * stats.idf(&token);
            (token, score)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored.into_iter().map(|(t, _)| t).collect()
}
