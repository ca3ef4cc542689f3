use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercased function words excluded from keyword selection.
#[derive(Debug, Clone, Default)]
pub struct StopList {
    words: HashSet<String>,
}

impl StopList {
    /// One word per line; `#` comment lines and blanks are skipped.
    pub fn from_text(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_lowercase())
            .collect();
        StopList { words }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read stoplist {}: {e}", path.display())))?;
        Ok(Self::from_text(&text))
    }

    /// The English stoplist shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_text(include_str!("../../data/stopwords.txt"))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFlags {
    pub stopword: bool,
    pub punctuation: bool,
    pub number: bool,
}

fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}

fn is_number_token(token: &str) -> bool {
    let bytes = token.as_bytes();
    if bytes.len() > 3 && bytes.starts_with(b"num") && bytes[3..].iter().all(u8::is_ascii_digit) {
        return true;
    }
    !token.is_empty()
        && bytes[0].is_ascii_digit()
        && bytes
            .iter()
            .all(|b| b.is_ascii_digit() || *b == b'.' || *b == b'/')
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabData {
    tokens: Vec<String>,
    flags: Vec<TokenFlags>,
}

/// Token table shared by MWP text and equations. Ids 0..=4 are the special
/// tokens; flags are fixed at build time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabData", into = "VocabData")]
pub struct Vocab {
    tokens: Vec<String>,
    flags: Vec<TokenFlags>,
    index: HashMap<String, u32>,
}

impl From<VocabData> for Vocab {
    fn from(data: VocabData) -> Self {
        let index = data
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens: data.tokens,
            flags: data.flags,
            index,
        }
    }
}

impl From<Vocab> for VocabData {
    fn from(vocab: Vocab) -> Self {
        VocabData {
            tokens: vocab.tokens,
            flags: vocab.flags,
        }
    }
}

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const SEP: u32 = 3;
    pub const UNK: u32 = 4;

    fn from_tokens(tokens: Vec<String>, stoplist: &StopList) -> Self {
        let flags = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i < SPECIAL_TOKENS.len() {
                    TokenFlags::default()
                } else {
                    TokenFlags {
                        stopword: stoplist.contains(t),
                        punctuation: is_punctuation(t),
                        number: is_number_token(t),
                    }
                }
            })
            .collect();
        Vocab::from(VocabData { tokens, flags })
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    pub fn flags(&self, id: u32) -> TokenFlags {
        self.flags[id as usize]
    }

    /// Content words only: not special, stopword, punctuation, or number.
    pub fn eligible_keyword(&self, id: u32) -> bool {
        if self.is_special(id) {
            return false;
        }
        let f = self.flags[id as usize];
        !f.stopword && !f.punctuation && !f.number
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Builds the shared vocabulary. Equation symbols and `numK` placeholders are
/// always included; other MWP tokens must reach `min_freq`. Order is
/// frequency-descending with lexicographic tie-break, so the table is a pure
/// function of the corpus.
pub fn build_vocab(
    corpus: &[super::MaskedExample],
    min_freq: usize,
    stoplist: &StopList,
) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Data("build_vocab: empty corpus".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut always: HashSet<&str> = HashSet::new();
    for example in corpus {
        for token in &example.mwp_tokens {
            *freq.entry(token).or_insert(0) += 1;
            if is_number_token(token) {
                always.insert(token);
            }
        }
        for symbol in &example.equation_symbols {
            *freq.entry(symbol).or_insert(0) += 1;
            always.insert(symbol);
        }
    }
    let mut entries: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(t, n)| *n >= min_freq || always.contains(t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(entries.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocab::from_tokens(tokens, stoplist))
}
