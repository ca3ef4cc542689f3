//! Dataset ingestion and preprocessing: number masking, tokenization,
//! vocabulary construction, fold splitting, context augmentation, and a
//! synthetic corpus generator used by tests and examples.

mod vocab;

pub use vocab::{build_vocab, StopList, TokenFlags, Vocab};

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// One raw (MWP, equation) pair as found in a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub mwp: String,
    pub equation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numbers: Option<Vec<(String, String)>>,
}

impl RawExample {
    pub fn validate(&self) -> Result<()> {
        if self.mwp.trim().is_empty() {
            return Err(Error::Data(format!("example {}: empty mwp text", self.id)));
        }
        let eq_count = self.equation.matches('=').count();
        if eq_count != 1 {
            return Err(Error::Data(format!(
                "example {}: equation must contain exactly one '=', found {}",
                self.id, eq_count
            )));
        }
        Ok(())
    }
}

/// Ordered `numK -> original literal` map. Order is MWP reading order,
/// with equation-only literals appended.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumberMap(pub Vec<(String, String)>);

impl NumberMap {
    pub fn get(&self, token: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(t, _)| t == token)
            .map(|(_, v)| v.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(t, v)| (t.as_str(), v.as_str()))
    }

    fn push(&mut self, literal: &str) -> String {
        let token = format!("num{}", self.0.len() + 1);
        self.0.push((token.clone(), literal.to_string()));
        token
    }
}

/// One preprocessed example: masked tokens on both sides plus the map
/// back to the original numeric literals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskedExample {
    pub id: String,
    pub mwp_tokens: Vec<String>,
    pub equation_symbols: Vec<String>,
    pub number_map: NumberMap,
}

impl MaskedExample {
    /// Masked MWP as display text (tokens joined by single spaces).
    pub fn mwp_text(&self) -> String {
        self.mwp_tokens.join(" ")
    }

    pub fn equation_text(&self) -> String {
        self.equation_symbols.join(" ")
    }
}

fn is_mask_token_at(bytes: &[u8], i: usize) -> Option<usize> {
    // Recognizes `num<digits>` starting at byte i; returns its end offset.
    if bytes[i..].starts_with(b"num") {
        let mut j = i + 3;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        if j > i + 3 {
            return Some(j);
        }
    }
    None
}

fn numeric_literal_at(bytes: &[u8], i: usize) -> Option<usize> {
    // Maximal `\d+([./]\d+)?` run starting at byte i; returns end offset.
    if !bytes[i].is_ascii_digit() {
        return None;
    }
    let mut j = i;
    while j < bytes.len() && bytes[j].is_ascii_digit() {
        j += 1;
    }
    if j < bytes.len() && (bytes[j] == b'.' || bytes[j] == b'/') {
        let mut k = j + 1;
        while k < bytes.len() && bytes[k].is_ascii_digit() {
            k += 1;
        }
        if k > j + 1 {
            j = k;
        }
    }
    Some(j)
}

/// Replaces numeric literals (integers, decimals, simple fractions) with
/// `num1..numK` in reading order. Existing `numK` tokens are left untouched,
/// so masking is idempotent.
pub fn mask_numbers(text: &str) -> (String, NumberMap) {
    let mut map = NumberMap::default();
    let (masked, _) = mask_into(text, &mut map, &mut Vec::new(), false);
    (masked, map)
}

// Shared scanner. When `match_existing` is set, each literal is first matched
// against an unconsumed entry of `map` (string equality, then numeric
// equality); otherwise every literal gets a fresh token.
fn mask_into(
    text: &str,
    map: &mut NumberMap,
    consumed: &mut Vec<bool>,
    match_existing: bool,
) -> (String, usize) {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut replaced = 0;
    while i < bytes.len() {
        if let Some(end) = is_mask_token_at(bytes, i) {
            out.push_str(&text[i..end]);
            i = end;
            continue;
        }
        if let Some(end) = numeric_literal_at(bytes, i) {
            let literal = &text[i..end];
            let token = if match_existing {
                match_literal(map, consumed, literal)
            } else {
                map.push(literal)
            };
            out.push_str(&token);
            replaced += 1;
            i = end;
            continue;
        }
        let ch = text[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    (out, replaced)
}

fn match_literal(map: &mut NumberMap, consumed: &mut Vec<bool>, literal: &str) -> String {
    consumed.resize(map.len(), false);
    // earliest unconsumed entry with the same literal string
    for (idx, (token, orig)) in map.0.iter().enumerate() {
        if !consumed[idx] && orig == literal {
            consumed[idx] = true;
            return token.clone();
        }
    }
    // fall back to numeric equality ("70" vs "70.0")
    if let Ok(value) = literal.parse::<f64>() {
        for (idx, (token, orig)) in map.0.iter().enumerate() {
            if !consumed[idx] && orig.parse::<f64>() == Ok(value) {
                consumed[idx] = true;
                return token.clone();
            }
        }
    }
    consumed.push(true);
    map.push(literal)
}

/// Masks an (MWP, equation) pair with a shared number map. Equation literals
/// are matched to the earliest unconsumed MWP literal of equal value;
/// equation-only literals get fresh tokens.
pub fn mask_pair(mwp: &str, equation: &str) -> (String, String, NumberMap) {
    let mut map = NumberMap::default();
    let mut consumed = Vec::new();
    let (masked_mwp, _) = mask_into(mwp, &mut map, &mut consumed, false);
    consumed.resize(map.len(), false);
    let (masked_eq, _) = mask_into(equation, &mut map, &mut consumed, true);
    (masked_mwp, masked_eq, map)
}

/// Restores original literals. Errors if a `numK` token has no map entry.
pub fn unmask(masked: &str, map: &NumberMap) -> Result<String> {
    let bytes = masked.as_bytes();
    let mut out = String::with_capacity(masked.len());
    let mut i = 0;
    while i < bytes.len() {
        if let Some(end) = is_mask_token_at(bytes, i) {
            let token = &masked[i..end];
            match map.get(token) {
                Some(orig) => out.push_str(orig),
                None => {
                    return Err(Error::Data(format!(
                        "unmask: no entry for token '{token}'"
                    )))
                }
            }
            i = end;
            continue;
        }
        let ch = masked[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    Ok(out)
}

/// Whitespace split with leading/trailing punctuation detached as separate
/// tokens. Lowercases by default.
pub fn tokenize_mwp(text: &str) -> Vec<String> {
    tokenize_mwp_with(text, true)
}

pub fn tokenize_mwp_with(text: &str, lowercase: bool) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        let mut leading = Vec::new();
        while lo < hi && !chars[lo].is_alphanumeric() {
            leading.push(chars[lo].to_string());
            lo += 1;
        }
        let mut trailing = Vec::new();
        while hi > lo && !chars[hi - 1].is_alphanumeric() {
            trailing.push(chars[hi - 1].to_string());
            hi -= 1;
        }
        tokens.extend(leading);
        if hi > lo {
            let core: String = chars[lo..hi].iter().collect();
            tokens.push(if lowercase {
                core.to_lowercase()
            } else {
                core
            });
        }
        trailing.reverse();
        tokens.extend(trailing);
    }
    tokens
}

/// Splits an equation into math symbols: one symbol per variable, operator,
/// parenthesis, `numK` token, or numeric literal. Errors with the byte
/// position of any unrecognized character.
pub fn tokenize_equation(text: &str) -> Result<Vec<String>> {
    let bytes = text.as_bytes();
    let mut symbols = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if let Some(end) = is_mask_token_at(bytes, i) {
            symbols.push(text[i..end].to_string());
            i = end;
            continue;
        }
        if c.is_ascii_alphabetic() {
            let mut j = i;
            while j < bytes.len() && bytes[j].is_ascii_alphabetic() {
                j += 1;
            }
            symbols.push(text[i..j].to_lowercase());
            i = j;
            continue;
        }
        if let Some(end) = numeric_literal_at(bytes, i) {
            symbols.push(text[i..end].to_string());
            i = end;
            continue;
        }
        if matches!(c, b'=' | b'+' | b'-' | b'*' | b'/' | b'(' | b')' | b'^') {
            symbols.push((c as char).to_string());
            i += 1;
            continue;
        }
        let ch = text[i..].chars().next().unwrap();
        return Err(Error::Data(format!(
            "unrecognized equation character '{ch}' at position {i}"
        )));
    }
    Ok(symbols)
}

/// Tokenizes a raw example into a [`MaskedExample`], masking numbers first.
pub fn preprocess(example: &RawExample) -> Result<MaskedExample> {
    example.validate()?;
    let (masked_mwp, masked_eq, map) = mask_pair(&example.mwp, &example.equation);
    Ok(MaskedExample {
        id: example.id.clone(),
        mwp_tokens: tokenize_mwp(&masked_mwp),
        equation_symbols: tokenize_equation(&masked_eq)?,
        number_map: map,
    })
}

/// Assignment of example indices to folds. Sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn kfold_split(n_examples: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Usage(format!("kfold: k must be >= 2, got {k}")));
    }
    if k > n_examples {
        return Err(Error::Usage(format!(
            "kfold: k={k} exceeds number of examples {n_examples}"
        )));
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut stream = rng::substream(seed, "kfold");
    rng::shuffle(&mut stream, &mut order);
    let mut fold_of = vec![0usize; n_examples];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Drops each keyword independently with probability `drop_p`, then permutes
/// the survivors.
pub fn augment_context(keywords: &[String], drop_p: f64, rng: &mut Stream) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&drop_p) {
        return Err(Error::Usage(format!(
            "augment_context: drop_p must be in [0,1], got {drop_p}"
        )));
    }
    let mut kept: Vec<String> = keywords
        .iter()
        .filter(|_| rng::uniform(rng) >= drop_p)
        .cloned()
        .collect();
    rng::shuffle(rng, &mut kept);
    Ok(kept)
}

const SYNTH_NAMES: &[&str] = &[
    "joan", "sam", "emily", "bruce", "mildred", "carol", "keith", "sandy", "melanie", "alyssa",
    "ethan", "alissa", "fred", "sara", "sally", "mike", "tom", "dan", "nancy", "jason",
];

const SYNTH_OBJECTS: &[&str] = &[
    "seashells", "cards", "apples", "candies", "marbles", "balloons", "pencils", "books",
    "stickers", "oranges", "cookies", "crayons", "peaches", "plums", "erasers", "kittens",
    "puppies", "quarters", "blocks", "shells", "pears", "grapes", "melons", "ribbons",
    "stamps", "tickets", "coins", "beads",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SynthOp {
    Add,
    Sub,
    Mul,
    Div,
}

const SYNTH_OPS: [SynthOp; 4] = [SynthOp::Add, SynthOp::Sub, SynthOp::Mul, SynthOp::Div];

fn synth_template(
    op: SynthOp,
    three_numbers: bool,
    name: &str,
    obj: &str,
) -> (String, String) {
    match op {
        SynthOp::Add if three_numbers => (
            format!(
                "{name} has num1 {obj} . {name} gets num2 more and then num3 more . how many {obj} ?"
            ),
            "x = ( num1 + num2 + num3 )".to_string(),
        ),
        SynthOp::Add => (
            format!("{name} has num1 {obj} . {name} gets num2 more . how many {obj} ?"),
            "x = ( num1 + num2 )".to_string(),
        ),
        SynthOp::Sub => (
            format!(
                "{name} has num1 {obj} . {name} gives away num2 {obj} . how many {obj} are left ?"
            ),
            "x = ( num1 - num2 )".to_string(),
        ),
        SynthOp::Mul => (
            format!(
                "{name} puts num1 {obj} in each box . {name} fills num2 boxes . how many {obj} in all ?"
            ),
            "x = ( num1 * num2 )".to_string(),
        ),
        SynthOp::Div => (
            format!(
                "{name} shares num1 {obj} among num2 friends . how many {obj} does each friend get ?"
            ),
            "x = ( num1 / num2 )".to_string(),
        ),
    }
}

/// Template-generated single-operator corpus. Operator counts are balanced;
/// (template, agent, object) triples are kept distinct while the combination
/// space allows it, so conditioning on (equation, keywords) identifies an
/// example.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<MaskedExample> {
    assert!(n >= 1, "synth_corpus: n must be >= 1");
    let mut stream = rng::substream(seed, "synth");
    let mut ops: Vec<SynthOp> = (0..n).map(|i| SYNTH_OPS[i % 4]).collect();
    rng::shuffle(&mut stream, &mut ops);

    let mut used: HashSet<(u8, bool, usize, usize)> = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for (i, &op) in ops.iter().enumerate() {
        let three = op == SynthOp::Add && rng::uniform(&mut stream) < 0.5;
        let (name_idx, obj_idx) = {
            let mut pick = (
                rng::index(&mut stream, SYNTH_NAMES.len()),
                rng::index(&mut stream, SYNTH_OBJECTS.len()),
            );
            let mut attempts = 0;
            while !used.insert((op as u8, three, pick.0, pick.1)) && attempts < 64 {
                pick = (
                    rng::index(&mut stream, SYNTH_NAMES.len()),
                    rng::index(&mut stream, SYNTH_OBJECTS.len()),
                );
                attempts += 1;
            }
            pick
        };
        let (mwp, eq) = synth_template(op, three, SYNTH_NAMES[name_idx], SYNTH_OBJECTS[obj_idx]);
        let count = if three { 3 } else { 2 };
        let mut map = NumberMap::default();
        for _ in 0..count {
            let value = 2 + rng::index(&mut stream, 98);
            map.push(&value.to_string());
        }
        let mut id = String::new();
        let _ = write!(id, "synth-{i:05}");
        out.push(MaskedExample {
            id,
            mwp_tokens: tokenize_mwp(&mwp),
            equation_symbols: tokenize_equation(&eq).expect("templates are well formed"),
            number_map: map,
        });
    }
    out
}

/// Converts a masked example back to raw text form (numbers restored).
pub fn to_raw(example: &MaskedExample) -> Result<RawExample> {
    let mwp = unmask(&example.mwp_text(), &example.number_map)?;
    let equation = unmask(&example.equation_text(), &example.number_map)?;
    Ok(RawExample {
        id: example.id.clone(),
        mwp,
        equation,
        numbers: None,
    })
}

/// Reads `{"id", "mwp", "equation"}` JSON Lines. Blank lines are skipped;
/// schema violations report the line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<RawExample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: RawExample = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}: line {}: {e}", path.display(), lineno + 1))
        })?;
        example
            .validate()
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), lineno + 1)))?;
        out.push(example);
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{}: no examples found",
            path.display()
        )));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for example in examples {
        serde_json::to_writer(&mut file, example)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a masked-corpus file written by [`write_masked_jsonl`]. Tokens are
/// recovered by whitespace splitting (the writer joins with single spaces).
pub fn load_masked_jsonl(path: &Path) -> Result<Vec<MaskedExample>> {
    let raws = load_jsonl(path)?;
    Ok(raws
        .into_iter()
        .map(|r| MaskedExample {
            id: r.id,
            mwp_tokens: r.mwp.split_whitespace().map(str::to_string).collect(),
            equation_symbols: r.equation.split_whitespace().map(str::to_string).collect(),
            number_map: NumberMap(r.numbers.unwrap_or_default()),
        })
        .collect())
}

/// Masked-corpus JSONL: same schema with masked text plus the number map.
pub fn write_masked_jsonl(path: &Path, examples: &[MaskedExample]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for example in examples {
        let record = RawExample {
            id: example.id.clone(),
            mwp: example.mwp_text(),
            equation: example.equation_text(),
            numbers: Some(example.number_map.0.clone()),
        };
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE1_MWP: &str = "Joan found 70 seashells on the beach . She gave Sam some of her seashells . She has 27 seashells . How many seashells did she give to Sam ?";
    const TABLE1_EQ: &str = "x = (70 - 27)";

    #[test]
    fn mask_reading_order() {
        let (masked, map) = mask_numbers(TABLE1_MWP);
        assert!(masked.contains("found num1 seashells"));
        assert!(masked.contains("has num2 seashells"));
        assert_eq!(map.get("num1"), Some("70"));
        assert_eq!(map.get("num2"), Some("27"));
    }

    #[test]
    fn mask_pair_matches_equation_literals() {
        let (_, eq, map) = mask_pair(TABLE1_MWP, TABLE1_EQ);
        assert_eq!(eq, "x = (num1 - num2)");
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn mask_no_numbers() {
        let (masked, map) = mask_numbers("How many apples?");
        assert_eq!(masked, "How many apples?");
        assert!(map.is_empty());
    }

    #[test]
    fn mask_duplicates_get_distinct_tokens() {
        let (masked, map) = mask_numbers("buy 3 pens and 3 books for 4.5 dollars");
        assert_eq!(masked, "buy num1 pens and num2 books for num3 dollars");
        assert_eq!(map.get("num1"), Some("3"));
        assert_eq!(map.get("num2"), Some("3"));
        assert_eq!(map.get("num3"), Some("4.5"));
    }

    #[test]
    fn mask_duplicate_equation_consumption() {
        let (_, eq, map) = mask_pair("buy 3 pens and 3 books", "x = 3 * 3");
        assert_eq!(eq, "x = num1 * num2");
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn equation_only_literal_gets_fresh_token() {
        let (_, eq, map) = mask_pair("split 10 apples evenly", "x = 10 / 2");
        assert_eq!(eq, "x = num1 / num2");
        assert_eq!(map.get("num2"), Some("2"));
    }

    #[test]
    fn mask_is_idempotent() {
        let (masked, _) = mask_numbers(TABLE1_MWP);
        let (again, map) = mask_numbers(&masked);
        assert_eq!(again, masked);
        assert!(map.is_empty());
    }

    #[test]
    fn unmask_round_trip() {
        let (masked, map) = mask_numbers(TABLE1_MWP);
        assert_eq!(unmask(&masked, &map).unwrap(), TABLE1_MWP);
    }

    #[test]
    fn unmask_order_independent() {
        let map = NumberMap(vec![
            ("num1".into(), "1".into()),
            ("num2".into(), "2".into()),
        ]);
        assert_eq!(unmask("num2 num1", &map).unwrap(), "2 1");
    }

    #[test]
    fn unmask_missing_entry_names_token() {
        let err = unmask("num7 left", &NumberMap::default()).unwrap_err();
        assert!(err.to_string().contains("num7"));
    }

    #[test]
    fn tokenize_mwp_detaches_punctuation() {
        assert_eq!(
            tokenize_mwp("She has num2 seashells ."),
            vec!["she", "has", "num2", "seashells", "."]
        );
        assert_eq!(tokenize_mwp("(num1)"), vec!["(", "num1", ")"]);
        assert!(tokenize_mwp("").is_empty());
    }

    #[test]
    fn tokenize_equation_symbols() {
        let symbols = tokenize_equation("x = ( num1 - num2 )").unwrap();
        assert_eq!(symbols, vec!["x", "=", "(", "num1", "-", "num2", ")"]);
        assert_eq!(symbols.len(), 7);
        assert!(tokenize_equation("").unwrap().is_empty());
        // no spacing required
        assert_eq!(
            tokenize_equation("x=(num1-num2)").unwrap(),
            vec!["x", "=", "(", "num1", "-", "num2", ")"]
        );
    }

    #[test]
    fn tokenize_equation_rejects_unknown_chars() {
        let err = tokenize_equation("x = num1 @ num2").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('@'), "{msg}");
        assert!(msg.contains("position 9"), "{msg}");
    }

    #[test]
    fn kfold_sizes_and_determinism() {
        let a = kfold_split(10, 5, 7).unwrap();
        assert_eq!(a.sizes(), vec![2, 2, 2, 2, 2]);
        let b = kfold_split(10, 5, 7).unwrap();
        assert_eq!(a, b);
        assert!(kfold_split(3, 5, 7).is_err());
        assert!(kfold_split(10, 1, 7).is_err());
    }

    #[test]
    fn kfold_math23k_scale_sizes() {
        let assignment = kfold_split(23162, 5, 0).unwrap();
        let mut sizes = assignment.sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![4633, 4633, 4632, 4632, 4632]);
    }

    #[test]
    fn kfold_partitions_exactly() {
        let assignment = kfold_split(101, 4, 3).unwrap();
        let mut seen = vec![false; 101];
        for fold in 0..4 {
            for i in assignment.test_indices(fold) {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn augment_edge_probabilities() {
        let kws: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut stream = rng::substream(1, "aug");
        let kept = augment_context(&kws, 0.0, &mut stream).unwrap();
        let mut sorted = kept.clone();
        sorted.sort();
        assert_eq!(sorted, kws);
        let none = augment_context(&kws, 1.0, &mut stream).unwrap();
        assert!(none.is_empty());
        assert!(augment_context(&kws, 1.5, &mut stream).is_err());
    }

    #[test]
    fn augment_binomial_mean() {
        let kws: Vec<String> = (0..5).map(|i| format!("k{i}")).collect();
        let mut stream = rng::substream(11, "aug-mean");
        let mut total = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            total += augment_context(&kws, 0.3, &mut stream).unwrap().len();
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 3.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_corpus(500, 42);
        let b = synth_corpus(500, 42);
        assert_eq!(a.len(), 500);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mwp_tokens, y.mwp_tokens);
            assert_eq!(x.equation_symbols, y.equation_symbols);
        }
        let mut counts = [0usize; 4];
        for example in &a {
            let op = example
                .equation_symbols
                .iter()
                .find(|s| ["+", "-", "*", "/"].contains(&s.as_str()))
                .unwrap()
                .clone();
            let idx = ["+", "-", "*", "/"]
                .iter()
                .position(|o| *o == op)
                .unwrap();
            counts[idx] += 1;
        }
        for &c in &counts {
            assert!((100..=150).contains(&c), "operator count {c} outside 125 +/- 25");
        }
    }

    #[test]
    fn synth_round_trips() {
        for example in synth_corpus(32, 9) {
            let raw = to_raw(&example).unwrap();
            let (masked_mwp, masked_eq, _) = mask_pair(&raw.mwp, &raw.equation);
            assert_eq!(tokenize_mwp(&masked_mwp), example.mwp_tokens);
            assert_eq!(
                tokenize_equation(&masked_eq).unwrap(),
                example.equation_symbols
            );
        }
    }

    #[test]
    fn synth_template_shape() {
        let (mwp, eq) = synth_template(SynthOp::Add, false, "joan", "candies");
        assert_eq!(
            mwp,
            "joan has num1 candies . joan gets num2 more . how many candies ?"
        );
        assert_eq!(eq, "x = ( num1 + num2 )");
    }

    #[test]
    fn preprocess_validates() {
        let bad = RawExample {
            id: "e1".into(),
            mwp: "two plus two".into(),
            equation: "x == 4".into(),
            numbers: None,
        };
        assert!(preprocess(&bad).is_err());
    }
}
