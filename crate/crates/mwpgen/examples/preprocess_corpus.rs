//! Corpus preprocessing: number masking, tokenization, and the exact
//! unmask round-trip.
//!
//!     cargo run --example preprocess_corpus

use mwpgen::corpus::{
    build_vocab, mask_numbers, preprocess, synth_corpus, to_raw, tokenize_equation, unmask,
    RawExample, StopList,
};

fn main() -> mwpgen::Result<()> {
    let raw = RawExample {
        id: "demo-1".to_string(),
        mwp: "Joan found 70 seashells. She gave Sam 27.5 of them. \
              How many does she have left?"
            .to_string(),
        equation: "x = 70 - 27.5".to_string(),
        numbers: None,
    };

    let (masked, map) = mask_numbers(&raw.mwp);
    println!("masked text : {masked}");
    println!("number map  : {:?}", map.0);
    println!("round trip  : {}", unmask(&masked, &map)?);
    assert_eq!(unmask(&masked, &map)?, raw.mwp);

    let example = preprocess(&raw)?;
    println!("\nmwp tokens  : {:?}", example.mwp_tokens);
    println!("equation    : {:?}", example.equation_symbols);
    println!("eq tokens   : {:?}", tokenize_equation("x=(num1-num2)")?);

    // a synthetic corpus provides deterministic data for every other example
    let corpus = synth_corpus(200, 7);
    let vocab = build_vocab(&corpus, 1, &StopList::builtin())?;
    let mean_len: f64 =
        corpus.iter().map(|e| e.mwp_tokens.len() as f64).sum::<f64>() / corpus.len() as f64;
    println!("\nsynthetic corpus: {} examples", corpus.len());
    println!("mean MWP length : {mean_len:.2} tokens");
    println!("vocabulary      : {} entries", vocab.len());
    println!("sample          : {}", corpus[0].mwp_text());
    println!("                  {}", corpus[0].equation_text());

    // masked examples round-trip through the raw form as well
    let back = to_raw(&corpus[0])?;
    println!("unmasked        : {}", back.mwp);
    Ok(())
}
