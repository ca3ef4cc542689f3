//! A small decoder-only transformer as a conditional language model:
//! overfit a handful of problems (`equation, keywords -> MWP`), then decode
//! them back greedily.
//!
//!     cargo run --release --example language_model

use mwpgen::corpus::{build_vocab, synth_corpus, StopList};
use mwpgen::model::{
    decode_tokens, generator_input, Decoder, DecoderConfig, GenerateOptions, SerializedInput,
};
use mwpgen::rng;
use mwpgen::selector::{build_corpus_stats, tfidf_keywords};
use mwpgen::tensor::ParamStore;
use mwpgen::train::lm_step;

fn main() -> mwpgen::Result<()> {
    let corpus = synth_corpus(8, 3);
    let vocab = build_vocab(&corpus, 1, &StopList::builtin())?;
    let config = DecoderConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq: 96,
    };
    let mut store = ParamStore::new("generator");
    let mut stream = rng::substream(11, "init");
    let decoder = Decoder::new(&mut store, config, &mut stream)?;
    println!("parameters: {}", store.total_elements());

    // fixed conditioning context per example: equation + tf-idf keywords
    let stats = build_corpus_stats(&corpus, &vocab);
    let inputs: Vec<SerializedInput> = corpus
        .iter()
        .map(|ex| {
            let keywords = tfidf_keywords(&stats, &vocab, &ex.mwp_tokens, 5);
            generator_input(&vocab, &ex.equation_symbols, &keywords, &ex.mwp_tokens, 96)
        })
        .collect();

    for step in 0..250 {
        let nll = lm_step(&mut store, &decoder, &inputs, 3e-3, Some(1.0))?;
        if step % 50 == 0 {
            println!("step {step:>3}: mean NLL {nll:.4}");
        }
    }

    let opts = GenerateOptions {
        max_new: 48,
        temperature: None,
    };
    let mut exact = 0;
    for (example, input) in corpus.iter().zip(&inputs) {
        let context = &input.ids[..input.target_start];
        let mut stream = rng::substream(11, "decode");
        let out = decode_tokens(&store, &decoder, context, &opts, &mut stream);
        let text = vocab.decode(&out.ids).join(" ");
        if text == example.mwp_text() {
            exact += 1;
        }
        println!("\nequation : {}", example.equation_text());
        println!("decoded  : {text}");
    }
    println!("\nexact reproductions: {exact}/{}", corpus.len());
    Ok(())
}
