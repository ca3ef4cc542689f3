//! The evaluation stack on hand-checkable fixtures: corpus BLEU-4, ROUGE-L,
//! exact-match METEOR, distinct-3, round-trip equation accuracy, and
//! novelty.
//!
//!     cargo run --example evaluation_metrics

use mwpgen::metrics::{
    acc_eq_with, bleu4, canonicalize_equation, dist_n, meteor_lite, novelty, rouge_l,
};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() -> mwpgen::Result<()> {
    // corpus BLEU-4 with a single one-token-short candidate: all clipped
    // precisions are 1, so only the brevity penalty e^(1 - 5/4) remains
    let score = bleu4(&[toks("a b c d")], &[toks("a b c d e")])?;
    println!("BLEU-4 brevity case : {score:.9} (e^-0.25 = {:.9})", (-0.25f64).exp());

    let r = rouge_l(&toks("the cat sat"), &toks("the cat ran"));
    println!("ROUGE-L 2-of-3      : {r:.9}");

    let m = meteor_lite(&toks("a b c d"), &toks("a b c d"));
    println!("METEOR identical    : {m} (1 - 0.5/64 = 0.9921875)");
    let m = meteor_lite(&toks("b a"), &toks("a c"));
    println!("METEOR one match    : {m} (P=R=1/2, one chunk -> 0.25)");

    println!("dist-3 single       : {}", dist_n(&[toks("a b c d")], 3));
    println!(
        "dist-3 repeated     : {}",
        dist_n(&[toks("a b c d"), toks("a b c d")], 3)
    );

    // equation accuracy is whitespace-insensitive and treats a decode
    // overflow (None) as a mismatch
    println!(
        "canonical equation  : {}",
        canonicalize_equation("x=(num1-num2)")?
    );
    let generated = vec![toks("p1"), toks("p2"), toks("p3")];
    let equations = vec![
        "x = num1 + num2".to_string(),
        "x = num1 - num2".to_string(),
        "x = num1 * num2".to_string(),
    ];
    let fake_parser = |mwp: &[String]| -> Option<String> {
        match mwp[0].as_str() {
            "p1" => Some("x=(num1+num2)".to_string()), // wrong: extra parens
            "p2" => Some("x  =  num1 - num2".to_string()), // right, odd spacing
            _ => None,                                 // overflow
        }
    };
    let acc = acc_eq_with(&generated, &equations, fake_parser)?;
    println!("ACC-eq              : {acc:.4} (only the spacing variant matches)");

    let training = vec!["Tom has num1 apples .".to_string()];
    let outputs = vec![
        "tom HAS num1   apples .".to_string(), // same after normalization
        "Tom ate num1 apples .".to_string(),
    ];
    println!("novelty             : {}", novelty(&outputs, &training));
    Ok(())
}
