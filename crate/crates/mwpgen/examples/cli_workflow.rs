//! The whole command-line surface, driven programmatically: synthesize a
//! corpus, train, generate, score keywords, and evaluate. Each command
//! writes its artifacts plus a RunManifest; the same flows are available
//! from the shell via the `mwpgen` binary.
//!
//!     cargo run --release --example cli_workflow

use mwpgen::cli::{
    cmd_evaluate, cmd_generate, cmd_select_keywords, cmd_synth, cmd_train, EvaluateArgs,
    GenerateArgs, SelectKeywordsArgs, SynthArgs, TrainArgs,
};

fn main() -> mwpgen::Result<()> {
    let dir = std::env::temp_dir().join("mwpgen-cli-example");
    let data = dir.join("corpus.jsonl");
    let run = dir.join("run");

    let summary = cmd_synth(&SynthArgs {
        n: 32,
        seed: 1,
        output: data.clone(),
    })?;
    println!("synth    : {summary}");

    // a small model keeps this example fast; every field is also settable
    // from a TOML file passed as --config
    let sets: Vec<String> = [
        "seed=1",
        "batch_size=8",
        "stage1_epochs=10",
        "stage2_epochs=2",
        "max_rollout_len=16",
        "eval_parser_epochs=3",
        "learning_rate=3e-3",
        "generator.d_model=32",
        "generator.d_ff=64",
        "generator.n_heads=2",
        "consistency_parser.d_model=32",
        "consistency_parser.d_ff=64",
        "consistency_parser.n_heads=2",
        "eval_parser.d_model=32",
        "eval_parser.d_ff=64",
        "eval_parser.n_heads=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let summary = cmd_train(&TrainArgs {
        config: None,
        sets,
        data: data.clone(),
        out_dir: run.clone(),
        min_freq: 1,
    })?;
    println!("train    : {summary}");

    let checkpoint = run.join("model.ckpt");
    let summary = cmd_generate(&GenerateArgs {
        checkpoint: checkpoint.clone(),
        equation: "x = ( num1 + num2 )".to_string(),
        keywords: "marbles, lost".to_string(),
        mode: "greedy".to_string(),
        count: 2,
        max_new: 40,
        seed: 7,
        output: None,
    })?;
    println!("generate : {summary}");

    let summary = cmd_select_keywords(&SelectKeywordsArgs {
        checkpoint: checkpoint.clone(),
        mwp: "ann found num1 shells on the beach and lost num2 of them".to_string(),
    })?;
    println!("keywords : {summary}");

    let summary = cmd_evaluate(&EvaluateArgs {
        checkpoint,
        data,
        train_data: None,
        max_new: 40,
        output: Some(run.join("report.json")),
    })?;
    println!("evaluate : {summary}");
    println!("\nartifacts under {}", dir.display());
    Ok(())
}
