//! The full training schedule on a small synthetic corpus: stage 1 trains
//! generator + keyword selector, stage 2 freezes the selector and adds the
//! equation-consistency loss through relaxed rollouts. Finishes by training
//! the held-out evaluation parser and writing a checkpoint.
//!
//!     cargo run --release --example two_stage_training

use mwpgen::corpus::{build_vocab, synth_corpus, StopList};
use mwpgen::model::DecoderConfig;
use mwpgen::train::{
    load_checkpoint, run_training, save_checkpoint, train_eval_mwp2eq, TrainConfig,
};

fn main() -> mwpgen::Result<()> {
    let corpus = synth_corpus(64, 9);
    let vocab = build_vocab(&corpus, 1, &StopList::builtin())?;
    let small = DecoderConfig {
        vocab_size: 0, // filled from the vocabulary
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq: 96,
    };
    let config = TrainConfig {
        alpha: 1.0,
        beta: 0.1,
        learning_rate: 1e-3,
        batch_size: 8,
        stage1_epochs: 3,
        stage2_epochs: 2,
        max_rollout_len: 24,
        eval_parser_epochs: 4,
        seed: 9,
        generator: small.clone(),
        consistency_parser: small.clone(),
        eval_parser: small,
        ..TrainConfig::default()
    };

    let mut outcome = run_training(&corpus, &vocab, &config, None)?;
    println!("steps run: {}", outcome.steps);
    for line in outcome
        .log
        .iter()
        .step_by((outcome.log.len() / 8).max(1))
    {
        println!(
            "step {:>3} stage {}  L_LM {:.3}  L_eq {:.3}  L_c {:.3}",
            line.step, line.stage, line.l_lm, line.l_eq, line.l_c
        );
    }

    let eval = train_eval_mwp2eq(&mut outcome.models, &corpus)?;
    println!(
        "eval parser: {} epochs, held-out NLL {:.3}",
        eval.epochs_run, eval.best_heldout_nll
    );

    let dir = std::env::temp_dir().join("mwpgen-two-stage-example");
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &outcome.models, outcome.steps)?;
    let (_reloaded, step) = load_checkpoint(&path)?;
    println!("checkpoint round trip at {} (step {step})", path.display());
    Ok(())
}
