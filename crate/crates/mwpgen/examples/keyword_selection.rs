//! The variational keyword selector: per-item selection probabilities,
//! straight-through sampling, the KL pull toward a sparse prior, and the
//! deterministic 0.5-threshold mode used at inference time.
//!
//!     cargo run --release --example keyword_selection

use mwpgen::corpus::{build_vocab, synth_corpus, StopList};
use mwpgen::rng;
use mwpgen::selector::{keyword_probs, select_keywords, SelectionMode};
use mwpgen::train::{stage1_step, Models, TrainConfig};

fn main() -> mwpgen::Result<()> {
    let corpus = synth_corpus(32, 5);
    let vocab = build_vocab(&corpus, 1, &StopList::builtin())?;
    let config = TrainConfig {
        beta: 0.1,
        prior_rate: 0.05,
        learning_rate: 3e-3,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut models = Models::new(vocab, &config)?;

    let show = |models: &Models, label: &str| {
        let example = &corpus[0];
        let dist = keyword_probs(
            &models.selector_store,
            &models.selector,
            &models.vocab,
            &example.mwp_tokens,
        );
        println!("{label}");
        println!("  mwp: {}", example.mwp_text());
        let mut items: Vec<_> = dist.items.iter().collect();
        items.sort_by(|a, b| b.q.total_cmp(&a.q));
        for item in items.iter().take(6) {
            println!("  q({:<12}) = {:.3}", item.token, item.q);
        }
        let kept = select_keywords(&dist, SelectionMode::Threshold);
        println!("  threshold keywords: {kept:?}");
    };

    show(&models, "before training (q ≈ 0.5 everywhere):");

    // stage 1: reconstruction + beta * KL(q || prior). Sampled keywords give
    // the generator its context; the KL term pushes selection rates down
    // toward the prior so only genuinely informative tokens survive.
    for step in 0..150 {
        let start = (step * config.batch_size) % corpus.len();
        let batch: Vec<_> = (0..config.batch_size)
            .map(|i| &corpus[(start + i) % corpus.len()])
            .collect();
        let mut stream = rng::substream(config.seed, &format!("step.{step}"));
        let losses = stage1_step(&mut models, &batch, &mut stream)?;
        if step % 30 == 0 {
            println!(
                "step {step:>3}: L_LM {:.3}  L_c {:.3}  total {:.3}",
                losses.l_lm, losses.l_c, losses.total
            );
        }
    }

    show(&models, "\nafter training (rates pulled toward 0.05):");
    Ok(())
}
