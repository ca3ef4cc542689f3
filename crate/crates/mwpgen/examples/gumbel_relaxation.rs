//! Discrete sampling with gradients: the Gumbel-max trick, its tempered
//! softmax relaxation, and a free-running relaxed rollout whose soft token
//! rows stay on the autodiff tape.
//!
//!     cargo run --release --example gumbel_relaxation

use mwpgen::corpus::{build_vocab, synth_corpus, StopList};
use mwpgen::discrete::{argmax, gumbel_max_sample, gumbel_noise, relaxed_onehot};
use mwpgen::rng;
use mwpgen::train::{
    rollout_relaxed, threshold_generator_input, Models, Relaxation, StopReason, TrainConfig,
};
use mwpgen::tensor::Tape;

fn main() -> mwpgen::Result<()> {
    let logits = [0.5, 1.0, -0.3, 0.0, 2.0];

    // the relaxation peaks on exactly the index gumbel-max would sample
    let mut stream = rng::substream(0, "gumbel");
    for tau in [2.0, 1.0, 0.25] {
        let noise = gumbel_noise(logits.len(), &mut stream);
        let perturbed: Vec<f64> = logits.iter().zip(&noise).map(|(l, g)| l + g).collect();
        let hard = argmax(&perturbed);
        let soft = relaxed_onehot(&logits, &noise, tau);
        println!(
            "tau {tau:<4} hard {hard}  soft {:?}",
            soft.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
        assert_eq!(argmax(&soft), hard);
    }

    // empirical agreement with the softmax distribution
    let mut counts = [0usize; 5];
    let n = 100_000;
    for _ in 0..n {
        counts[gumbel_max_sample(&logits, &mut stream)] += 1;
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    println!("\nindex  softmax  empirical");
    for (i, &c) in counts.iter().enumerate() {
        println!(
            "{i:>5}  {:.4}   {:.4}",
            logits[i].exp() / z,
            c as f64 / n as f64
        );
    }

    // a relaxed rollout from an untrained generator: every row is a point on
    // the probability simplex and the hard trace is its argmax
    let corpus = synth_corpus(8, 2);
    let vocab = build_vocab(&corpus, 1, &StopList::builtin())?;
    let models = Models::new(vocab, &TrainConfig::default())?;
    let input = threshold_generator_input(&models, &corpus[0])?;

    let mut tape = Tape::new();
    let bound = models.generator.bind(&mut tape, &models.generator_store);
    let mut stream = rng::substream(0, "rollout");
    let rollout = rollout_relaxed(
        &mut tape,
        &bound,
        &input.ids[..input.target_start],
        1.0,
        12,
        Relaxation::GumbelSoftmax,
        &mut stream,
    );
    println!("\nrollout: {} soft rows, stop = {:?}", rollout.rows.len(), rollout.stop);
    let tokens: Vec<&str> = rollout
        .hard_trace
        .iter()
        .map(|&id| models.vocab.token(id))
        .collect();
    println!("hard trace: {tokens:?}");
    for (i, &row) in rollout.rows.iter().enumerate().take(3) {
        let v = tape.value(row);
        let mass: f64 = v.iter().sum();
        println!("row {i}: sum {mass:.12}, max {:.3} at {}", v[argmax(v)], argmax(v));
    }
    assert!(matches!(rollout.stop, StopReason::Eos | StopReason::Cap));
    Ok(())
}
