//! The reverse-mode tape underneath everything: build a scalar loss, run
//! backward, verify one coordinate against finite differences, then optimize
//! a tiny least-squares problem with the built-in Adam step.
//!
//!     cargo run --example autodiff_basics

use mwpgen::rng;
use mwpgen::tensor::{Grads, Init, ParamStore, Tape};

fn main() {
    let mut store = ParamStore::new("demo");
    let mut stream = rng::substream(0, "init");
    let w = store.register("w", 3, 2, Init::Normal(0.5), &mut stream);
    let b = store.register("b", 1, 2, Init::Zeros, &mut stream);

    // loss(w, b) = mean((x·w + b − y)²)
    let x_data = vec![1.0, -0.5, 2.0, 0.3, -1.0, 0.8, 0.5, 0.5, 1.5];
    let y_data = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
    let loss_on = |tape: &mut Tape, store: &ParamStore| {
        let x = tape.leaf(3, 3, x_data.clone());
        let y = tape.leaf(3, 2, y_data.clone());
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let pred = tape.matmul(x, w);
        let pred = tape.add(pred, b);
        let err = tape.sub(pred, y);
        let sq = tape.mul(err, err);
        tape.mean(sq)
    };

    // analytic gradient vs a central finite difference on w[0]
    let mut tape = Tape::new();
    let loss = loss_on(&mut tape, &store);
    tape.backward(loss);
    let mut grads = Grads::zeros_like(&store);
    tape.accumulate_grads(&store, &mut grads);
    let analytic = grads.get(w)[0];

    let eps = 1e-6;
    let mut probe = |delta: f64| {
        store.value_mut(w)[0] += delta;
        let mut tape = Tape::new();
        let loss = loss_on(&mut tape, &store);
        let v = tape.scalar(loss);
        store.value_mut(w)[0] -= delta;
        v
    };
    let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
    println!("d loss / d w[0]: analytic {analytic:.10}, numeric {numeric:.10}");
    assert!((analytic - numeric).abs() < 1e-6);

    // a few hundred Adam steps solve the system
    for step in 0..400 {
        let mut tape = Tape::new();
        let loss = loss_on(&mut tape, &store);
        let value = tape.scalar(loss);
        tape.backward(loss);
        let mut grads = Grads::zeros_like(&store);
        tape.accumulate_grads(&store, &mut grads);
        store.adam_step(&mut grads, 0.05, Some(1.0));
        if step % 100 == 0 {
            println!("step {step:>3}: loss {value:.6}");
        }
    }
    let mut tape = Tape::new();
    let loss = loss_on(&mut tape, &store);
    println!("final loss: {:.2e}", tape.scalar(loss));
}
