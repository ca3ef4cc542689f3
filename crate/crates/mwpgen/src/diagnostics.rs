//! Built-in gradient verification.
//!
//! Every differentiable primitive, plus the composed training losses
//! (teacher-forced NLL, the selection-rate KL, and the full stage-2
//! objective with a relaxed rollout), is checked against central finite
//! differences on small fixed inputs. The suite is deterministic for a given
//! seed, so it doubles as a regression gate: `gradient_suite(0)` must pass
//! at [`SUITE_TOLERANCE`] on every build.

use crate::corpus::{build_vocab, synth_corpus, StopList, Vocab};
use crate::model::DecoderConfig;
use crate::rng::{self, Stream};
use crate::selector::{context_loss_on_tape, keyword_probs_on_tape};
use crate::tensor::gradcheck::{check_params, GradCheckReport, GradCheckSettings};
use crate::tensor::{Grads, Init, ParamStore, Tape, TensorRef};
use crate::train::{
    rollout_relaxed, threshold_generator_input, Models, Relaxation, TrainConfig,
};
use crate::model::teacher_forced_nll;

pub const SUITE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(SUITE_TOLERANCE)
    }
}

/// Deterministic values in `[lo, hi)` for one parameter tensor.
fn fill(store: &mut ParamStore, id: crate::tensor::ParamId, lo: f64, hi: f64, rng: &mut Stream) {
    for v in store.value_mut(id) {
        *v = lo + (hi - lo) * rng::uniform(rng);
    }
}

fn op_settings() -> GradCheckSettings {
    GradCheckSettings {
        eps: 1e-4,
        floor: 1e-6,
        max_coords_per_param: 6,
    }
}

// One primitive check: `build` turns the bound parameter nodes into a
// scalar; parameters are filled with values in (lo, hi).
fn check_op(
    name: &'static str,
    shapes: &[(usize, usize)],
    range: (f64, f64),
    seed: u64,
    build: impl Fn(&mut Tape, &[TensorRef]) -> TensorRef,
) -> SuiteEntry {
    let mut store = ParamStore::new("op");
    let mut init_rng = rng::substream(seed, name);
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let id = store.register(&format!("p{i}"), r, c, Init::Zeros, &mut init_rng);
            fill(&mut store, id, range.0, range.1, &mut init_rng);
            id
        })
        .collect();

    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let nodes: Vec<TensorRef> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let loss = build(&mut tape, &nodes);
        tape.backward(loss);
        let mut grads = Grads::zeros_like(store);
        tape.accumulate_grads(store, &mut grads);
        (tape.scalar(loss), grads)
    };
    let mut coord_rng = rng::substream(seed, &format!("{name}.coords"));
    let report = check_params(&mut store, &ids, eval, &op_settings(), &mut coord_rng);
    SuiteEntry { name, report }
}

// Reduces a matrix node to a scalar through fixed pseudo-random weights, so
// every output coordinate influences the loss with a distinct coefficient.
fn weighted_sum(tape: &mut Tape, node: TensorRef) -> TensorRef {
    let (r, c) = tape.shape(node);
    let w: Vec<f64> = (0..r * c).map(|i| ((i * 37 + 11) % 19) as f64 / 19.0 - 0.4).collect();
    let w = tape.leaf(r, c, w);
    let prod = tape.mul(node, w);
    tape.sum(prod)
}

fn primitive_entries(seed: u64) -> Vec<SuiteEntry> {
    let mut out = Vec::new();
    out.push(check_op("add", &[(3, 4), (3, 4)], (-1.0, 1.0), seed, |t, p| {
        let s = t.add(p[0], p[1]);
        weighted_sum(t, s)
    }));
    out.push(check_op("sub", &[(3, 4), (3, 4)], (-1.0, 1.0), seed, |t, p| {
        let s = t.sub(p[0], p[1]);
        weighted_sum(t, s)
    }));
    out.push(check_op("mul", &[(3, 4), (3, 4)], (-1.0, 1.0), seed, |t, p| {
        let s = t.mul(p[0], p[1]);
        weighted_sum(t, s)
    }));
    out.push(check_op(
        "mul_broadcast",
        &[(3, 4), (1, 4), (1, 1)],
        (-1.0, 1.0),
        seed,
        |t, p| {
            let row = t.mul(p[0], p[1]);
            let scaled = t.mul(row, p[2]);
            weighted_sum(t, scaled)
        },
    ));
    out.push(check_op("matmul", &[(3, 4), (4, 2)], (-1.0, 1.0), seed, |t, p| {
        let s = t.matmul(p[0], p[1]);
        weighted_sum(t, s)
    }));
    out.push(check_op("transpose", &[(3, 4)], (-1.0, 1.0), seed, |t, p| {
        let s = t.transpose(p[0]);
        weighted_sum(t, s)
    }));
    out.push(check_op(
        "concat_rows_row_slice",
        &[(2, 3), (3, 3)],
        (-1.0, 1.0),
        seed,
        |t, p| {
            let cat = t.concat_rows(&[p[0], p[1]]);
            let slice = t.row_slice(cat, 1, 3);
            weighted_sum(t, slice)
        },
    ));
    // repeated indices exercise gradient accumulation into one row
    out.push(check_op("gather", &[(4, 3)], (-1.0, 1.0), seed, |t, p| {
        let g = t.gather(p[0], &[2, 0, 2, 3]);
        weighted_sum(t, g)
    }));
    out.push(check_op("softmax_rows", &[(3, 5)], (-2.0, 2.0), seed, |t, p| {
        let s = t.softmax_rows(p[0]);
        weighted_sum(t, s)
    }));
    out.push(check_op("sigmoid", &[(3, 4)], (-2.0, 2.0), seed, |t, p| {
        let s = t.sigmoid(p[0]);
        weighted_sum(t, s)
    }));
    out.push(check_op("log", &[(3, 4)], (0.3, 2.0), seed, |t, p| {
        let s = t.log(p[0]);
        weighted_sum(t, s)
    }));
    out.push(check_op("layer_norm", &[(3, 6)], (-1.0, 1.0), seed, |t, p| {
        let s = t.layer_norm(p[0]);
        weighted_sum(t, s)
    }));
    out.push(check_op("cross_entropy", &[(4, 7)], (-2.0, 2.0), seed, |t, p| {
        // position 1 carries the ignore index and must contribute nothing
        t.cross_entropy(p[0], &[2, 0, 6, 1], Some(0))
    }));
    out.push(check_op("scalar_mul", &[(3, 4)], (-1.0, 1.0), seed, |t, p| {
        let s = t.scalar_mul(p[0], -2.5);
        weighted_sum(t, s)
    }));
    out.push(check_op("sum_mean", &[(3, 4), (3, 4)], (-1.0, 1.0), seed, |t, p| {
        let s = t.sum(p[0]);
        let m = t.mean(p[1]);
        t.add(s, m)
    }));
    // straight-through estimator: its backward is the identity to the soft
    // probabilities, so the analytic grads of the hard loss must equal the
    // finite differences of the soft surrogate
    out.push(check_op("straight_through", &[(5, 1)], (-2.0, 2.0), seed, |t, p| {
        let probs = t.sigmoid(p[0]);
        let samples = [1.0, 0.0, 0.0, 1.0, 1.0];
        let hard = t.straight_through(probs, &samples);
        let w: Vec<f64> = (0..5).map(|i| 0.3 + 0.2 * i as f64).collect();
        let w = t.leaf(5, 1, w);
        let hard_w = t.mul(hard, w);
        let _hard_loss = t.sum(hard_w);
        // the finite-differenced value: same weights on the soft path
        let soft_w = t.mul(probs, w);
        t.sum(soft_w)
    }));
    out
}

fn tiny_decoder(vocab_size: usize) -> DecoderConfig {
    DecoderConfig {
        vocab_size,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 96,
    }
}

fn composed_models(seed: u64) -> (Models, Vec<crate::corpus::MaskedExample>) {
    let corpus = synth_corpus(6, seed);
    let vocab = build_vocab(&corpus, 1, &StopList::builtin()).unwrap();
    let tiny = tiny_decoder(0);
    let config = TrainConfig {
        seed,
        batch_size: 2,
        max_rollout_len: 4,
        generator: tiny.clone(),
        consistency_parser: tiny.clone(),
        eval_parser: tiny,
        ..TrainConfig::default()
    };
    let models = Models::new(vocab, &config).expect("tiny models");
    (models, corpus)
}

fn composed_settings() -> GradCheckSettings {
    GradCheckSettings {
        eps: 1e-4,
        floor: 1e-6,
        max_coords_per_param: 3,
    }
}

fn check_store(
    name: &'static str,
    store: &mut ParamStore,
    eval: impl FnMut(&ParamStore) -> (f64, Grads),
    seed: u64,
) -> SuiteEntry {
    let ids: Vec<_> = store.ids().collect();
    let mut coord_rng = rng::substream(seed, &format!("{name}.coords"));
    let report = check_params(store, &ids, eval, &composed_settings(), &mut coord_rng);
    SuiteEntry { name, report }
}

// Mean teacher-forced NLL of two examples with fixed threshold keywords.
fn entry_loss_lm(seed: u64) -> SuiteEntry {
    let (mut models, corpus) = composed_models(seed);
    let inputs: Vec<_> = corpus
        .iter()
        .take(2)
        .map(|ex| threshold_generator_input(&models, ex).unwrap())
        .collect();
    let decoder = models.generator.clone();
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let bound = decoder.bind(&mut tape, store);
        let mut acc = None;
        for input in &inputs {
            let (l, _) = teacher_forced_nll(&mut tape, &bound, input);
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l),
            });
        }
        let total = acc.unwrap();
        let loss = tape.scalar_mul(total, 0.5);
        tape.backward(loss);
        let mut grads = Grads::zeros_like(store);
        tape.accumulate_grads(store, &mut grads);
        (tape.scalar(loss), grads)
    };
    check_store("loss_lm", &mut models.generator_store, eval, seed)
}

// Selection-rate KL summed over one example's eligible items, w.r.t. the
// selection head only: the token features are constants by contract (the
// embedding snapshot is frozen), so FD over `embed` would disagree on purpose.
fn entry_loss_context(seed: u64) -> SuiteEntry {
    let (mut models, corpus) = composed_models(seed);
    let selector = models.selector.clone();
    let vocab = models.vocab.clone();
    let tokens = corpus[0].mwp_tokens.clone();
    let rho = models.config.prior_rate;
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let dist = keyword_probs_on_tape(&mut tape, store, &selector, &vocab, &tokens)
            .expect("synth examples have eligible keywords");
        let loss = context_loss_on_tape(&mut tape, dist.q, rho);
        tape.backward(loss);
        let mut grads = Grads::zeros_like(store);
        tape.accumulate_grads(store, &mut grads);
        (tape.scalar(loss), grads)
    };
    let store = &mut models.selector_store;
    let ids = [
        store.id_by_name("w").unwrap(),
        store.id_by_name("b").unwrap(),
    ];
    let mut coord_rng = rng::substream(seed, "loss_context_kl.coords");
    let settings = GradCheckSettings {
        max_coords_per_param: 16,
        ..composed_settings()
    };
    let report = check_params(store, &ids, eval, &settings, &mut coord_rng);
    SuiteEntry {
        name: "loss_context_kl",
        report,
    }
}

// The full stage-2 scalar `l_lm + alpha*l_eq` with a cap-4 rollout, checked
// against the generator's parameters (frozen Gumbel noise keeps the map
// differentiable around the base point) and then the parser's.
fn stage2_entries(seed: u64) -> Vec<SuiteEntry> {
    let (mut models, corpus) = composed_models(seed);
    let inputs: Vec<_> = corpus
        .iter()
        .take(2)
        .map(|ex| threshold_generator_input(&models, ex).unwrap())
        .collect();
    let equations: Vec<Vec<String>> = corpus
        .iter()
        .take(2)
        .map(|ex| ex.equation_symbols.clone())
        .collect();
    let alpha = models.config.alpha;
    let generator = models.generator.clone();
    let parser = models.consistency.clone();
    let vocab = models.vocab.clone();

    let objective = |tape: &mut Tape,
                     gen_store: &ParamStore,
                     parser_store: &ParamStore|
     -> TensorRef {
        let gen_bound = generator.bind(tape, gen_store);
        let parser_bound = parser.bind(tape, parser_store);
        let mut lm_acc = None;
        let mut eq_acc = None;
        for (input, equation) in inputs.iter().zip(&equations) {
            let (l_lm, _) = teacher_forced_nll(tape, &gen_bound, input);
            lm_acc = Some(match lm_acc {
                None => l_lm,
                Some(a) => tape.add(a, l_lm),
            });
            let mut noise_rng = rng::substream(seed, &format!("fd.noise.{}", input.target_start));
            let rollout = rollout_relaxed(
                tape,
                &gen_bound,
                &input.ids[..input.target_start],
                1.0,
                4,
                Relaxation::GumbelSoftmax,
                &mut noise_rng,
            );
            let soft = tape.concat_rows(&rollout.rows);
            let soft_emb = parser_bound.embed_soft(tape, soft);
            let bos = parser_bound.embed_tokens(tape, &[Vocab::BOS]);
            let mut suffix_ids = vec![Vocab::SEP];
            suffix_ids.extend(vocab.encode(equation));
            let suffix = parser_bound.embed_tokens(tape, &suffix_ids);
            let x = tape.concat_rows(&[bos, soft_emb, suffix]);
            let mut targets = vec![Vocab::PAD; rollout.rows.len() + 1];
            targets.extend(vocab.encode(equation));
            targets.push(Vocab::EOS);
            let hidden = parser_bound.forward_full(tape, x);
            let logits = parser_bound.logits(tape, hidden);
            let l_eq = tape.cross_entropy(logits, &targets, Some(Vocab::PAD));
            eq_acc = Some(match eq_acc {
                None => l_eq,
                Some(a) => tape.add(a, l_eq),
            });
        }
        let l_lm = tape.scalar_mul(lm_acc.unwrap(), 0.5);
        let l_eq = tape.scalar_mul(eq_acc.unwrap(), 0.5);
        let scaled = tape.scalar_mul(l_eq, alpha);
        tape.add(l_lm, scaled)
    };

    let parser_store = std::mem::replace(&mut models.consistency_store, ParamStore::new("x"));
    let gen_entry = {
        let eval = |store: &ParamStore| {
            let mut tape = Tape::new();
            let total = objective(&mut tape, store, &parser_store);
            tape.backward(total);
            let mut grads = Grads::zeros_like(store);
            tape.accumulate_grads(store, &mut grads);
            (tape.scalar(total), grads)
        };
        check_store("stage2_total_generator", &mut models.generator_store, eval, seed)
    };
    let gen_store = models.generator_store;
    let mut parser_store = parser_store;
    let parser_entry = {
        let eval = |store: &ParamStore| {
            let mut tape = Tape::new();
            let total = objective(&mut tape, &gen_store, store);
            tape.backward(total);
            let mut grads = Grads::zeros_like(store);
            tape.accumulate_grads(store, &mut grads);
            (tape.scalar(total), grads)
        };
        check_store("stage2_total_consistency", &mut parser_store, eval, seed)
    };
    vec![gen_entry, parser_entry]
}

/// Runs the whole suite. Entries report their own pass/fail against
/// [`SUITE_TOLERANCE`]; callers decide whether any failure is fatal.
pub fn gradient_suite(seed: u64) -> Vec<SuiteEntry> {
    let mut entries = primitive_entries(seed);
    entries.push(entry_loss_lm(seed));
    entries.push(entry_loss_context(seed));
    entries.extend(stage2_entries(seed));
    entries
}
