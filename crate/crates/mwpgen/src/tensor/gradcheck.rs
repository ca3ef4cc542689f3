//! Central-difference verification of analytic gradients. Used by the unit
//! tests for every primitive and by the `gradcheck` subcommand against the
//! full training objective.

use super::{Grads, ParamId, ParamStore, Tape, TensorRef};
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub eps: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor (all if it has fewer).
    pub max_coords_per_param: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            floor: 1e-6,
            max_coords_per_param: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.loss.is_finite() && self.max_rel_err < threshold
    }
}

/// Checks `eval`'s analytic gradients for `ids` by perturbing one coordinate
/// at a time. `eval` must be deterministic: any sampling it performs has to
/// be frozen across calls, otherwise the difference quotient is meaningless.
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut eval: F,
    settings: &GradCheckSettings,
    rng: &mut Stream,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> (f64, Grads),
{
    let (loss, grads) = eval(store);
    let mut report = GradCheckReport {
        loss,
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    if !loss.is_finite() {
        report.max_rel_err = f64::INFINITY;
        return report;
    }
    for &id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= settings.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng::shuffle(rng, &mut all);
            all.truncate(settings.max_coords_per_param);
            all
        };
        for coord in coords {
            let orig = store.value(id)[coord];
            store.value_mut(id)[coord] = orig + settings.eps;
            let (lp, _) = eval(store);
            store.value_mut(id)[coord] = orig - settings.eps;
            let (lm, _) = eval(store);
            store.value_mut(id)[coord] = orig;
            let numeric = (lp - lm) / (2.0 * settings.eps);
            let analytic = grads.get(id)[coord];
            let denom = analytic.abs().max(numeric.abs()).max(settings.floor);
            let rel_err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some(CoordCheck {
                    param: store.param_name(id).to_string(),
                    coord,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    report
}

/// Convenience wrapper: the closure builds a scalar loss from param leaves
/// bound in the order of `ids`; backward and harvesting are handled here.
pub fn check_scalar_fn<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut build: F,
    settings: &GradCheckSettings,
    rng: &mut Stream,
) -> GradCheckReport
where
    F: FnMut(&mut Tape, &[TensorRef]) -> TensorRef,
{
    let ids_owned = ids.to_vec();
    check_params(
        store,
        ids,
        move |s| {
            let mut tape = Tape::new();
            let leaves: Vec<TensorRef> = ids_owned.iter().map(|&id| tape.param(s, id)).collect();
            let loss = build(&mut tape, &leaves);
            tape.backward(loss);
            let mut grads = Grads::zeros_like(s);
            tape.accumulate_grads(s, &mut grads);
            (tape.scalar(loss), grads)
        },
        settings,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn detects_a_wrong_gradient() {
        // Report an intentionally scaled gradient; the checker must flag it.
        let mut r = rng::substream(3, "gc");
        let mut store = ParamStore::new("gc");
        let id = store.register("w", 1, 4, Init::Normal(1.0), &mut r);
        let report = check_params(
            &mut store,
            &[id],
            |s| {
                let mut tape = Tape::new();
                let w = tape.param(s, id);
                let sq = tape.mul(w, w);
                let loss = tape.sum(sq);
                tape.backward(loss);
                let mut grads = Grads::zeros_like(s);
                tape.accumulate_grads(s, &mut grads);
                grads.scale(0.5); // corrupt on purpose
                (tape.scalar(loss), grads)
            },
            &GradCheckSettings::default(),
            &mut r,
        );
        assert!(report.max_rel_err > 0.4, "err {}", report.max_rel_err);
        assert!(!report.passes(1e-4));
        let worst = report.worst.unwrap();
        assert_eq!(worst.param, "w");
    }

    #[test]
    fn samples_at_most_the_requested_coords() {
        let mut r = rng::substream(4, "gc2");
        let mut store = ParamStore::new("gc2");
        let id = store.register("big", 10, 10, Init::Normal(1.0), &mut r);
        let settings = GradCheckSettings {
            max_coords_per_param: 7,
            ..GradCheckSettings::default()
        };
        let report = check_scalar_fn(
            &mut store,
            &[id],
            |t, leaves| t.sum(leaves[0]),
            &settings,
            &mut r,
        );
        assert_eq!(report.checked, 7);
        assert!(report.passes(1e-4));
    }
}
