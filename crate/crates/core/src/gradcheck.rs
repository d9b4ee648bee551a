//! Central finite-difference checks of tape gradients in 64-bit.

use rand::seq::index;
use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;
/// Below this analytic magnitude the absolute tolerance applies.
pub const SMALL_GRAD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub tensors: usize,
    pub worst_relative: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.coordinates > 0
    }
}

pub fn agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < SMALL_GRAD {
        return diff <= ABS_TOL;
    }
    diff / analytic.abs().max(numeric.abs()) <= REL_TOL
}

/// Compare the backward gradient of `loss` with central differences on up
/// to `per_tensor` random coordinates of every trainable parameter (all
/// coordinates when the tensor is smaller).
pub fn check<R: Rng>(
    store: &mut ParamStore<f64>,
    per_tensor: usize,
    rng: &mut R,
    loss: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?;

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = grads.get_or_zeros(store, id);
        let n = analytic.len();
        let picks = index::sample(rng, n, per_tensor.min(n)).into_vec();
        report.tensors += 1;
        for i in picks {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + STEP;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - STEP;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[i];
            report.coordinates += 1;
            if a.abs() >= SMALL_GRAD {
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                report.worst_relative = report.worst_relative.max(rel);
            }
            if !agrees(a, numeric) {
                report.mismatches.push(Mismatch {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_sum_passes_and_a_wrong_gradient_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 0.8), true);
        let report = check(&mut store, 20, &mut rng, |tape, s| {
            let x = tape.param(s, w);
            let y = tape.sigmoid(x);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coordinates, 6);

        assert!(agrees(1.0, 1.00001));
        assert!(!agrees(1.0, 1.001));
        assert!(agrees(1e-8, 5e-8));
        assert!(!agrees(1e-8, 1e-6));
    }
}
