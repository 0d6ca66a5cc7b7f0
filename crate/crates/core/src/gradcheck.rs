//! Central finite-difference check of parameter gradients.

use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub n_params: usize,
}

/// Compares analytic gradients returned by `loss` against central
/// differences with step `h`. Relative error per coordinate is
/// `|g − ĝ| / max(|g|, |ĝ|, floor)`.
pub fn check_gradients<F>(sets: &[ParamSet], loss: F, h: f64, floor: f64) -> GradCheckReport
where
    F: Fn(&[ParamSet]) -> (f64, Vec<Vec<Tensor>>),
{
    let (_, analytic) = loss(sets);
    let mut work: Vec<ParamSet> = sets.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut n_checked = 0;
    for s in 0..sets.len() {
        for t in 0..sets[s].len() {
            for k in 0..sets[s].get(t).len() {
                let orig = sets[s].get(t).data()[k];
                work[s].get_mut(t).data_mut()[k] = orig + h;
                let up = loss(&work).0;
                work[s].get_mut(t).data_mut()[k] = orig - h;
                let down = loss(&work).0;
                work[s].get_mut(t).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[s][t].data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                max_rel = max_rel.max(rel);
                n_checked += 1;
            }
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        n_checked,
        n_params: sets.iter().map(ParamSet::numel).sum(),
    }
}
