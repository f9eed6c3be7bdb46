use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates per parameter tensor (seeded sample).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to round-off do not blow up the ratio.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped a ReLU/|x| branch.
    pub excluded: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` must rebuild the same program on a fresh tape on every call.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let base_sig = tape.kink_signature();
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        Ok((v, tape.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id)[c] = orig + opts.eps;
            let plus = eval(store);
            store.value_mut(id)[c] = orig - opts.eps;
            let minus = eval(store);
            store.value_mut(id)[c] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[id.index()][c];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), c));
            }
        }
    }
    Ok(report)
}
