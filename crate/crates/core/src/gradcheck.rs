//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only re-evaluates the forward closure on perturbed
//! inputs; it never touches [`Tape::backward`](crate::autodiff::Tape::backward).

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared absolutely.
/// Central-difference round-off on an O(1) loss with the default step is
/// around 1e-10, so the floor keeps that noise well below the tolerance.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Result of one gradient comparison over a set of coordinates.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Which coordinates of each input get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// Up to this many randomly chosen coordinates per input.
    Sample(usize),
}

/// Compares analytic gradients with central differences.
///
/// `f` maps the full input list to a scalar loss; `analytic[i]` is the
/// claimed gradient for `inputs[i]`.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor],
    analytic: &[Tensor],
    coverage: Coverage,
    step: f64,
    rng: &mut impl Rng,
    mut f: F,
) -> Result<GradCheck>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        let n = work[ti].len();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample(m) if m >= n => (0..n).collect(),
            Coverage::Sample(m) => {
                let mut idx = sample(rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for j in coords {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + step;
            let plus = f(&work)?;
            work[ti].data_mut()[j] = orig - step;
            let minus = f(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(grad.data()[j], numeric);
            checked += 1;
            if worst.is_none() || rel > max_rel {
                max_rel = rel;
                worst = Some((ti, j));
            }
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        checked,
        max_rel_error: max_rel,
        worst_index: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn detects_wrong_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let good = Tensor::new(vec![2], vec![2.0, -4.0]).unwrap();
        let bad = Tensor::new(vec![2], vec![2.0, -4.1]).unwrap();
        let f = |v: &[Tensor]| Ok(v[0].data().iter().map(|a| a * a).sum());
        let ok = check(
            "sq",
            std::slice::from_ref(&x),
            &[good],
            Coverage::All,
            DEFAULT_STEP,
            &mut rng,
            f,
        )
        .unwrap();
        assert!(ok.passes(DEFAULT_TOLERANCE));
        let err = check("sq", &[x], &[bad], Coverage::All, DEFAULT_STEP, &mut rng, f).unwrap();
        assert!(!err.passes(DEFAULT_TOLERANCE));
        assert_eq!(err.worst_index, Some((0, 1)));
    }
}
