//! Central-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor};

/// Loss and analytic gradients (one per parameter tensor) at a point.
pub type LossAndGrads = (f64, Vec<Tensor<f64>>);

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples_per_tensor: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// `|a - c| / (|a| + |c| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compare the analytic gradients reported by `loss_fn` at `params` against
/// central differences on sampled coordinates. `loss_fn` must be
/// deterministic.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<LossAndGrads>,
{
    let (_, analytic) = loss_fn(params)?;
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        let n = work[ti].len();
        let coords: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + cfg.epsilon;
            let (plus, _) = loss_fn(&work)?;
            work[ti].data_mut()[i] = orig - cfg.epsilon;
            let (minus, _) = loss_fn(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, i);
            }
        }
    }
    Ok(report)
}
