//! Threshold selection, classification metrics, detection delay, the
//! mutual-information diagnostic and report files.

mod metrics;
pub(crate) mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::dependency::{unpack_cholesky, Base, DependencyModel, Family};
use crate::error::{Error, Result};
use crate::special;

pub use metrics::{
    auc_roc, average_detection_delay, classification_metrics, f1_from_counts, select_threshold, Classification,
    Confusion, DetectionDelay,
};
pub use report::{emit_report, plot_history, read_report, write_score_dump, EpochRecord, MetricsReport, ReportFiles};

/// Smallest sample count accepted by [`estimate_mi`].
pub const MIN_MI_SAMPLES: usize = 1000;

/// Monte Carlo estimate of E_c[log c(U)] with U drawn from the fitted
/// copula. Returns the estimate and its standard error.
pub fn estimate_mi(model: &DependencyModel, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if model.family != Family::Copula {
        return Err(Error::UnsupportedFamily);
    }
    if n_samples < MIN_MI_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "estimate_mi needs at least {MIN_MI_SAMPLES} samples, got {n_samples}"
        )));
    }
    let d = model.dim;
    let l = unpack_cholesky(&model.phi, d)?;
    let nu = match model.base {
        Base::StudentT => Some(model.nu().ok_or(Error::InvalidConfig("Student-t model without nu".into()))?),
        Base::Gaussian => None,
    };
    let chi = nu
        .map(ChiSquared::new)
        .transpose()
        .map_err(|e| Error::InvalidConfig(format!("degrees of freedom: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let chunk = 8192;
    let mut done = 0;
    let mut g = vec![0.0; d];
    while done < n_samples {
        let k = chunk.min(n_samples - done);
        let mut u = Vec::with_capacity(k * d);
        for _ in 0..k {
            for gi in g.iter_mut() {
                *gi = rng.sample(StandardNormal);
            }
            let mix = match (&chi, nu) {
                (Some(chi), Some(nu)) => (chi.sample(&mut rng) / nu).sqrt(),
                _ => 1.0,
            };
            for i in 0..d {
                let v: f64 = (0..=i).map(|j| l[i * d + j] * g[j]).sum::<f64>() / mix;
                u.push(match nu {
                    Some(nu) => special::t_cdf(v, nu),
                    None => special::norm_cdf(v),
                });
            }
        }
        for lc in model.copula_logdensity_batch(&u)? {
            sum += lc;
            sum_sq += lc * lc;
        }
        done += k;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}
