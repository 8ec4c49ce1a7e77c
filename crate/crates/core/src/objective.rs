//! Contrastive margin loss over per-frame log-densities.
//!
//! total = −Σ_n logc_n + α Σ_a max{0, logc_a − (μ_norm − δ)}

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuNormMode {
    Batch,
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Margin δ below μ_norm that anomalies must respect.
    pub margin: f64,
    /// Weight α of the hinge term.
    pub alpha: f64,
    pub mu_norm_mode: MuNormMode,
    pub ema_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            alpha: 1.0,
            mu_norm_mode: MuNormMode::Batch,
            ema_decay: 0.95,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss.margin must be > 0, got {}", self.margin)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "loss.ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub normal_term: f64,
    pub anomaly_term: f64,
    /// `None` when the hinge was skipped for lack of a reference level.
    pub mu_norm_used: Option<f64>,
    /// One flag per anomalous frame, true where the hinge is active.
    pub hinge_active: Vec<bool>,
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Reference level for the hinge.
///
/// Batch mode returns the mean of `logc_normals`, falling back to
/// `ema_state` when the batch has none. Ema mode blends the batch mean into
/// the running state.
pub fn mu_norm(logc_normals: &[f64], config: &LossConfig, ema_state: Option<f64>) -> Result<f64> {
    check_finite(logc_normals, "normal log-density")?;
    let mean = if logc_normals.is_empty() {
        None
    } else {
        Some(logc_normals.iter().sum::<f64>() / logc_normals.len() as f64)
    };
    match (mean, ema_state) {
        (None, None) => Err(Error::MuNormUnavailable),
        (None, Some(s)) => Ok(s),
        (Some(m), None) => Ok(m),
        (Some(m), Some(s)) => Ok(match config.mu_norm_mode {
            MuNormMode::Batch => m,
            MuNormMode::Ema => ema_update(s, m, config.ema_decay),
        }),
    }
}

/// decay·state + (1 − decay)·value
pub fn ema_update(state: f64, value: f64, decay: f64) -> f64 {
    decay * state + (1.0 - decay) * value
}

/// Loss on plain values; see [`contrastive_loss_on_tape`] for the
/// differentiable form.
pub fn contrastive_loss(
    logc_normals: &[f64],
    logc_anoms: &[f64],
    config: &LossConfig,
    mu_norm: f64,
) -> Result<LossBreakdown> {
    if !mu_norm.is_finite() {
        return Err(Error::NonFinite { what: "mu_norm", index: 0 });
    }
    check_finite(logc_normals, "normal log-density")?;
    check_finite(logc_anoms, "anomaly log-density")?;
    let level = mu_norm - config.margin;
    let normal_term = -logc_normals.iter().sum::<f64>();
    let anomaly_term: f64 = logc_anoms.iter().map(|&a| (a - level).max(0.0)).sum();
    Ok(LossBreakdown {
        total: normal_term + config.alpha * anomaly_term,
        normal_term,
        anomaly_term,
        mu_norm_used: Some(mu_norm),
        hinge_active: logc_anoms.iter().map(|&a| a > level).collect(),
    })
}

/// Differentiable loss for a batch of log-densities `logc` (`[B]`) with
/// per-frame anomaly flags. `mu_norm` is a detached constant; with `None`
/// the hinge term is dropped.
pub fn contrastive_loss_on_tape<'t>(
    tape: &'t Tape,
    logc: Var<'t>,
    anomalous: &[bool],
    config: &LossConfig,
    mu_norm: Option<f64>,
) -> Result<(Var<'t>, LossBreakdown)> {
    if logc.numel() != anomalous.len() {
        return Err(Error::DimensionMismatch {
            what: "loss labels",
            expected: logc.numel(),
            got: anomalous.len(),
        });
    }
    let values = logc.value();
    check_finite(&values, "log-density")?;
    let flat = logc.reshape(vec![values.len()])?;
    let normal_idx: Vec<Option<usize>> = (0..values.len()).filter(|&i| !anomalous[i]).map(Some).collect();
    let anom_idx: Vec<Option<usize>> = (0..values.len()).filter(|&i| anomalous[i]).map(Some).collect();

    let mut total = if normal_idx.is_empty() {
        tape.scalar(0.0)
    } else {
        let n = normal_idx.len();
        flat.gather(normal_idx, vec![n])?.sum()?.neg()?
    };
    let normal_term = total.item();
    let a = anom_idx.len();
    let mut anomaly_term = 0.0;
    let mut hinge_active = vec![false; a];
    if let (Some(mu), true) = (mu_norm, a > 0) {
        if !mu.is_finite() {
            return Err(Error::NonFinite { what: "mu_norm", index: 0 });
        }
        let level = mu - config.margin;
        let hinge = flat.gather(anom_idx, vec![a])?.add_scalar(-level)?.relu()?;
        hinge_active = hinge.value().iter().map(|&h| h > 0.0).collect();
        let h = hinge.sum()?;
        anomaly_term = h.item();
        total = total.add(h.scale(config.alpha)?)?;
    }
    let breakdown = LossBreakdown {
        total: total.item(),
        normal_term,
        anomaly_term,
        mu_norm_used: mu_norm,
        hinge_active,
    };
    Ok((total, breakdown))
}
