use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frames::{make_frames_named, FrameSet, InputScaler};
use super::optim::{clip_global_norm, Adam, AdamConfig};
use crate::dependency::{DependencyConfig, DependencyModel};
use crate::special::LN_2PI;
use crate::diffcore::{Tape, Var};
use crate::encoder::{encode, encode_on_tape, init_encoder, marginal_baseline_score, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::evaluation::{
    auc_roc, average_detection_delay, classification_metrics, select_threshold, Classification,
    DetectionDelay, EpochRecord,
};
use crate::objective::{contrastive_loss_on_tape, mu_norm, LossBreakdown, LossConfig};
use crate::synthdata::{local_perturbation, LabeledSeries, LocalPerturbation};

const STREAM_DROPOUT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_INJECT: u64 = 3;
const STREAM_PROBE: u64 = 4;
const STREAM_POOL: u64 = 5;

/// Frames encoded per tape during evaluation.
const EVAL_CHUNK: usize = 256;
/// Injected frames tracked for the anomaly curve when training data has none.
const PROBE_FRAMES: usize = 256;

/// What turns a latent into a log-density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// The configured joint density (copula or multivariate).
    Dependency,
    /// Diagonal Gaussian over standardized latents; the baseline.
    Marginal,
}

/// Where the training loss takes its latent standardization from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// The (μ, σ) refitted at the start of each epoch.
    Epoch,
    /// Mean and standard deviation of the normal frames in each batch,
    /// differentiated through; falls back to the epoch values when a batch
    /// has fewer than two normal frames.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "window_size")]
    pub window: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub val_fraction: f64,
    /// Probability that a normal training frame is replaced by a perturbed
    /// one, used only when the training split has no labeled anomalies.
    pub injection_rate: f64,
    /// Share of anomaly spans reserved as the perturbation pool.
    pub pool_fraction: f64,
    pub scorer: Scorer,
    pub standardization: Standardization,
    pub seed: u64,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub dependency: DependencyConfig,
    pub perturbation: LocalPerturbation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 20,
            stride: 10,
            batch_size: 64,
            epochs: 30,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            grad_clip: 5.0,
            val_fraction: 0.2,
            injection_rate: 0.25,
            pool_fraction: 0.125,
            scorer: Scorer::Dependency,
            standardization: Standardization::Batch,
            seed: 0,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            dependency: DependencyConfig::default(),
            perturbation: LocalPerturbation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.window < 2 {
            return bad(format!("window must be at least 2, got {}", self.window));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.injection_rate) || !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return bad("injection_rate must lie in [0, 1] and pool_fraction in (0, 1]".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        self.loss.validate()?;
        self.encoder.validate()?;
        self.dependency.validate()
    }
}

/// Trained (or freshly initialized) model with everything needed to score.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoder: EncoderParams,
    pub dependency: DependencyModel,
    pub scaler: InputScaler,
    pub epoch: usize,
    pub threshold: Option<f64>,
}

/// Stride-1 window scores over one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredWindows {
    pub window: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Per-timestamp labels of the scored series.
    pub row_labels: Vec<u8>,
}

impl ScoredWindows {
    pub fn t_end(&self, i: usize) -> usize {
        i + self.window - 1
    }
}

impl Checkpoint {
    pub fn init(config: &TrainConfig, scaler: InputScaler) -> Result<Self> {
        config.validate()?;
        if scaler.mean.len() != config.encoder.input_dim {
            return Err(Error::DimensionMismatch {
                what: "input feature count",
                expected: config.encoder.input_dim,
                got: scaler.mean.len(),
            });
        }
        Ok(Self {
            encoder: init_encoder(&config.encoder, config.seed)?,
            dependency: DependencyModel::new(&config.dependency, config.encoder.latent_dim)?,
            config: config.clone(),
            scaler,
            epoch: 0,
            threshold: None,
        })
    }

    /// Eval-mode latents `[n, latent_dim]` of every frame, encoded in
    /// parallel chunks and concatenated in frame order.
    pub fn latents(&self, frames: &FrameSet) -> Result<Vec<f64>> {
        self.latents_of(frames, &(0..frames.len()).collect::<Vec<_>>())
    }

    pub fn latents_of(&self, frames: &FrameSet, idx: &[usize]) -> Result<Vec<f64>> {
        if frames.dim != self.config.encoder.input_dim {
            return Err(Error::DimensionMismatch {
                what: "frame feature count",
                expected: self.config.encoder.input_dim,
                got: frames.dim,
            });
        }
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let parts: Vec<Result<Vec<f64>>> = idx
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| encode(&frames.gather(chunk), chunk.len(), &self.encoder, &self.config.encoder))
            .collect();
        let mut out = Vec::with_capacity(idx.len() * self.config.encoder.latent_dim);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Log-density per latent row under the configured scorer.
    pub fn score_latents(&self, latents: &[f64]) -> Result<Vec<f64>> {
        match self.config.scorer {
            Scorer::Dependency => self.dependency.score_batch(latents),
            Scorer::Marginal => latents
                .chunks(self.dependency.dim)
                .map(|z| marginal_baseline_score(z, &self.dependency.mu, &self.dependency.sigma))
                .collect(),
        }
    }

    /// Scores of already-normalized frames; higher is more normal.
    pub fn score_frames(&self, frames: &FrameSet) -> Result<Vec<f64>> {
        self.score_latents(&self.latents(frames)?)
    }

    /// Normalizes a raw series and scores every stride-1 window.
    pub fn score_series(&self, series: &LabeledSeries) -> Result<ScoredWindows> {
        let frames = make_frames_named(&self.scaler.apply(series)?, self.config.window, 1, "score")?;
        Ok(ScoredWindows {
            window: frames.window,
            scores: self.score_frames(&frames)?,
            row_labels: frames.row_labels().to_vec(),
            labels: frames.labels,
        })
    }

    /// Refits (μ, σ) and the empirical reference on normal-frame latents.
    fn refit_marginals(&mut self, frames: &FrameSet, normal_idx: &[usize]) -> Result<Vec<f64>> {
        let z = self.latents_of(frames, normal_idx)?;
        self.dependency.fit_marginals(&z)?;
        Ok(z)
    }

    fn learns_dependency(&self) -> bool {
        self.config.scorer == Scorer::Dependency
    }

    fn block_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.encoder.tensors.iter().map(|t| t.numel()).collect();
        if self.learns_dependency() {
            sizes.push(self.dependency.phi.len());
            if self.dependency.learn_nu {
                sizes.push(1);
            }
        }
        sizes
    }
}

/// Mutable optimizer-side state carried across batches.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: Adam,
    pub ema: Option<f64>,
    pub dropout_rng: ChaCha8Rng,
    pub skipped_hinges: usize,
}

impl TrainState {
    pub fn new(ckpt: &Checkpoint) -> Self {
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed);
        dropout_rng.set_stream(STREAM_DROPOUT);
        Self {
            adam: Adam::new(ckpt.config.learning_rate, ckpt.config.adam.clone(), &ckpt.block_sizes()),
            ema: None,
            dropout_rng,
            skipped_hinges: 0,
        }
    }
}

/// One optimizer step on `batch` (`[B, L, D]`, already normalized) with
/// per-frame labels. The loss is averaged over the batch before
/// differentiation; the returned breakdown holds batch sums.
pub fn train_batch(ckpt: &mut Checkpoint, state: &mut TrainState, batch: &[f64], labels: &[u8]) -> Result<LossBreakdown> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let cfg = &ckpt.config;
    let (l, d) = (cfg.window, cfg.encoder.input_dim);
    if batch.len() != b * l * d {
        return Err(Error::DimensionMismatch {
            what: "batch length",
            expected: b * l * d,
            got: batch.len(),
        });
    }
    let tape = Tape::new();
    let enc = ckpt.encoder.on_tape(&tape);
    let input = tape.constant(vec![b, l, d], batch.to_vec())?;
    let z = encode_on_tape(&tape, &enc, &cfg.encoder, input, Mode::Train(&mut state.dropout_rng))?;
    let dep = if ckpt.learns_dependency() {
        Some(ckpt.dependency.on_tape(&tape, true)?)
    } else {
        None
    };
    let anomalous: Vec<bool> = labels.iter().map(|&y| y != 0).collect();
    let normal_rows: Vec<usize> = (0..b).filter(|&i| !anomalous[i]).collect();
    let (mu, sigma) = if cfg.standardization == Standardization::Batch && normal_rows.len() >= 2 {
        batch_moments(z, &normal_rows)?
    } else {
        let dim = ckpt.dependency.dim;
        (
            tape.constant(vec![dim], ckpt.dependency.mu.clone())?,
            tape.constant(vec![dim], ckpt.dependency.sigma.clone())?,
        )
    };
    let logc = match &dep {
        Some(vars) => ckpt.dependency.score_on_tape_with(&tape, vars, z, mu, sigma)?,
        None => marginal_score_with(z, mu, sigma)?,
    };
    let values = logc.value();
    let normals: Vec<f64> = values.iter().zip(&anomalous).filter(|(_, &a)| !a).map(|(&v, _)| v).collect();
    let mu = match mu_norm(&normals, &cfg.loss, state.ema) {
        Ok(m) => {
            state.ema = Some(m);
            Some(m)
        }
        Err(Error::MuNormUnavailable) => {
            if anomalous.iter().any(|&a| a) {
                log::warn!("no normal reference level yet; hinge term skipped for this batch");
                state.skipped_hinges += 1;
            }
            None
        }
        Err(e) => return Err(e),
    };
    let (loss, breakdown) = contrastive_loss_on_tape(&tape, logc, &anomalous, &cfg.loss, mu)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { what: "loss", index: 0 });
    }
    tape.backward(loss.scale(1.0 / b as f64)?)?;

    let mut grads: Vec<Vec<f64>> = enc
        .iter()
        .zip(&ckpt.encoder.tensors)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    if let Some(vars) = &dep {
        grads.push(tape.grad(vars.phi).unwrap_or_else(|| vec![0.0; ckpt.dependency.phi.len()]));
        if ckpt.dependency.learn_nu {
            let g = vars.nu_raw.and_then(|v| tape.grad(v)).unwrap_or_else(|| vec![0.0]);
            grads.push(g);
        }
    }
    if let Some(i) = grads.iter().flatten().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "gradient", index: i });
    }
    clip_global_norm(&mut grads, cfg.grad_clip);

    let learns_dep = ckpt.learns_dependency();
    let mut blocks: Vec<&mut [f64]> = ckpt.encoder.tensors.iter_mut().map(|t| t.data_mut()).collect();
    let mut nu_slot = ckpt.dependency.nu_raw.unwrap_or(0.0);
    if learns_dep {
        blocks.push(ckpt.dependency.phi.as_mut_slice());
        if ckpt.dependency.learn_nu {
            blocks.push(std::slice::from_mut(&mut nu_slot));
        }
    }
    state.adam.update(&mut blocks, &grads);
    if learns_dep && ckpt.dependency.learn_nu {
        ckpt.dependency.nu_raw = Some(nu_slot);
    }
    Ok(breakdown)
}

/// Mean and population standard deviation over `rows` of `z` (`[B, d]`).
fn batch_moments<'t>(z: Var<'t>, rows: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
    let zn = z.select_rows(rows)?;
    let mu = zn.mean_axis(0)?;
    let var = zn.sub(mu)?.square()?.mean_axis(0)?;
    Ok((mu, var.log()?.scale(0.5)?.exp()?))
}

/// Diagonal Gaussian log-density per row with tape-valued (μ, σ).
fn marginal_score_with<'t>(z: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    if let Some(index) = sigma.value().iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroScale { index });
    }
    let d = sigma.numel() as f64;
    let norm = sigma.log()?.sum()?.add_scalar(0.5 * d * LN_2PI)?;
    Ok(z.sub(mu)?.div(sigma)?.square()?.sum_axis(1)?.scale(-0.5)?.sub(norm)?)
}

/// Metrics of stride-1 window scores at the F1-optimal threshold.
/// `row_labels` are the per-timestamp labels the windows were cut from.
pub fn window_metrics(
    scores: &[f64],
    labels: &[u8],
    row_labels: &[u8],
    window: usize,
) -> Result<(f64, Classification, DetectionDelay)> {
    let (tau, _) = select_threshold(scores, labels)?;
    let c = classification_metrics(scores, labels, tau)?;
    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s < tau)).collect();
    let delay = average_detection_delay(&preds, row_labels, window)?;
    Ok((tau, c, delay))
}

fn has_both_classes(labels: &[u8]) -> bool {
    let pos = labels.iter().filter(|&&y| y != 0).count();
    pos > 0 && pos < labels.len()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Diff(_) | Error::ZeroScale { .. } | Error::IllConditioned { .. } => {
            log::error!("training diverged at epoch {epoch}, batch {batch}: {e}");
            Error::Divergence { epoch, batch }
        }
        other => other,
    }
}

/// Fixed set of perturbed normal frames used for the anomaly curve.
struct Probe {
    frames: Vec<f64>,
    count: usize,
}

fn build_probe(train: &FrameSet, normal_idx: &[usize], pool: &[Vec<f64>], cfg: &TrainConfig) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_PROBE);
    let count = PROBE_FRAMES.min(normal_idx.len());
    let mut frames = Vec::with_capacity(count * cfg.window * train.dim);
    for _ in 0..count {
        let i = normal_idx[rng.random_range(0..normal_idx.len())];
        frames.extend(local_perturbation(train.frame(i), train.dim, pool, &cfg.perturbation, rng.next_u64())?);
    }
    Ok(Probe { frames, count })
}

/// The training loop over normalized frame sets.
///
/// Each epoch refits (μ, σ) on normal-frame latents, shuffles, runs
/// [`train_batch`] over all batches, then records the mean normal and
/// anomalous log-densities and validation metrics. Training frames without
/// labeled anomalies are augmented with perturbations drawn from `pool`.
/// Returns the checkpoint with the best validation F1 (the last one when
/// validation is unavailable) and the per-epoch history.
pub fn train(
    train: &FrameSet,
    val: Option<&FrameSet>,
    pool: &[Vec<f64>],
    config: &TrainConfig,
    scaler: InputScaler,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut ckpt = Checkpoint::init(config, scaler)?;
    if config.epochs == 0 {
        return Ok((ckpt, Vec::new()));
    }
    if train.window != config.window {
        return Err(Error::DimensionMismatch {
            what: "frame window",
            expected: config.window,
            got: train.window,
        });
    }
    let normal_idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == 0).collect();
    let anomaly_idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] != 0).collect();
    if normal_idx.is_empty() {
        return Err(Error::InvalidConfig("training split has no normal frames".into()));
    }
    let inject = anomaly_idx.is_empty() && !pool.is_empty() && config.injection_rate > 0.0;
    if anomaly_idx.is_empty() && !inject {
        log::warn!("no anomalous frames and no perturbation pool; training on likelihood alone");
    }
    let probe = if inject {
        Some(build_probe(train, &normal_idx, pool, config)?)
    } else {
        None
    };

    let mut state = TrainState::new(&ckpt);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut inject_rng = ChaCha8Rng::seed_from_u64(config.seed);
    inject_rng.set_stream(STREAM_INJECT);

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    ckpt.refit_marginals(train, &normal_idx).map_err(|e| divergence(e, 0, 0))?;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let skipped_before = state.skipped_hinges;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (k, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = train.gather(chunk);
            let mut labels: Vec<u8> = chunk.iter().map(|&i| train.labels[i]).collect();
            if inject {
                let span = config.window * train.dim;
                for (j, y) in labels.iter_mut().enumerate() {
                    if *y == 0 && inject_rng.random::<f64>() < config.injection_rate {
                        let w = &mut batch[j * span..(j + 1) * span];
                        let p = local_perturbation(w, train.dim, pool, &config.perturbation, inject_rng.next_u64())?;
                        w.copy_from_slice(&p);
                        *y = 1;
                    }
                }
            }
            let out = train_batch(&mut ckpt, &mut state, &batch, &labels).map_err(|e| divergence(e, epoch, k))?;
            loss_sum += out.total / labels.len() as f64;
            batches += 1;
        }
        ckpt.epoch = epoch;
        let normal_z = ckpt
            .refit_marginals(train, &normal_idx)
            .map_err(|e| divergence(e, epoch, batches))?;
        let normal_logc = mean(&ckpt.score_latents(&normal_z)?);
        let anomaly_logc = if !anomaly_idx.is_empty() {
            mean(&ckpt.score_latents(&ckpt.latents_of(train, &anomaly_idx)?)?)
        } else if let Some(p) = &probe {
            let z = encode(&p.frames, p.count, &ckpt.encoder, &ckpt.config.encoder)?;
            mean(&ckpt.score_latents(&z)?)
        } else {
            None
        };

        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            normal_logc,
            anomaly_logc,
            val_f1: None,
            val_auc: None,
            val_add: None,
            val_threshold: None,
            skipped_hinges: state.skipped_hinges - skipped_before,
        };
        let mut val_f1 = None;
        if let Some(v) = val {
            let scores = ckpt.score_frames(v)?;
            if v.stride == 1 && has_both_classes(&v.labels) {
                let (tau, c, delay) = window_metrics(&scores, &v.labels, v.row_labels(), v.window)?;
                record.val_f1 = Some(c.f1);
                record.val_auc = Some(c.auc_roc);
                record.val_add = delay.add;
                record.val_threshold = Some(tau);
                val_f1 = Some((c.f1, tau));
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.4}, normal {:?}, anomaly {:?}, val f1 {:?}",
            record.loss,
            record.normal_logc,
            record.anomaly_logc,
            record.val_f1
        );
        history.push(record);
        if let Some((f1, tau)) = val_f1 {
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                let mut snap = ckpt.clone();
                snap.threshold = Some(tau);
                best = Some((f1, snap));
            }
        }
    }
    Ok((best.map(|(_, c)| c).unwrap_or(ckpt), history))
}

/// Splits, normalizes and frames raw series, then runs [`train`].
///
/// Without `val_series` the last `val_fraction` of `train_series` becomes
/// the validation split. Validation frames always use stride 1. When the
/// training rows carry no anomalies, `pool_fraction` of the validation
/// events (at least one) seed the perturbation pool.
pub fn fit(
    train_series: &LabeledSeries,
    val_series: Option<&LabeledSeries>,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    config.validate()?;
    let (train_part, val_part) = match val_series {
        Some(v) => (train_series.clone(), Some(v.clone())),
        None if config.val_fraction > 0.0 => {
            let t = train_series.len();
            let cut = t - ((t as f64 * config.val_fraction).round() as usize).min(t);
            if cut < config.window || t - cut < config.window {
                (train_series.clone(), None)
            } else {
                (train_series.slice(0, cut), Some(train_series.slice(cut, t)))
            }
        }
        None => (train_series.clone(), None),
    };
    let scaler = InputScaler::fit(&train_part);
    let train_n = scaler.apply(&train_part)?;
    let val_n = val_part.as_ref().map(|v| scaler.apply(v)).transpose()?;
    let frames = make_frames_named(&train_n, config.window, config.stride, "train")?;
    let val_frames = val_n
        .as_ref()
        .map(|v| make_frames_named(v, config.window, 1, "validation"))
        .transpose()?;
    let pool = if frames.anomaly_count() == 0 {
        match &val_n {
            Some(v) => anomaly_pool(v, config.pool_fraction, config.seed)?,
            None => Vec::new(),
        }
    } else {
        Vec::new()
    };
    train(&frames, val_frames.as_ref(), &pool, config, scaler)
}

/// Reserves `fraction` of the labeled events (at least one) as row-major
/// snippets for local perturbation.
pub fn anomaly_pool(series: &LabeledSeries, fraction: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if series.events.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_POOL);
    let mut events = series.events.clone();
    events.shuffle(&mut rng);
    let take = ((events.len() as f64 * fraction).ceil() as usize).clamp(1, events.len());
    let d = series.dim;
    Ok(events[..take]
        .iter()
        .map(|&(s, e)| series.values[s * d..(e + 1) * d].to_vec())
        .collect())
}

/// Full evaluation of a checkpoint on a labeled series at the threshold
/// that maximizes F1 on that series.
pub fn evaluate_series(ckpt: &Checkpoint, series: &LabeledSeries) -> Result<(ScoredWindows, f64, Classification, DetectionDelay)> {
    let scored = ckpt.score_series(series)?;
    let (tau, c, delay) = window_metrics(&scored.scores, &scored.labels, &scored.row_labels, scored.window)?;
    Ok((scored, tau, c, delay))
}

/// AUC of stride-1 window scores on `series`.
pub fn series_auc(ckpt: &Checkpoint, series: &LabeledSeries) -> Result<f64> {
    let s = ckpt.score_series(series)?;
    auc_roc(&s.scores, &s.labels)
}
