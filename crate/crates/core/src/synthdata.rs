//! Synthetic labelled series: a first-order linear recurrence whose
//! transition matrix switches inside anomaly events, followed by marginal
//! warps, plus a local perturbation scheme for building training anomalies.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spectral radius imposed on both transition matrices.
pub const SPECTRAL_RADIUS: f64 = 0.95;

const STREAM_DYNAMICS: u64 = 1;
const STREAM_EVENTS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_WARP: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    pub scale: (f64, f64),
    pub shift: (f64, f64),
    /// Number of sequential nonlinear warps.
    pub num_warps: usize,
    pub power: (f64, f64),
    pub log_soft: (f64, f64),
    pub sinh: (f64, f64),
    pub noise_sigma: f64,
    pub noise_amplitude: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl WarpConfig {
    /// s = 1, b = 0, no nonlinear warps, no noise.
    pub fn identity() -> Self {
        Self {
            scale: (1.0, 1.0),
            shift: (0.0, 0.0),
            num_warps: 0,
            power: (1.0, 1.0),
            log_soft: (1.0, 1.0),
            sinh: (0.1, 0.1),
            noise_sigma: 0.0,
            noise_amplitude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("scale", self.scale),
            ("shift", self.shift),
            ("power", self.power),
            ("log_soft", self.log_soft),
            ("sinh", self.sinh),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!("warp.{name} range ({lo}, {hi}) is not ordered")));
            }
        }
        if self.power.0 <= 0.0 || self.log_soft.0 <= 0.0 || self.sinh.0 <= 0.0 {
            return Err(Error::InvalidConfig(
                "warp power, log_soft and sinh parameters must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_amplitude.is_finite() {
            return Err(Error::InvalidConfig("warp noise must satisfy sigma >= 0".into()));
        }
        Ok(())
    }
}

/// Which rows receive the marginal warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpTarget {
    /// Every row, independently of the labels.
    All,
    /// Only rows inside anomaly events.
    Anomalies,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub d_gen: usize,
    /// Series length T.
    pub length: usize,
    pub dependency_strength: f64,
    pub dependency_shift: f64,
    pub anomaly_fraction: f64,
    /// Event lengths are `span_unit` times a fraction drawn from this range.
    pub anomaly_span_range: (f64, f64),
    pub span_unit: usize,
    pub warp: WarpConfig,
    pub warp_target: WarpTarget,
    pub case_preset: Option<u8>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        case_preset(1).expect("case 1 exists")
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_gen == 0 || self.length < 2 {
            return Err(Error::InvalidConfig("scenario needs d_gen >= 1 and length >= 2".into()));
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "anomaly_fraction must lie in (0, 1), got {}",
                self.anomaly_fraction
            )));
        }
        let (lo, hi) = self.anomaly_span_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "anomaly_span_range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if self.span_unit == 0 {
            return Err(Error::InvalidConfig("span_unit must be positive".into()));
        }
        if !(self.dependency_strength >= 0.0 && self.dependency_strength <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "dependency_strength must lie in [0, 1], got {}",
                self.dependency_strength
            )));
        }
        if !(self.dependency_shift >= 0.0 && self.dependency_shift.is_finite()) {
            return Err(Error::InvalidConfig("dependency_shift must be finite and >= 0".into()));
        }
        self.warp.validate()
    }
}

/// Row-major `[T, D]` observations with per-row labels and the inclusive
/// `(start, end)` anomaly events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub dim: usize,
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub events: Vec<(usize, usize)>,
}

impl LabeledSeries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Contiguous rows `[start, end)` with events clipped and re-based.
    pub fn slice(&self, start: usize, end: usize) -> LabeledSeries {
        let labels = self.labels[start..end].to_vec();
        LabeledSeries {
            dim: self.dim,
            values: self.values[start * self.dim..end * self.dim].to_vec(),
            events: events_from_labels(&labels),
            labels,
        }
    }
}

/// Maximal runs of 1 in `labels` as inclusive intervals.
pub fn events_from_labels(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &y) in labels.iter().enumerate() {
        match (y != 0, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, labels.len() - 1));
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn rescale_to_radius(m: DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    let r = spectral_radius(&m);
    if r > 0.0 {
        m * (radius / r)
    } else {
        m
    }
}

fn random_matrix(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Normal and anomalous transition matrices (row-major) for `config`.
pub fn transition_matrices(config: &ScenarioConfig) -> (Vec<f64>, Vec<f64>) {
    let d = config.d_gen;
    let mut rng = rng_for(config.seed, STREAM_DYNAMICS);
    let q = rescale_to_radius(random_matrix(d, &mut rng), SPECTRAL_RADIUS);
    let p = random_matrix(d, &mut rng);
    let b_norm = q * config.dependency_strength;
    let radius = spectral_radius(&b_norm);
    let b_anom = rescale_to_radius(&b_norm + p * config.dependency_shift, radius);
    let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
    (row_major(&b_norm), row_major(&b_anom))
}

/// Places disjoint events so that roughly `anomaly_fraction` of the rows are
/// anomalous. Events are separated by at least one normal row.
pub fn place_events(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let t = config.length;
    let (lo, hi) = config.anomaly_span_range;
    let min_len = ((lo * config.span_unit as f64).round() as usize).max(1);
    let max_len = ((hi * config.span_unit as f64).round() as usize).max(min_len);
    let target = (config.anomaly_fraction * t as f64).round() as usize;
    if target < min_len.div_ceil(2) {
        return Err(Error::UnattainableAnomalyFraction {
            fraction: config.anomaly_fraction,
            reason: format!("{target} anomalous rows requested but the shortest event has {min_len}"),
        });
    }
    let mut lengths = Vec::new();
    let mut total = 0;
    while total < target {
        let len = rng.random_range(min_len..=max_len);
        // stop when adding the event overshoots more than leaving it out undershoots
        if total > 0 && total + len > target && total + len - target > target - total {
            break;
        }
        lengths.push(len);
        total += len;
    }
    let n = lengths.len();
    // events plus a mandatory normal row between neighbours and at the start
    let free = t
        .checked_sub(total + n)
        .ok_or_else(|| Error::UnattainableAnomalyFraction {
            fraction: config.anomaly_fraction,
            reason: format!("{n} events covering {total} rows do not fit in {t} rows"),
        })?;
    // random composition of the free rows into n + 1 gaps
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    lengths.shuffle(rng);
    let mut events = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (len, cut) in lengths.into_iter().zip(cuts) {
        cursor += cut - prev_cut + 1;
        prev_cut = cut;
        events.push((cursor, cursor + len - 1));
        cursor += len;
    }
    Ok(events)
}

/// Latent recurrence Z_t = B Z_{t−1} + ε_t with B switched inside events,
/// then the configured marginal warp. Deterministic in `config.seed`.
pub fn generate_latent_series(config: &ScenarioConfig) -> Result<LabeledSeries> {
    config.validate()?;
    let (d, t) = (config.d_gen, config.length);
    let (b_norm, b_anom) = transition_matrices(config);
    let events = place_events(config, &mut rng_for(config.seed, STREAM_EVENTS))?;
    let mut labels = vec![0u8; t];
    for &(s, e) in &events {
        labels[s..=e].iter_mut().for_each(|y| *y = 1);
    }
    let mut rng = rng_for(config.seed, STREAM_NOISE);
    let mut values = vec![0.0; t * d];
    let mut prev = vec![0.0; d];
    for step in 0..t {
        let b = if labels[step] == 1 { &b_anom } else { &b_norm };
        let row = &mut values[step * d..(step + 1) * d];
        for i in 0..d {
            let drive: f64 = (0..d).map(|j| b[i * d + j] * prev[j]).sum();
            row[i] = drive + rng.sample::<f64, _>(StandardNormal);
        }
        prev.copy_from_slice(row);
    }
    let mut series = LabeledSeries {
        dim: d,
        values,
        labels,
        events,
    };
    let warp_seed = rng_for(config.seed, STREAM_WARP).random::<u64>();
    match config.warp_target {
        WarpTarget::All => {
            series.values = apply_marginal_warp(&series.values, d, 0..t, &config.warp, warp_seed)?;
        }
        WarpTarget::Anomalies => {
            for (k, &(s, e)) in series.events.clone().iter().enumerate() {
                series.values =
                    apply_marginal_warp(&series.values, d, s..e + 1, &config.warp, warp_seed.wrapping_add(k as u64))?;
            }
        }
        WarpTarget::None => {}
    }
    Ok(series)
}

/// sign(x)|x|^p
pub fn power_warp(x: f64, p: f64) -> f64 {
    x.signum() * x.abs().powf(p)
}

/// sign(x) ln(1 + a|x|)
pub fn log_soft_warp(x: f64, a: f64) -> f64 {
    x.signum() * (a * x.abs()).ln_1p()
}

/// sinh(bx)
pub fn sinh_warp(x: f64, b: f64) -> f64 {
    (b * x).sinh()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Curve {
    Power(f64),
    LogSoft(f64),
    Sinh(f64),
}

impl Curve {
    fn apply(self, x: f64) -> f64 {
        match self {
            Curve::Power(p) => power_warp(x, p),
            Curve::LogSoft(a) => log_soft_warp(x, a),
            Curve::Sinh(b) => sinh_warp(x, b),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Affine warp, `num_warps` random curvature warps and heteroskedastic
/// noise σ_t = max(0, σ(1 + A sin(2πt/T))) applied to `rows` of the
/// row-major `[T, dim]` matrix `x`. Other rows are returned unchanged.
pub fn apply_marginal_warp(
    x: &[f64],
    dim: usize,
    rows: std::ops::Range<usize>,
    warp: &WarpConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    warp.validate()?;
    if rows.is_empty() {
        return Err(Error::EmptyRowRange);
    }
    let t_total = x.len() / dim;
    if rows.end > t_total {
        return Err(Error::DimensionMismatch {
            what: "warp row range end",
            expected: t_total,
            got: rows.end,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, warp.scale)).collect();
    let shift: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, warp.shift)).collect();
    let curves: Vec<Vec<Curve>> = (0..warp.num_warps)
        .map(|_| {
            (0..dim)
                .map(|_| match rng.random_range(0..3) {
                    0 => Curve::Power(uniform(&mut rng, warp.power)),
                    1 => Curve::LogSoft(uniform(&mut rng, warp.log_soft)),
                    _ => Curve::Sinh(uniform(&mut rng, warp.sinh)),
                })
                .collect()
        })
        .collect();
    let mut out = x.to_vec();
    let period = t_total as f64;
    for t in rows {
        let sigma_t = (warp.noise_sigma * (1.0 + warp.noise_amplitude * (std::f64::consts::TAU * t as f64 / period).sin())).max(0.0);
        for j in 0..dim {
            let mut v = scale[j] * out[t * dim + j] + shift[j];
            for stage in &curves {
                v = stage[j].apply(v);
            }
            if sigma_t > 0.0 {
                v += sigma_t * rng.sample::<f64, _>(StandardNormal);
            }
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "warped value",
                    index: t * dim + j,
                });
            }
            out[t * dim + j] = v;
        }
    }
    Ok(out)
}

/// Linear interpolation of a `[n, dim]` snippet to `len` rows.
pub fn resize_snippet(snippet: &[f64], dim: usize, len: usize) -> Vec<f64> {
    let n = snippet.len() / dim;
    let mut out = vec![0.0; len * dim];
    for r in 0..len {
        let pos = if len == 1 || n == 1 {
            0.0
        } else {
            r as f64 * (n - 1) as f64 / (len - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let w = pos - i0 as f64;
        for j in 0..dim {
            let a = snippet[i0 * dim + j];
            let b = snippet[i1 * dim + j];
            out[r * dim + j] = if w == 0.0 { a } else { a + w * (b - a) };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalPerturbation {
    pub noise_sigma: f64,
    pub scale_range: (f64, f64),
    /// Number of random row swaps inside the overlaid interval.
    pub permute_rows: usize,
    /// Interval length as a fraction of the window, drawn uniformly.
    pub span_range: (f64, f64),
}

impl Default for LocalPerturbation {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            scale_range: (0.95, 1.05),
            permute_rows: 2,
            span_range: (0.25, 0.5),
        }
    }
}

/// Overlays a perturbed, resized anomaly snippet onto a random interval of
/// the `[len, dim]` window. Rows outside the interval are untouched.
pub fn local_perturbation(
    window: &[f64],
    dim: usize,
    pool: &[Vec<f64>],
    params: &LocalPerturbation,
    seed: u64,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::InvalidConfig("anomaly pool is empty".into()));
    }
    let len = window.len() / dim;
    if params.permute_rows >= len {
        return Err(Error::InvalidConfig(format!(
            "permute_rows {} must be below the window length {len}",
            params.permute_rows
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snippet = &pool[rng.random_range(0..pool.len())];
    if snippet.is_empty() || snippet.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            what: "snippet feature count",
            expected: dim,
            got: snippet.len(),
        });
    }
    let frac = uniform(&mut rng, params.span_range);
    let span = ((frac * len as f64).round() as usize).clamp(1, len);
    let t0 = rng.random_range(0..=len - span);
    let mut piece = resize_snippet(snippet, dim, span);
    let scales: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, params.scale_range)).collect();
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    for r in 0..span {
        for j in 0..dim {
            let v = &mut piece[r * dim + j];
            *v *= scales[j];
            if params.noise_sigma > 0.0 {
                *v += noise.sample(&mut rng);
            }
        }
    }
    if span > 1 {
        for _ in 0..params.permute_rows {
            let a = rng.random_range(0..span);
            let b = rng.random_range(0..span);
            for j in 0..dim {
                piece.swap(a * dim + j, b * dim + j);
            }
        }
    }
    let mut out = window.to_vec();
    out[t0 * dim..(t0 + span) * dim].copy_from_slice(&piece);
    Ok(out)
}

/// Scenario presets. Case 1: moderate warps and joint shift; case 2:
/// strong warps and strong joint shift; case 3: case-2 warps with a weak
/// joint shift.
pub fn case_preset(case: u8) -> Result<ScenarioConfig> {
    let moderate = WarpConfig {
        scale: (0.8, 1.2),
        shift: (-0.5, 0.5),
        num_warps: 1,
        power: (0.8, 1.2),
        log_soft: (0.5, 1.0),
        sinh: (0.1, 0.2),
        noise_sigma: 0.1,
        noise_amplitude: 0.5,
    };
    let strong = WarpConfig {
        scale: (0.5, 2.0),
        shift: (-2.0, 2.0),
        num_warps: 3,
        power: (0.5, 1.5),
        log_soft: (0.5, 2.0),
        sinh: (0.05, 0.3),
        noise_sigma: 0.3,
        noise_amplitude: 1.0,
    };
    let (shift, warp) = match case {
        1 => (0.5, moderate),
        2 => (1.5, strong),
        3 => (0.1, strong),
        other => return Err(Error::UnknownCase(other)),
    };
    Ok(ScenarioConfig {
        d_gen: 5,
        length: 20_000,
        dependency_strength: 0.8,
        dependency_shift: shift,
        anomaly_fraction: 0.15,
        anomaly_span_range: (0.25, 0.5),
        span_unit: 400,
        warp,
        warp_target: WarpTarget::All,
        case_preset: Some(case),
        seed: 0,
    })
}
