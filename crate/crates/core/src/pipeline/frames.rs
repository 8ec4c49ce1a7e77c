use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::LabeledSeries;

/// Overlapping windows over one series. Frame i covers rows
/// `[i·stride, i·stride + window − 1]` and is anomalous iff any covered
/// row is.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub window: usize,
    pub stride: usize,
    pub dim: usize,
    pub labels: Vec<u8>,
    pub source: String,
    values: Vec<f64>,
    rows: Vec<u8>,
}

pub fn make_frames(series: &LabeledSeries, window: usize, stride: usize) -> Result<FrameSet> {
    make_frames_named(series, window, stride, "series")
}

pub fn make_frames_named(series: &LabeledSeries, window: usize, stride: usize, source: &str) -> Result<FrameSet> {
    let t = series.len();
    if window == 0 || stride == 0 {
        return Err(Error::InvalidConfig("window and stride must be positive".into()));
    }
    if window > t {
        return Err(Error::WindowTooLong { window, length: t });
    }
    let count = (t - window) / stride + 1;
    // prefix sums of labels make each OR an O(1) lookup
    let mut prefix = vec![0usize; t + 1];
    for (i, &y) in series.labels.iter().enumerate() {
        prefix[i + 1] = prefix[i] + usize::from(y != 0);
    }
    let labels = (0..count)
        .map(|i| {
            let s = i * stride;
            u8::from(prefix[s + window] > prefix[s])
        })
        .collect();
    Ok(FrameSet {
        window,
        stride,
        dim: series.dim,
        labels,
        source: source.to_string(),
        values: series.values.clone(),
        rows: series.labels.clone(),
    })
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn start(&self, i: usize) -> usize {
        i * self.stride
    }

    pub fn t_end(&self, i: usize) -> usize {
        i * self.stride + self.window - 1
    }

    /// Row-major `[window, dim]` view of frame `i`.
    pub fn frame(&self, i: usize) -> &[f64] {
        let s = self.start(i) * self.dim;
        &self.values[s..s + self.window * self.dim]
    }

    /// Frames `idx` stacked into a row-major `[idx.len(), window, dim]` batch.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.window * self.dim);
        for &i in idx {
            out.extend_from_slice(self.frame(i));
        }
        out
    }

    /// Per-timestamp labels of the underlying series.
    pub fn row_labels(&self) -> &[u8] {
        &self.rows
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y != 0).count()
    }
}

/// Per-feature standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation per column; constant columns
    /// keep unit scale.
    pub fn fit(series: &LabeledSeries) -> Self {
        let (d, n) = (series.dim, series.len() as f64);
        let mut mean = vec![0.0; d];
        for row in series.values.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in series.values.chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, series: &LabeledSeries) -> Result<LabeledSeries> {
        if series.dim != self.mean.len() {
            return Err(Error::DimensionMismatch {
                what: "series feature count",
                expected: self.mean.len(),
                got: series.dim,
            });
        }
        let d = series.dim;
        let values = series
            .values
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.mean[k % d]) / self.std[k % d])
            .collect();
        Ok(LabeledSeries {
            values,
            ..series.clone()
        })
    }
}
