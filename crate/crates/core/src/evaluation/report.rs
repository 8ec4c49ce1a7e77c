use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{Classification, Confusion, DetectionDelay};
use crate::error::{Error, Result};

/// Per-epoch training record; the normal/anomaly means form the
/// likelihood-separation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub normal_logc: Option<f64>,
    pub anomaly_logc: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_add: Option<f64>,
    #[serde(with = "extended::opt")]
    pub val_threshold: Option<f64>,
    pub skipped_hinges: usize,
}

impl EpochRecord {
    /// Mean normal minus mean anomalous log-density.
    pub fn separation(&self) -> Option<f64> {
        Some(self.normal_logc? - self.anomaly_logc?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_roc: f64,
    #[serde(with = "extended")]
    pub threshold: f64,
    pub add: Option<f64>,
    pub add_detected: usize,
    pub add_missed: usize,
    pub confusion: Confusion,
    pub zero_division: bool,
    pub windows: usize,
    pub curves: Vec<EpochRecord>,
}

impl MetricsReport {
    pub fn new(c: &Classification, threshold: f64, delay: &DetectionDelay, windows: usize) -> Self {
        Self {
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            auc_roc: c.auc_roc,
            threshold,
            add: delay.add,
            add_detected: delay.detected,
            add_missed: delay.missed,
            confusion: c.confusion,
            zero_division: c.zero_division,
            windows,
            curves: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub separation: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub delay: Option<PathBuf>,
}

/// Writes `report.json` plus SVG curves for a non-empty history.
pub fn emit_report(report: &MetricsReport, history: &[EpochRecord], dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir)?;
    let mut full = report.clone();
    full.curves = history.to_vec();
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&full)?)?;
    let mut files = ReportFiles {
        report: report_path,
        separation: None,
        metrics: None,
        delay: None,
    };
    if history.is_empty() {
        return Ok(files);
    }
    let (sep, met, del) = plot_history(history);
    let path = dir.join("separation.svg");
    fs::write(&path, sep)?;
    files.separation = Some(path);
    let path = dir.join("metrics.svg");
    fs::write(&path, met)?;
    files.metrics = Some(path);
    if let Some(svg) = del {
        let path = dir.join("delay.svg");
        fs::write(&path, svg)?;
        files.delay = Some(path);
    }
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Separation, metric and (when any epoch has one) delay charts.
pub fn plot_history(history: &[EpochRecord]) -> (String, String, Option<String>) {
    let pts = |f: &dyn Fn(&EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        history.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
    };
    let sep = line_chart(
        "Mean log-density per epoch",
        "log-density",
        &[
            Series::new("normal", "#1f77b4", pts(&|r| r.normal_logc)),
            Series::new("anomaly", "#d62728", pts(&|r| r.anomaly_logc)),
        ],
    );
    let met = line_chart(
        "Validation metrics per epoch",
        "value",
        &[
            Series::new("f1", "#2ca02c", pts(&|r| r.val_f1)),
            Series::new("auc_roc", "#9467bd", pts(&|r| r.val_auc)),
        ],
    );
    let add = pts(&|r| r.val_add);
    let del = (!add.is_empty()).then(|| {
        line_chart(
            "Validation detection delay per epoch",
            "time steps",
            &[Series::new("add", "#ff7f0e", add)],
        )
    });
    (sep, met, del)
}

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

impl<'a> Series<'a> {
    fn new(name: &'a str, color: &'a str, points: Vec<(f64, f64)>) -> Self {
        Self { name, color, points }
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

fn line_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for (v, anchor_y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{:.3}</text>"#,
            PAD - 4.0,
            anchor_y + 4.0,
            v
        );
    }
    for (v, anchor_x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(
            svg,
            r#"<text x="{anchor_x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#,
            H - PAD + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">epoch</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="{}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            escape(s.name),
            s.color,
            pts.join(" ")
        );
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            W - PAD - 80.0,
            s.color,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// CSV `window_index,t_end,score,label,prediction` for stride-1 windows.
pub fn write_score_dump(path: &Path, scores: &[f64], labels: &[u8], threshold: f64, window: usize) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "score dump labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["window_index", "t_end", "score", "label", "prediction"]).map_err(csv_io)?;
    for (i, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        let pred = u8::from(s < threshold);
        w.write_record([
            i.to_string(),
            (i + window - 1).to_string(),
            s.to_string(),
            y.to_string(),
            pred.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// JSON has no infinities; thresholds at ±∞ are written as `"inf"` / `"-inf"`.
pub(crate) mod extended {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("`{other}` is not a number"))),
            },
        }
    }

    pub mod opt {
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}
