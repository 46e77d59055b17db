//! Evaluation reports and their JSON, CSV and SVG renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rawmix_features::TrainHistory;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Percentage of correctly classified test patches.
    pub accuracy: f64,
    /// Percent correct per class, indexed by label.
    pub per_class: Vec<f64>,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub feature_dim: usize,
    pub train_patches: usize,
    pub test_patches: usize,
    /// Wall time spent extracting the test features.
    pub extraction_seconds: f64,
    pub training: Option<TrainHistory>,
}

impl EvalReport {
    pub fn from_predictions(
        config: ExperimentConfig,
        seed: u64,
        num_classes: usize,
        truth: &[usize],
        predicted: &[usize],
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Data(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Data(format!("label pair ({t}, {p}) outside 0..{num_classes}")));
            }
            confusion[t][p] += 1;
        }
        let mut per_class = Vec::with_capacity(num_classes);
        for (c, row) in confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n == 0 {
                return Err(Error::Data(format!("class {c} has no test patches")));
            }
            per_class.push(100.0 * row[c] as f64 / n as f64);
        }
        let report = Self {
            config,
            seed,
            accuracy: accuracy_of(&confusion),
            per_class,
            confusion,
            feature_dim: 0,
            train_patches: 0,
            test_patches: truth.len(),
            extraction_seconds: 0.0,
            training: None,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.per_class.len();
        if c == 0 {
            return Err(Error::Data("report has no per-class accuracies".into()));
        }
        if self.confusion.len() != c || self.confusion.iter().any(|r| r.len() != c) {
            return Err(Error::Data(format!("confusion matrix is not {c}x{c}")));
        }
        let total: usize = self.confusion.iter().flatten().sum();
        if total != self.test_patches {
            return Err(Error::Data(format!(
                "confusion matrix counts {total} patches, report says {}",
                self.test_patches
            )));
        }
        if !(0.0..=100.0).contains(&self.accuracy) || (self.accuracy - accuracy_of(&self.confusion)).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "accuracy {} disagrees with the confusion matrix",
                self.accuracy
            )));
        }
        Ok(())
    }

    /// The report with its wall-clock timing zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            extraction_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn seconds_per_patch(&self) -> f64 {
        self.extraction_seconds / self.test_patches.max(1) as f64
    }
}

fn accuracy_of(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let trace: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    100.0 * trace as f64 / total as f64
}

/// Median of the report accuracies; the mean of the middle pair for even counts.
pub fn median_accuracy(reports: &[EvalReport]) -> Option<f64> {
    let mut acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    if acc.is_empty() {
        return None;
    }
    acc.sort_by(f64::total_cmp);
    let n = acc.len();
    Some(if n % 2 == 1 {
        acc[n / 2]
    } else {
        0.5 * (acc[n / 2 - 1] + acc[n / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Svg => "svg",
        }
    }
}

pub fn emit_report(reports: &[EvalReport], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to emit".into()));
    }
    for r in reports {
        r.validate()?;
    }
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports)? + "\n",
        ReportFormat::Csv => accuracy_table(reports)?,
        ReportFormat::Svg => accuracy_time_svg(reports),
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let reports: Vec<EvalReport> = serde_json::from_str(&fs::read_to_string(path)?)?;
    for r in &reports {
        r.validate()?;
    }
    Ok(reports)
}

/// One row per (MSFA, patch size, descriptor), one column per train/test
/// condition; cells hold the median accuracy over seeds.
pub fn accuracy_table(reports: &[EvalReport]) -> Result<String> {
    let mut conditions: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, usize, String), BTreeMap<String, Vec<EvalReport>>> = BTreeMap::new();
    for r in reports {
        let cond = r.config.condition_label();
        if !conditions.contains(&cond) {
            conditions.push(cond.clone());
        }
        let key = (r.config.msfa.clone(), r.config.patch_size, r.config.descriptor.as_str().to_string());
        cells.entry(key).or_default().entry(cond).or_default().push(r.clone());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["msfa".to_string(), "patch_size".into(), "descriptor".into()];
    header.extend(conditions.iter().cloned());
    w.write_record(&header)?;
    for ((msfa, x, desc), by_cond) in &cells {
        let mut row = vec![msfa.clone(), x.to_string(), desc.clone()];
        for cond in &conditions {
            row.push(
                by_cond
                    .get(cond)
                    .and_then(|rs| median_accuracy(rs))
                    .map(|a| format!("{a:.2}"))
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Scatter of accuracy against per-patch extraction time, one dot per report.
pub fn accuracy_time_svg(reports: &[EvalReport]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 30.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 60.0;
    let ms: Vec<f64> = reports.iter().map(|r| 1e3 * r.seconds_per_patch()).collect();
    let x_max = ms.iter().cloned().fold(0.0, f64::max).max(1e-3) * 1.1;
    let px = |v: f64| LEFT + (W - LEFT - RIGHT) * v / x_max;
    let py = |acc: f64| H - BOTTOM - (H - TOP - BOTTOM) * acc / 100.0;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (px(0.0), px(x_max), py(0.0), py(100.0));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=5 {
        let acc = 20.0 * k as f64;
        let y = py(acc);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{acc}</text>"#, x0 - 8.0, y + 4.0);
        let t = x_max * k as f64 / 5.0;
        let x = px(t);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/>"#, y0 + 4.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{t:.3}</text>"#, y0 + 18.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">extraction time per patch (ms)</text>"#,
        (x0 + x1) / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">accuracy (%)</text>"#,
        (y0 + y1) / 2.0
    );
    for (r, &t) in reports.iter().zip(&ms) {
        let color = match r.config.descriptor {
            crate::config::DescriptorId::Rawmixer => "#c0392b",
            crate::config::DescriptorId::Mlbp => "#2471a3",
        };
        let (x, y) = (px(t), py(r.accuracy));
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{} {} X={}</text>"#,
            x + 6.0,
            y - 6.0,
            r.config.descriptor.as_str(),
            r.config.msfa,
            r.config.patch_size
        );
    }
    s.push_str("</svg>\n");
    s
}
