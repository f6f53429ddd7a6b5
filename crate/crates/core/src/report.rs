//! Evaluation artifacts: `report.json`, `curve.csv` and an SVG curve plot.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PlidError, Result};
use crate::evaluation::{Evaluation, MetricsReport};

pub const REPORT_FILE: &str = "report.json";
pub const CURVE_CSV: &str = "curve.csv";
pub const CURVE_PLOT: &str = "curve.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub num_candidates: usize,
    pub feasibility_threshold: Option<f64>,
    pub feasibility_validation_hm: Option<f64>,
    pub checkpoint_epoch: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(eval: Evaluation, checkpoint_epoch: usize, config_hash: String) -> Self {
        EvalReport {
            num_candidates: eval.num_candidates,
            feasibility_threshold: eval.feasibility.map(|f| f.threshold),
            feasibility_validation_hm: eval.feasibility.map(|f| f.validation_hm),
            metrics: eval.metrics,
            checkpoint_epoch,
            config_hash,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PlidError::Load {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| PlidError::parse(path, e.to_string()))
    }
}

#[derive(Serialize)]
struct CurveRow {
    bias: String,
    seen_acc: f64,
    unseen_acc: f64,
}

pub fn curve_csv(metrics: &MetricsReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &metrics.bias_grid {
        w.serialize(CurveRow {
            bias: p.bias.to_string(),
            seen_acc: p.seen_acc,
            unseen_acc: p.unseen_acc,
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Unseen accuracy against seen accuracy, both in percent.
pub fn curve_svg(metrics: &MetricsReport) -> Result<String> {
    use plotters::prelude::*;
    let mut pts: Vec<(f64, f64)> = metrics
        .bias_grid
        .iter()
        .map(|p| (p.seen_acc, p.unseen_acc))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut svg = String::new();
    {
        let plot_err = |e: String| PlidError::Validation(format!("plot: {e}"));
        let root = SVGBackend::with_string(&mut svg, (480, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let title = format!(
            "{} AUC {:.2}  H {:.2}",
            metrics.setting.as_str(),
            metrics.auc,
            metrics.best_hm
        );
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..100.0, 0.0..100.0)
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("seen accuracy (%)")
            .y_desc("unseen accuracy (%)")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .draw_series(LineSeries::new(pts, BLUE.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }
    Ok(svg)
}

/// Markdown table of headline metrics, one row per report.
pub fn metrics_table(rows: &[(String, &EvalReport)]) -> String {
    let mut out = String::from(
        "| run | setting | candidates | best seen | best unseen | H | AUC |\n|---|---|---|---|---|---|---|\n",
    );
    for (name, r) in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |",
            m.setting.as_str(),
            r.num_candidates,
            m.best_seen,
            m.best_unseen,
            m.best_hm,
            m.auc
        );
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PlidError::io(path, e))
}

/// Writes `report.json`, `curve.csv` and `curve.svg` into `dir`.
pub fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| PlidError::io(dir, e))?;
    write_file(&dir.join(REPORT_FILE), &report.to_json())?;
    write_file(&dir.join(CURVE_CSV), &curve_csv(&report.metrics))?;
    write_file(&dir.join(CURVE_PLOT), &curve_svg(&report.metrics)?)?;
    Ok(vec![REPORT_FILE.into(), CURVE_CSV.into(), CURVE_PLOT.into()])
}
