use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Degradation;
use crate::error::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_SVG: &str = "curves.svg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    pub name: String,
    pub images: usize,
    /// Absent when the dataset holds a single class.
    pub i_auc: Option<f64>,
    /// Mean per-image F1 over manipulated images.
    pub p_f1: f64,
    /// Accuracy of the image score at threshold 0.5.
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: u32,
    pub p_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub degradation: Degradation,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub p_f1: f64,
    pub i_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetScores>,
    pub curves: Vec<Curve>,
    pub ablations: Vec<AblationTable>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `level,p_f1` rows: curve points, then ablation settings, then datasets.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,p_f1\n");
        for c in &self.curves {
            for p in &c.points {
                let _ = writeln!(s, "{},{}", p.level, p.p_f1);
            }
        }
        for t in &self.ablations {
            for r in &t.rows {
                let _ = writeln!(s, "{},{}", r.setting, r.p_f1);
            }
        }
        for d in &self.datasets {
            let _ = writeln!(s, "{},{}", d.name, d.p_f1);
        }
        s
    }

    /// Self-contained line plot of every robustness curve.
    pub fn to_svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const M: f64 = 48.0;
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{M}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <text x=\"8\" y=\"{M}\" font-size=\"11\">1.0</text>\n\
             <text x=\"8\" y=\"{y0}\" font-size=\"11\">0.0</text>\n",
            y0 = H - M,
            x1 = W - M,
        );
        if self.curves.is_empty() {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"13\">no robustness curves</text>", M + 10.0, H / 2.0);
        }
        for (k, c) in self.curves.iter().enumerate() {
            let color = colors[k % colors.len()];
            let n = c.points.len();
            let pts: Vec<String> = c
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let x = if n > 1 { M + (W - 2.0 * M) * i as f64 / (n - 1) as f64 } else { W / 2.0 };
                    let y = H - M - (H - 2.0 * M) * p.p_f1.clamp(0.0, 1.0);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
            for (i, (p, xy)) in c.points.iter().zip(&pts).enumerate() {
                let (x, y) = xy.split_once(',').expect("formatted pair");
                let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
                if k == 0 || i == 0 {
                    let _ = writeln!(s, "<text x=\"{x}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>", H - M + 14.0 + 12.0 * k as f64, p.level);
                }
            }
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>", W - M - 60.0, M + 14.0 * k as f64, c.degradation.name());
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Writes `report.json`, `report.csv` and `curves.svg` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        (REPORT_JSON, report.to_json()?),
        (REPORT_CSV, report.to_csv()),
        (REPORT_SVG, report.to_svg()),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
