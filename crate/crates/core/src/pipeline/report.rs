//! Method × averaging result matrix.

use serde::{Deserialize, Serialize};

use super::stages::{Averaging, CellRecord, Localization};
use crate::metrics::{aggregate, aggregate_coords, CoordMetrics, PoseMetrics};

pub const REPORT_FORMAT: &str = "forestnet.report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub averaging: String,
    /// Reason the cell is empty; all metrics are `None` then.
    pub not_applicable: Option<String>,
    pub frames: usize,
    /// Mean of per-frame scene-coordinate inlier fractions, percent.
    pub inlier_percent: Option<f64>,
    /// Inliers over all predictions pooled across frames, percent.
    pub pooled_inlier_percent: Option<f64>,
    pub median_translation_cm: Option<f64>,
    pub median_rotation_deg: Option<f64>,
    pub correct_percent: Option<f64>,
    /// Frames where RANSAC produced no pose (counted as incorrect).
    pub failed_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub scene: String,
    pub cells: Vec<CellSummary>,
}

impl Report {
    pub fn cell(&self, method: &str, averaging: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.averaging == averaging)
    }
}

fn summarize(scene: &str, cell: &CellRecord) -> CellSummary {
    let mut out = CellSummary {
        method: cell.method.to_string(),
        averaging: cell.averaging.to_string(),
        not_applicable: cell.not_applicable.clone(),
        frames: cell.frames.len(),
        inlier_percent: None,
        pooled_inlier_percent: None,
        median_translation_cm: None,
        median_rotation_deg: None,
        correct_percent: None,
        failed_frames: cell.frames.iter().filter(|f| f.pose.is_none()).count(),
    };
    if cell.not_applicable.is_some() || cell.frames.is_empty() {
        return out;
    }
    let coords: Vec<CoordMetrics> = cell.frames.iter().map(|f| f.coords).collect();
    if let Ok(c) = aggregate_coords(&coords) {
        out.inlier_percent = Some(100.0 * c.frame_mean_inlier_fraction);
        out.pooled_inlier_percent = Some(100.0 * c.pooled_inlier_fraction);
    }
    // a frame without a pose has unbounded error
    let poses: Vec<PoseMetrics> = cell
        .frames
        .iter()
        .map(|f| {
            f.pose.unwrap_or(PoseMetrics {
                translation_error: f64::INFINITY,
                rotation_error: 180.0,
                correct: false,
            })
        })
        .collect();
    if let Ok(s) = aggregate(&[(scene.to_string(), poses)]) {
        out.median_translation_cm = Some(100.0 * s.median_translation);
        out.median_rotation_deg = Some(s.median_rotation);
        out.correct_percent = Some(s.percent_correct);
    }
    out
}

pub fn build_report(loc: &Localization) -> Report {
    Report {
        format: REPORT_FORMAT.into(),
        scene: loc.scene.clone(),
        cells: loc.cells.iter().map(|c| summarize(&loc.scene, c)).collect(),
    }
}

fn fmt_cell(c: Option<&CellSummary>) -> [String; 3] {
    let Some(c) = c else {
        return ["-".into(), "-".into(), "-".into()];
    };
    if c.not_applicable.is_some() {
        return ["n/a".into(), "n/a".into(), "n/a".into()];
    }
    let num = |v: Option<f64>, suffix: &str| v.map_or("-".into(), |x| {
        if x.is_finite() {
            format!("{x:.1}{suffix}")
        } else {
            "inf".into()
        }
    });
    [
        num(c.inlier_percent, "%"),
        format!(
            "{}, {}",
            num(c.median_translation_cm, "cm"),
            num(c.median_rotation_deg, "°")
        ),
        num(c.correct_percent, "%"),
    ]
}

/// Aligned text table: one row per method, and per averaging scheme the
/// inlier percentage, median pose error and percentage of correct frames.
pub fn render_table(report: &Report) -> String {
    let mut methods: Vec<String> = Vec::new();
    for c in &report.cells {
        if !methods.contains(&c.method) {
            methods.push(c.method.clone());
        }
    }
    let mut header = vec!["method".to_string()];
    for a in Averaging::ALL {
        header.push(format!("{a} inliers"));
        header.push(format!("{a} median error"));
        header.push(format!("{a} correct"));
    }
    let mut rows = vec![header];
    for m in &methods {
        let mut row = vec![m.clone()];
        for a in Averaging::ALL {
            row.extend(fmt_cell(report.cell(m, &a.to_string())));
        }
        rows.push(row);
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!("scene: {}\n", report.scene);
    for (ri, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| {
                let pad = w - s.chars().count();
                if i == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if ri == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forestnet::Variant;
    use crate::pipeline::stages::{FrameRecord, Method};

    fn frame(i: usize, inl: usize, t: Option<f64>) -> FrameRecord {
        FrameRecord {
            frame: i,
            coords: CoordMetrics {
                count: 10,
                inliers: inl,
                inlier_fraction: inl as f64 / 10.0,
                mean_inlier_distance: None,
            },
            pose: t.map(|t| PoseMetrics {
                translation_error: t,
                rotation_error: 1.0,
                correct: t < 0.05,
            }),
            error: None,
            correspondences: 10,
            inliers: 0,
        }
    }

    fn loc() -> Localization {
        Localization {
            scene: "s".into(),
            cells: vec![
                CellRecord {
                    method: Method::Forest,
                    averaging: Averaging::NoGm,
                    not_applicable: None,
                    frames: vec![frame(0, 2, Some(0.01)), frame(1, 4, None), frame(2, 6, Some(0.10))],
                },
                CellRecord {
                    method: Method::Forest,
                    averaging: Averaging::EGm,
                    not_applicable: Some("post-hoc only".into()),
                    frames: vec![],
                },
                CellRecord {
                    method: Method::Net(Variant::LS),
                    averaging: Averaging::PGm,
                    not_applicable: None,
                    frames: vec![frame(0, 5, Some(0.02)), frame(1, 5, Some(0.03))],
                },
            ],
        }
    }

    #[test]
    fn summary_matches_hand_computation() {
        let r = build_report(&loc());
        let c = r.cell("RF2", "noGM").unwrap();
        assert!((c.inlier_percent.unwrap() - 40.0).abs() < 1e-12);
        // errors {0.01, inf, 0.10}: median 0.10 m
        assert!((c.median_translation_cm.unwrap() - 10.0).abs() < 1e-12);
        assert!((c.correct_percent.unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.failed_frames, 1);
        let e = r.cell("RF2", "eGM").unwrap();
        assert!(e.not_applicable.is_some() && e.inlier_percent.is_none());
        let n = r.cell("fNET-LS", "pGM").unwrap();
        assert!((n.median_translation_cm.unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn table_is_aligned_and_marks_na() {
        let t = render_table(&build_report(&loc()));
        let lines: Vec<&str> = t.lines().skip(1).collect();
        assert!(lines[0].starts_with("method"));
        assert!(lines.iter().any(|l| l.starts_with("RF2") && l.contains("n/a")));
        assert!(!t.contains("D-NET"));
        // every data row ends at the same column as the header
        let w = lines[0].chars().count();
        for l in &lines[2..] {
            assert!(l.chars().count() <= w);
        }
    }
}
