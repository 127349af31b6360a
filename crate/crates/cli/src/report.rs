//! Metric tables (CSV and aligned text) and training-curve outputs.
//!
//! Metrics CSV schema, one row per case, values as fractions in `[0, 1]`:
//!
//! ```text
//! case,bone_pixel_accuracy,bone_iou,bone_dice,nerve_pixel_accuracy,nerve_iou,nerve_dice
//! ```

use std::fmt::Write as _;

use ctseg::objective::{aggregate_mean, ClassMetrics, MetricResult};
use ctseg::pipeline::TrainHistory;

use crate::CliError;

pub const METRICS_CSV_HEADER: &str =
    "case,bone_pixel_accuracy,bone_iou,bone_dice,nerve_pixel_accuracy,nerve_iou,nerve_dice";

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRow {
    pub case: String,
    pub metrics: MetricResult,
}

pub fn metrics_to_csv(rows: &[CaseRow]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        let (b, n) = (&r.metrics.bone, &r.metrics.nerve);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.case, b.pixel_accuracy, b.iou, b.dice, n.pixel_accuracy, n.iou, n.dice
        );
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<CaseRow>, CliError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_CSV_HEADER => {}
        _ => return Err(CliError::Data(format!("line 1: expected header `{METRICS_CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(CliError::Data(format!("line {}: expected 7 fields, found {}", i + 1, f.len())));
        }
        let mut v = [0.0f64; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = f[k + 1]
                .parse()
                .ok()
                .filter(|x: &f64| (0.0..=1.0).contains(x))
                .ok_or_else(|| CliError::Data(format!("line {}: field {} is not a value in [0, 1]", i + 1, k + 2)))?;
        }
        let cm = |o: usize| ClassMetrics {
            pixel_accuracy: v[o],
            iou: v[o + 1],
            dice: v[o + 2],
        };
        rows.push(CaseRow {
            case: f[0].to_string(),
            metrics: MetricResult {
                bone: cm(0),
                nerve: cm(3),
                counts: None,
            },
        });
    }
    if rows.is_empty() {
        return Err(CliError::Data("metrics CSV has no rows".into()));
    }
    Ok(rows)
}

/// The three per-class tables with one column per case plus the mean,
/// values in percent with one decimal.
pub fn metric_tables(rows: &[CaseRow]) -> Result<String, CliError> {
    let mean = aggregate_mean(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>())?;
    let tables: [(&str, fn(&ClassMetrics) -> f64); 3] = [
        ("Pixel accuracy (%)", |c| c.pixel_accuracy),
        ("IoU (%)", |c| c.iou),
        ("Dice score (%)", |c| c.dice),
    ];
    let mut out = String::new();
    for (title, pick) in tables {
        let mut header = vec![title.to_string()];
        header.extend(rows.iter().map(|r| r.case.clone()));
        header.push("mean".into());
        let mut table = vec![header];
        for (name, get) in [
            ("bone", (|m: &MetricResult| m.bone) as fn(&MetricResult) -> ClassMetrics),
            ("nerve", |m: &MetricResult| m.nerve),
        ] {
            let mut line = vec![name.to_string()];
            line.extend(rows.iter().map(|r| format!("{:.1}", 100.0 * pick(&get(&r.metrics)))));
            line.push(format!("{:.1}", 100.0 * pick(&get(&mean))));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        for r in &table {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out.push('\n');
    }
    Ok(out)
}

/// Validation curve rows: `step,iteration,dice_bone,dice_nerve,dice_mean,best_mean`.
pub fn dice_curve_csv(history: &TrainHistory) -> String {
    let mut s = String::from("step,iteration,dice_bone,dice_nerve,dice_mean,best_mean\n");
    for (i, (v, best)) in history.validations.iter().zip(history.best_dice_envelope()).enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            i + 1,
            v.iteration,
            v.dice[0],
            v.dice[1],
            v.mean_dice(),
            best
        );
    }
    s
}

/// Loss averaged over consecutive buckets so that at most `max_points` remain.
pub fn downsample_loss(history: &TrainHistory, max_points: usize) -> Vec<(usize, f64)> {
    let n = history.iterations.len();
    let bucket = n.div_ceil(max_points.max(1)).max(1);
    history
        .iterations
        .chunks(bucket)
        .map(|c| (c[c.len() - 1].iteration, c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64))
        .collect()
}

pub fn loss_curve_csv(points: &[(usize, f64)]) -> String {
    let mut s = String::from("iteration,mean_loss\n");
    for (it, l) in points {
        let _ = writeln!(s, "{it},{l}");
    }
    s
}

/// A plain line chart as a standalone SVG document.
pub fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[(&str, &str, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    let pts = series.iter().flat_map(|s| s.2.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        W / 2.0,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
        b = H - M,
        r = W - M,
    );
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            M - 4.0,
            y + 3.0,
            fmt_tick(v)
        );
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            H - M + 14.0,
            fmt_tick(v)
        );
    }
    for (i, (name, colour, points)) in series.iter().enumerate() {
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = M + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{colour}\">{name}</text>",
            W - M - 90.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctseg::pipeline::{IterationRecord, ValidationEvent};

    fn row(case: &str, bone_dice: f64, nerve_dice: f64) -> CaseRow {
        CaseRow {
            case: case.into(),
            metrics: MetricResult {
                bone: ClassMetrics {
                    pixel_accuracy: 1.0,
                    iou: 0.5,
                    dice: bone_dice,
                },
                nerve: ClassMetrics {
                    pixel_accuracy: 0.25,
                    iou: 0.0,
                    dice: nerve_dice,
                },
                counts: None,
            },
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("a", 0.9, 0.7), row("b", 0.125, 1.0)];
        assert_eq!(metrics_from_csv(&metrics_to_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let e = metrics_from_csv(&format!("{METRICS_CSV_HEADER}\na,1,1,1,1,1,1\nb,1,1,2,1,1,1\n")).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert!(metrics_from_csv(&format!("{METRICS_CSV_HEADER}\n")).is_err());
        assert!(metrics_from_csv("x\n").is_err());
    }

    #[test]
    fn single_case_mean_equals_case() {
        let t = metric_tables(&[row("7", 0.9234, 0.5)]).unwrap();
        let dice_line = t.lines().find(|l| l.starts_with("bone") && l.contains("92.3")).unwrap();
        assert_eq!(dice_line.split_whitespace().collect::<Vec<_>>(), ["bone", "92.3", "92.3"]);
    }

    #[test]
    fn curves() {
        let mut h = TrainHistory::default();
        for i in 1..=10 {
            h.iterations.push(IterationRecord {
                iteration: i,
                epoch: 0,
                loss: i as f64,
                validation: None,
                checkpointed: false,
            });
        }
        for (i, d) in [(5, 0.4), (10, 0.2)] {
            h.validations.push(ValidationEvent {
                iteration: i,
                epoch: 0,
                case_ids: vec![],
                dice: [d, d],
            });
        }
        let csv = dice_curve_csv(&h);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().last().unwrap().ends_with(",0.2,0.4"));
        assert_eq!(downsample_loss(&h, 3), vec![(4, 2.5), (8, 6.5), (10, 9.5)]);
        let svg = svg_chart("t", "x", "y", &[("a", "red", vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
