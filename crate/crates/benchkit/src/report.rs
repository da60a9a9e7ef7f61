//! Static reports for experiment records: a machine-readable
//! `report.json` and a self-contained `report.html` with no network
//! assets (styles and scatter plots are inline).

use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentPoint, FrontierQuery, StatSource};
use crate::jsonio;
use crate::registry::Registry;
use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub html: PathBuf,
}

/// Write `report.json` and `report.html` for a record. The frontier is
/// computed when a query is given; an empty record yields a valid report
/// with zero rows.
pub fn emit_report(
    registry: &Registry,
    record_name: &str,
    query: Option<&FrontierQuery>,
    out_dir: &Path,
) -> Result<ReportPaths> {
    let points = experiment::load_points(registry, record_name)?;
    let (frontier_uids, skipped) = match query {
        Some(query) => {
            let outcome = experiment::pareto_frontier(&points, query)?;
            (
                outcome
                    .frontier
                    .iter()
                    .map(|p| p.point_uid.clone())
                    .collect::<Vec<_>>(),
                outcome.skipped_missing_metric,
            )
        }
        None => (Vec::new(), 0),
    };

    let metric_names: BTreeSet<String> = points
        .iter()
        .flat_map(|p| p.characteristics.keys().cloned())
        .collect();
    let mut summary = serde_json::Map::new();
    for name in &metric_names {
        let medians: Vec<f64> = points
            .iter()
            .filter_map(|p| p.characteristics.get(name).map(|s| s.median))
            .collect();
        let mut sorted = medians.clone();
        sorted.sort_by(f64::total_cmp);
        summary.insert(
            name.clone(),
            json!({
                "count": medians.len(),
                "min": sorted.first().copied(),
                "median": if sorted.is_empty() { None } else { Some(experiment::median_of_sorted(&sorted)) },
                "max": sorted.last().copied(),
                "mean": if medians.is_empty() { None } else { Some(medians.iter().sum::<f64>() / medians.len() as f64) },
            }),
        );
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    let report = json!({
        "record": record_name,
        "generated_iso8601": chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string(),
        "point_count": points.len(),
        "points": points.iter().map(|p| serde_json::to_value(p).unwrap()).collect::<Vec<_>>(),
        "query": query.map(|q| serde_json::to_value(q).unwrap()),
        "frontier_uids": frontier_uids,
        "skipped_missing_metric": skipped,
        "metrics_summary": summary,
    });
    jsonio::write_json(&json_path, &report)?;

    let html_path = out_dir.join("report.html");
    let html = render_html(record_name, &points, query, &frontier_uids, &metric_names);
    std::fs::write(&html_path, html).map_err(|e| Error::io_at(&html_path, e))?;
    Ok(ReportPaths {
        json: json_path,
        html: html_path,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_html(
    record_name: &str,
    points: &[ExperimentPoint],
    query: Option<&FrontierQuery>,
    frontier_uids: &[String],
    metric_names: &BTreeSet<String>,
) -> String {
    let frontier: BTreeSet<&str> = frontier_uids.iter().map(String::as_str).collect();
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    let _ = writeln!(html, "<title>Experiment report: {}</title>", escape(record_name));
    html.push_str(
        "<style>\n\
         body { font-family: sans-serif; margin: 2em; color: #222; }\n\
         table { border-collapse: collapse; margin: 1em 0; }\n\
         th, td { border: 1px solid #bbb; padding: 4px 8px; font-size: 13px; text-align: right; }\n\
         th { background: #eee; }\n\
         td.id, td.text { text-align: left; font-family: monospace; }\n\
         tr.frontier { background: #e7f6e7; font-weight: bold; }\n\
         .legend { font-size: 13px; color: #555; }\n\
         svg { border: 1px solid #ccc; margin: 0.5em 1em 0.5em 0; background: #fff; }\n\
         </style>\n</head>\n<body>\n",
    );
    let _ = writeln!(html, "<h1>Experiment report: {}</h1>", escape(record_name));
    let _ = writeln!(
        html,
        "<p class=\"legend\">{} point(s); frontier members highlighted.</p>",
        points.len()
    );

    // Points table.
    html.push_str("<table>\n<tr><th>point</th><th>timestamp</th><th>cmd</th><th>choices</th>");
    for name in metric_names {
        let _ = write!(html, "<th>{} (median)</th>", escape(name));
    }
    html.push_str("<th>validated</th></tr>\n");
    for point in points {
        let class = if frontier.contains(point.point_uid.as_str()) {
            " class=\"frontier\""
        } else {
            ""
        };
        let _ = write!(
            html,
            "<tr{class}><td class=\"id\">{}</td><td class=\"text\">{}</td><td class=\"text\">{}</td><td class=\"text\">{}</td>",
            escape(&point.point_uid),
            escape(&point.timestamp),
            escape(&point.cmd_key),
            escape(&Value::Object(point.choices.clone()).to_string()),
        );
        for name in metric_names {
            match point.characteristics.get(name) {
                Some(stats) => {
                    let _ = write!(html, "<td>{:.6}</td>", stats.median);
                }
                None => html.push_str("<td></td>"),
            }
        }
        let _ = writeln!(
            html,
            "<td>{}</td></tr>",
            point
                .validated
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".to_string())
        );
    }
    html.push_str("</table>\n");

    // One scatter per metric pair in the query.
    if let Some(query) = query {
        for i in 0..query.metrics.len() {
            for j in (i + 1)..query.metrics.len() {
                let x = &query.metrics[i];
                let y = &query.metrics[j];
                html.push_str(&render_scatter(
                    points,
                    &frontier,
                    &x.name,
                    x.source,
                    &y.name,
                    y.source,
                ));
            }
        }
    }
    html.push_str("</body>\n</html>\n");
    html
}

/// Inline SVG scatter of two metrics; frontier points drawn filled.
fn render_scatter(
    points: &[ExperimentPoint],
    frontier: &BTreeSet<&str>,
    x_name: &str,
    x_source: StatSource,
    y_name: &str,
    y_source: StatSource,
) -> String {
    const W: f64 = 420.0;
    const H: f64 = 320.0;
    const PAD: f64 = 45.0;

    let samples: Vec<(&str, f64, f64)> = points
        .iter()
        .filter_map(|p| {
            let x = p.characteristics.get(x_name)?.value(x_source);
            let y = p.characteristics.get(y_name)?.value(y_source);
            Some((p.point_uid.as_str(), x, y))
        })
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<h2>{} vs {}</h2>\n<svg width=\"{W}\" height=\"{H}\" role=\"img\">",
        escape(x_name),
        escape(y_name)
    );
    if samples.is_empty() {
        svg.push_str("<text x=\"20\" y=\"30\" font-size=\"13\">no data</text>\n</svg>\n");
        return svg;
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, x, y) in &samples {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if x_max == x_min {
        x_max += 1.0;
        x_min -= 1.0;
    }
    if y_max == y_min {
        y_max += 1.0;
        y_min -= 1.0;
    }
    let sx = |x: f64| PAD + (x - x_min) / (x_max - x_min) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y_min) / (y_max - y_min) * (H - 2.0 * PAD);

    // Axes with end labels.
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"#333\"/>",
        H - PAD
    );
    let _ = writeln!(
        svg,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"11\">{:.4}</text>",
        H - PAD + 14.0,
        x_min
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{:.4}</text>",
        W - PAD,
        H - PAD + 14.0,
        x_max
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" transform=\"rotate(-90 12 {})\">{}</text>",
        12.0,
        H - PAD,
        H - PAD,
        escape(y_name)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 8.0,
        escape(x_name)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"11\">{:.4}</text>",
        H - PAD,
        y_min
    );
    let _ = writeln!(svg, "<text x=\"{PAD}\" y=\"{PAD}\" font-size=\"11\">{:.4}</text>", y_max);

    for (uid, x, y) in &samples {
        let on_frontier = frontier.contains(uid);
        let (fill, stroke, r) = if on_frontier {
            ("#2e7d32", "#1b5e20", 5.0)
        } else {
            ("#ffffff", "#607d8b", 3.5)
        };
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r}\" fill=\"{fill}\" stroke=\"{stroke}\"><title>{}</title></circle>",
            sx(*x),
            sy(*y),
            escape(uid)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
