//! CSV tables and SVG bar charts of pipeline results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{ConditionSummary, RunManifest};
use crate::stats::{condition_label, fmt_opt, ContrastResult};
use crate::types::{read_json, write_atomic, AlignmentReport};

pub fn figure_paths(out: &Path, _manifest: &RunManifest) -> Vec<PathBuf> {
    let dir = out.join("figures");
    vec![dir.join("comparison.svg"), dir.join("contrasts.svg")]
}

/// Perplexity and alignment per condition.
pub fn comparison_csv(conditions: &[ConditionSummary]) -> String {
    let mut out = String::from("model_tag,scramble_tag,perplexity,mean_correlation,significant_voxels,models\n");
    for c in conditions {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.model_tag,
            c.scramble_tag,
            fmt_opt(c.perplexity),
            fmt_opt(c.mean_correlation),
            c.significant_voxels,
            c.models
        );
    }
    out
}

struct Bar {
    label: String,
    value: f64,
    err: Option<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal vertical bar chart with a zero line and optional error bars.
fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let (w, h) = (120.0 + 70.0 * bars.len().max(1) as f64, 360.0);
    let (left, top, bottom) = (70.0, 40.0, 90.0);
    let plot_h = h - top - bottom;
    let hi = bars.iter().map(|b| b.value + b.err.unwrap_or(0.0)).fold(0.0f64, f64::max);
    let lo = bars.iter().map(|b| b.value - b.err.unwrap_or(0.0)).fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y = |v: f64| top + (hi - v) / span * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<text transform="translate(15,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        escape(y_label)
    );
    for v in [lo, 0.0, hi] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<line x1="{left}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#, w - 20.0, y(0.0), y(0.0));
    for (i, b) in bars.iter().enumerate() {
        let x = left + 20.0 + 70.0 * i as f64;
        let (y0, y1) = (y(b.value.max(0.0)), y(b.value.min(0.0)));
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{y0:.1}" width="40" height="{:.1}" fill="#4a7ab5"/>"##,
            (y1 - y0).max(0.5)
        );
        if let Some(e) = b.err {
            let cx = x + 20.0;
            let _ = writeln!(
                s,
                r#"<line x1="{cx}" x2="{cx}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                y(b.value + e),
                y(b.value - e)
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate({},{}) rotate(40)">{}</text>"#,
            x + 10.0,
            h - bottom + 14.0,
            escape(&b.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_figures(
    out: &Path,
    manifest: &RunManifest,
    conditions: &[ConditionSummary],
    _reports: &[Vec<AlignmentReport>],
) -> Result<()> {
    let paths = figure_paths(out, manifest);
    let dir = paths[0].parent().unwrap();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let bars: Vec<Bar> = conditions
        .iter()
        .map(|c| Bar {
            label: match c.perplexity {
                Some(p) => format!("{} (ppl {p:.1})", condition_label(&c.model_tag, &c.scramble_tag)),
                None => condition_label(&c.model_tag, &c.scramble_tag),
            },
            value: c.mean_correlation.unwrap_or(0.0),
            err: None,
        })
        .collect();
    write_atomic(&paths[0], bar_chart("Brain alignment per condition", "mean heldout r", &bars).as_bytes())?;

    let contrasts: Vec<ContrastResult> = read_json(out.join("contrasts").join("contrasts.json"))?;
    let bars: Vec<Bar> = contrasts
        .iter()
        .flat_map(|c| {
            c.rows.iter().filter_map(move |r| {
                r.mean_percent_change.map(|v| Bar {
                    label: format!("{} [{}]", c.label, r.roi_name),
                    value: v,
                    err: r.sem,
                })
            })
        })
        .collect();
    write_atomic(&paths[1], bar_chart("ROI percent change", "% change", &bars).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_well_formed() {
        let bars = vec![
            Bar {
                label: "a<b".into(),
                value: 0.4,
                err: Some(0.05),
            },
            Bar {
                label: "c".into(),
                value: -0.1,
                err: None,
            },
        ];
        let svg = bar_chart("t", "y", &bars);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn comparison_table_rows() {
        let c = ConditionSummary {
            model_tag: "baseline".into(),
            scramble_tag: "none".into(),
            perplexity: Some(12.5),
            mean_correlation: None,
            significant_voxels: 3,
            models: 8,
        };
        let csv = comparison_csv(&[c]);
        assert_eq!(csv.lines().nth(1).unwrap(), "baseline,none,12.5,,3,8");
    }
}
