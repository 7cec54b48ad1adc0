//! Static SVG emission for the three report figures: accuracy-vs-ratio
//! curves (with dashed dense baselines), annotated transfer heatmaps, and
//! grouped feature-distance bars. Self-contained output, no scripts, no
//! external fonts beyond generic sans-serif.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Result, WorkbenchError};
use crate::report::Row;

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 60.0; // margins
const MR: f64 = 150.0;
const MT: f64 = 30.0;
const MB: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn header(title: &str) -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>
"#,
        ML + (W - ML - MR) / 2.0
    )
}

fn axis_frame(out: &mut String) {
    let _ = writeln!(
        out,
        r##"<rect x="{ML}" y="{MT}" width="{}" height="{}" fill="none" stroke="#333" stroke-width="1"/>"##,
        W - ML - MR,
        H - MT - MB
    );
}

fn x_of(frac: f64) -> f64 {
    ML + frac * (W - ML - MR)
}

fn y_of(frac: f64) -> f64 {
    // SVG y grows downward.
    H - MB - frac * (H - MT - MB)
}

fn text(out: &mut String, x: f64, y: f64, size: u32, anchor: &str, s: &str) {
    let _ = writeln!(
        out,
        r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}">{s}</text>"#
    );
}

/// Accuracy vs remaining ratio. Ticket rows (non-empty ratio) become one
/// series per (provenance, metric); dense-model rows become dashed
/// horizontal baselines.
pub fn ratio_curve(rows: &[Row], title: &str) -> Result<String> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut baselines: BTreeMap<String, f64> = BTreeMap::new();
    for row in rows {
        if row.metric != "natural_acc" && row.metric != "robust_acc" {
            continue;
        }
        let label = format!("{} {}", row.provenance, row.metric);
        if row.provenance.starts_with("dense_") {
            baselines.insert(label, row.value);
        } else if let Ok(ratio) = row.ratio.parse::<f64>() {
            series.entry(label).or_default().push((ratio, row.value));
        }
    }
    if series.is_empty() && baselines.is_empty() {
        return Err(WorkbenchError::PlotSchema(
            "no accuracy rows to plot (need metric natural_acc/robust_acc)".into(),
        ));
    }

    let mut out = header(title);
    axis_frame(&mut out);
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for pts in series.values() {
        for &(x, _) in pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
    }
    if (xmax - xmin).abs() < 1e-12 {
        // Single-ratio case: pad a symmetric window.
        xmin -= 0.05;
        xmax += 0.05;
    }
    let fx = |x: f64| x_of((x - xmin) / (xmax - xmin));
    let fy = |y: f64| y_of(y.clamp(0.0, 1.0));

    // Axis ticks: 0..1 on y, ratio ticks on x.
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        text(&mut out, ML - 8.0, fy(v) + 4.0, 10, "end", &format!("{v:.1}"));
        let _ = writeln!(
            out,
            r##"<line x1="{ML}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd" stroke-width="0.5"/>"##,
            fy(v),
            W - MR,
            fy(v)
        );
        let x = xmin + v * (xmax - xmin);
        text(&mut out, fx(x), H - MB + 16.0, 10, "middle", &format!("{x:.2}"));
    }
    text(&mut out, ML + (W - ML - MR) / 2.0, H - 12.0, 11, "middle", "remaining ratio");
    text(&mut out, 14.0, MT + (H - MT - MB) / 2.0, 11, "middle", "accuracy");

    let mut color = 0usize;
    let mut legend_y = MT + 12.0;
    for (label, mut pts) in series {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite ratios"));
        let c = PALETTE[color % PALETTE.len()];
        color += 1;
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", fx(x), fy(y)))
            .collect();
        if path.len() > 1 {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        for &(x, y) in &pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#,
                fx(x),
                fy(y)
            );
        }
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{c}" stroke-width="1.5"/>"#,
            W - MR + 8.0,
            W - MR + 28.0
        );
        text(&mut out, W - MR + 32.0, legend_y + 3.0, 9, "start", &label);
        legend_y += 14.0;
    }
    for (label, value) in baselines {
        let c = PALETTE[color % PALETTE.len()];
        color += 1;
        let _ = writeln!(
            out,
            r#"<line x1="{ML}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-width="1.5" stroke-dasharray="6,4"/>"#,
            fy(value),
            W - MR,
            fy(value)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{c}" stroke-width="1.5" stroke-dasharray="6,4"/>"#,
            W - MR + 8.0,
            W - MR + 28.0
        );
        text(&mut out, W - MR + 32.0, legend_y + 3.0, 9, "start", &label);
        legend_y += 14.0;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Annotated transfer matrix: attackers as rows, defenders as columns, cell
/// text is the robust accuracy to two decimals (verbatim from the rows).
pub fn transfer_heatmap(rows: &[Row], title: &str) -> Result<String> {
    let cells: Vec<&Row> = rows
        .iter()
        .filter(|r| r.metric == "robust_acc" && !r.attacker.is_empty() && !r.defender.is_empty())
        .collect();
    if cells.is_empty() {
        return Err(WorkbenchError::PlotSchema(
            "no transfer rows to plot (need robust_acc with attacker and defender)".into(),
        ));
    }
    let mut attackers: Vec<String> = Vec::new();
    let mut defenders: Vec<String> = Vec::new();
    for c in &cells {
        if !attackers.contains(&c.attacker) {
            attackers.push(c.attacker.clone());
        }
        if !defenders.contains(&c.defender) {
            defenders.push(c.defender.clone());
        }
    }

    let mut out = header(title);
    let grid_w = W - ML - MR;
    let grid_h = H - MT - MB;
    let cw = grid_w / defenders.len() as f64;
    let ch = grid_h / attackers.len() as f64;
    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        (lo.min(c.value), hi.max(c.value))
    });
    let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };

    for c in &cells {
        let i = attackers.iter().position(|a| *a == c.attacker).expect("known");
        let j = defenders.iter().position(|d| *d == c.defender).expect("known");
        let x = ML + j as f64 * cw;
        let y = MT + i as f64 * ch;
        let t = (c.value - lo) / span;
        // Low accuracy = warm (effective attack), high = cool.
        let r = (235.0 - 180.0 * t) as u32;
        let g = (90.0 + 110.0 * t) as u32;
        let b = (70.0 + 160.0 * t) as u32;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="rgb({r},{g},{b})" stroke="white" stroke-width="1"/>"#
        );
        text(
            &mut out,
            x + cw / 2.0,
            y + ch / 2.0 + 4.0,
            11,
            "middle",
            &format!("{:.2}", c.value),
        );
    }
    for (j, d) in defenders.iter().enumerate() {
        text(
            &mut out,
            ML + j as f64 * cw + cw / 2.0,
            H - MB + 16.0,
            10,
            "middle",
            d,
        );
    }
    for (i, a) in attackers.iter().enumerate() {
        text(
            &mut out,
            ML - 8.0,
            MT + i as f64 * ch + ch / 2.0 + 4.0,
            10,
            "end",
            a,
        );
    }
    text(&mut out, ML + grid_w / 2.0, H - 12.0, 11, "middle", "defender");
    text(&mut out, 14.0, MT + grid_h / 2.0, 11, "middle", "attacker");
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grouped bars: feature distance per noise magnitude, one bar color per
/// model label (provenance).
pub fn distance_bars(rows: &[Row], title: &str) -> Result<String> {
    let bars: Vec<&Row> = rows
        .iter()
        .filter(|r| r.metric == "feature_distance")
        .collect();
    if bars.is_empty() {
        return Err(WorkbenchError::PlotSchema(
            "no feature_distance rows to plot".into(),
        ));
    }
    let mut eps_levels: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    for b in &bars {
        if !eps_levels.contains(&b.eps) {
            eps_levels.push(b.eps.clone());
        }
        if !models.contains(&b.provenance) {
            models.push(b.provenance.clone());
        }
    }
    let vmax = bars.iter().fold(0.0f64, |m, b| m.max(b.value)) * 1.15;
    let vmax = if vmax <= 0.0 { 1.0 } else { vmax };

    let mut out = header(title);
    axis_frame(&mut out);
    let grid_w = W - ML - MR;
    let group_w = grid_w / eps_levels.len() as f64;
    let bar_w = (group_w * 0.8) / models.len() as f64;

    for i in 0..=5 {
        let v = vmax * i as f64 / 5.0;
        let y = y_of(v / vmax);
        text(&mut out, ML - 8.0, y + 4.0, 10, "end", &format!("{v:.2}"));
    }

    for b in &bars {
        let gi = eps_levels.iter().position(|e| *e == b.eps).expect("known");
        let mi = models.iter().position(|m| *m == b.provenance).expect("known");
        let x = ML + gi as f64 * group_w + group_w * 0.1 + mi as f64 * bar_w;
        let y = y_of(b.value / vmax);
        let c = PALETTE[mi % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{c}"/>"#,
            bar_w * 0.9,
            (H - MB) - y
        );
    }
    for (gi, e) in eps_levels.iter().enumerate() {
        let x = ML + gi as f64 * group_w + group_w / 2.0;
        text(&mut out, x, H - MB + 16.0, 10, "middle", &format!("eps {e}"));
    }
    let mut legend_y = MT + 12.0;
    for (mi, m) in models.iter().enumerate() {
        let c = PALETTE[mi % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{c}"/>"#,
            W - MR + 8.0,
            legend_y - 8.0
        );
        text(&mut out, W - MR + 24.0, legend_y + 1.0, 9, "start", m);
        legend_y += 14.0;
    }
    text(&mut out, ML + grid_w / 2.0, H - 12.0, 11, "middle", "noise magnitude");
    text(&mut out, 14.0, MT + (H - MT - MB) / 2.0, 11, "middle", "normalized feature distance");
    out.push_str("</svg>\n");
    Ok(out)
}
