//! Text summary and SVG chart of tradeoff curves.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::harness::{accuracy_at_flops, matched_budgets, tradeoff_curves, Protocol, RunRecord, TradeoffCurve};

pub const DENSE_METHOD: &str = "dense_finetune";
const SHARED_BUDGETS: usize = 3;

fn panels(curves: &[TradeoffCurve]) -> BTreeMap<(Protocol, String), Vec<&TradeoffCurve>> {
    let mut out: BTreeMap<(Protocol, String), Vec<&TradeoffCurve>> = BTreeMap::new();
    for c in curves {
        out.entry((c.protocol, c.kind.clone())).or_default().push(c);
    }
    out
}

fn signed(x: f64) -> String {
    format!("{x:+.4}")
}

/// Per (protocol, kind) table: best accuracy of each method, accuracy at
/// budgets every method covers, and the margin over dense finetuning at
/// the smallest of those budgets.
pub fn report(records: &[RunRecord]) -> String {
    let curves = tradeoff_curves(records);
    if curves.is_empty() {
        return "no records\n".into();
    }
    let mut out = String::new();
    for ((protocol, kind), group) in panels(&curves) {
        let _ = writeln!(out, "== {} / {} ==", protocol.as_str(), kind);
        let budgets = matched_budgets(&group, SHARED_BUDGETS).unwrap_or_default();
        let width = group.iter().map(|c| c.method.len()).max().unwrap_or(0).max(6);
        let _ = write!(out, "{:<width$}  {:>6}", "method", "best");
        for b in &budgets {
            let _ = write!(out, "  {:>9}", format!("@{b:.2e}"));
        }
        let _ = writeln!(out, "  {:>10}", "low_margin");
        let at = |c: &TradeoffCurve, b: f64| accuracy_at_flops(c, b).ok();
        let dense_low = group
            .iter()
            .find(|c| c.method == DENSE_METHOD)
            .zip(budgets.first())
            .and_then(|(c, &b)| at(c, b));
        for c in &group {
            let best = c.points.iter().map(|p| p.mean_accuracy).fold(f64::NAN, f64::max);
            let _ = write!(out, "{:<width$}  {:>6.4}", c.method, best);
            for &b in &budgets {
                let cell = at(c, b).map_or("-".into(), |a| format!("{a:.4}"));
                let _ = write!(out, "  {cell:>9}");
            }
            let margin = match (budgets.first().and_then(|&b| at(c, b)), dense_low) {
                (Some(a), Some(d)) => signed(a - d),
                _ => "-".into(),
            };
            let _ = writeln!(out, "  {margin:>10}");
        }
        if budgets.is_empty() {
            let _ = writeln!(out, "(no FLOP range shared by every method)");
        }
        out.push('\n');
    }
    out
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 50.0;
const MARGIN_B: f64 = 40.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_R: f64 = 16.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with one panel per (kind, protocol), log-scaled FLOPs on x,
/// accuracy on y and one series per method. Zero-FLOP points are skipped.
pub fn curves_svg(curves: &[TradeoffCurve]) -> String {
    let panels = panels(curves);
    let kinds: Vec<String> = {
        let mut k: Vec<String> = curves.iter().map(|c| c.kind.clone()).collect();
        k.sort();
        k.dedup();
        k
    };
    let protocols: Vec<Protocol> = {
        let mut p: Vec<Protocol> = curves.iter().map(|c| c.protocol).collect();
        p.sort();
        p.dedup();
        p
    };
    let mut methods: Vec<&str> = curves.iter().map(|c| c.method.as_str()).collect();
    methods.sort();
    methods.dedup();
    let colour = |m: &str| PALETTE[methods.iter().position(|x| *x == m).unwrap_or(0) % PALETTE.len()];

    let legend_h = 18.0 * methods.len() as f64 + 10.0;
    let width = PANEL_W * kinds.len().max(1) as f64;
    let height = PANEL_H * protocols.len().max(1) as f64 + legend_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);

    for (row, protocol) in protocols.iter().enumerate() {
        for (col, kind) in kinds.iter().enumerate() {
            let Some(group) = panels.get(&(*protocol, kind.clone())) else { continue };
            let ox = col as f64 * PANEL_W;
            let oy = row as f64 * PANEL_H;
            let (x0, x1) = (ox + MARGIN_L, ox + PANEL_W - MARGIN_R);
            let (y0, y1) = (oy + PANEL_H - MARGIN_B, oy + MARGIN_T);
            let xs = group.iter().flat_map(|c| c.points.iter()).map(|p| p.flops).filter(|f| *f > 0.0);
            let (lo, hi) = xs.fold((f64::INFINITY, 0.0f64), |(l, h), f| (l.min(f), h.max(f)));
            let (llo, lhi) = if lo.is_finite() && hi > lo {
                (lo.log10(), hi.log10())
            } else if lo.is_finite() {
                (lo.log10() - 0.5, lo.log10() + 0.5)
            } else {
                (0.0, 1.0)
            };
            let px = |f: f64| x0 + (f.log10() - llo) / (lhi - llo) * (x1 - x0);
            let py = |a: f64| y0 + a.clamp(0.0, 1.0) * (y1 - y0);

            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-weight="bold">{} / {}</text>"#,
                (x0 + x1) / 2.0,
                oy + 15.0,
                protocol.as_str(),
                esc(kind)
            );
            let _ = writeln!(
                s,
                r#"<polyline points="{x0:.1},{y1:.1} {x0:.1},{y0:.1} {x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
            );
            for tick in 0..=4 {
                let a = tick as f64 / 4.0;
                let y = py(a);
                let _ = writeln!(
                    s,
                    r##"<line x1="{:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{a:.2}</text>"##,
                    x0,
                    x0 - 4.0,
                    y + 4.0
                );
            }
            for decade in llo.ceil() as i64..=lhi.floor() as i64 {
                let x = px(10f64.powi(decade as i32));
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">1e{decade}</text>"#,
                    y0 + 4.0,
                    y0 + 16.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">training FLOPs (log)</text>"#,
                (x0 + x1) / 2.0,
                y0 + 32.0
            );
            for c in group {
                let pts: Vec<String> = c
                    .points
                    .iter()
                    .filter(|p| p.flops > 0.0)
                    .map(|p| format!("{:.1},{:.1}", px(p.flops), py(p.mean_accuracy)))
                    .collect();
                if pts.is_empty() {
                    continue;
                }
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                    pts.join(" "),
                    colour(&c.method)
                );
            }
        }
    }

    let ly = PANEL_H * protocols.len().max(1) as f64;
    for (i, m) in methods.iter().enumerate() {
        let y = ly + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{MARGIN_L}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="3"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            MARGIN_L + 24.0,
            colour(m),
            MARGIN_L + 30.0,
            y + 4.0,
            esc(m)
        );
    }
    s.push_str("</svg>\n");
    s
}
