//! Learning-curve chart and summary table over run logs.

use std::fmt::Write as _;

use cless_core::pipeline::csv_field;
use cless_core::trainer::{RunLog, StopReason};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// A run log with the name shown in the legend.
pub struct NamedLog {
    pub name: String,
    pub log: RunLog,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Dev AP_micro against optimizer steps, one polyline per log.
pub fn curves_svg(logs: &[NamedLog]) -> String {
    let max_step = logs
        .iter()
        .flat_map(|l| l.log.records.iter().map(|r| r.step))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let max_ap = logs
        .iter()
        .flat_map(|l| l.log.records.iter().map(|r| r.ap_micro_dev))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let y_top = if max_ap > 0.0 { (max_ap * 10.0).ceil() / 10.0 } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |step: f64| LEFT + step / max_step * plot_w;
    let y = |ap: f64| TOP + (1.0 - ap / y_top) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (LEFT, LEFT + plot_w, TOP + plot_h, TOP);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = y_top * i as f64 / 5.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{yy:.2}" x2="{x1}" y2="{yy:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            x0 - 6.0,
            yy + 4.0
        );
        let step = max_step * i as f64 / 5.0;
        let xx = x(step);
        let _ = writeln!(
            s,
            r#"<text x="{xx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 18.0,
            step.round()
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">optimizer steps</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">dev AP micro</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, l) in logs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = l
            .log
            .records
            .iter()
            .filter(|r| r.ap_micro_dev.is_finite())
            .map(|r| format!("{:.2},{:.2}", x(r.step as f64), y(r.ap_micro_dev)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = x1 + 16.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&l.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub const SUMMARY_HEADER: &str =
    "run,mode,evaluations,best_step,best_epoch,best_dev_ap_micro,best_dev_ap_macro,last_step,stop_reason";

pub fn summary_csv(logs: &[NamedLog]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for l in logs {
        let best = l.log.best_record();
        let opt = |f: fn(&cless_core::trainer::EvalRecord) -> String| best.map_or(String::new(), f);
        let stop = match l.log.stop_reason {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&l.name),
            l.log.mode,
            l.log.records.len(),
            opt(|r| r.step.to_string()),
            opt(|r| r.epoch.to_string()),
            opt(|r| r.ap_micro_dev.to_string()),
            opt(|r| r.ap_macro_dev.to_string()),
            l.log.records.last().map_or(0, |r| r.step),
            stop
        );
    }
    out
}
