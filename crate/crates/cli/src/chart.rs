//! Success rate against N as a plain SVG line chart.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use widescale::experiment::TaskRecord;
use widescale::judge::Strategy;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#555555"];

/// One line per strategy plus a dashed Pass@N line.
pub fn series(records: &[TaskRecord]) -> Vec<(String, Vec<(usize, f64)>)> {
    let mut by_strategy: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    let mut pass: BTreeMap<usize, BTreeMap<&str, bool>> = BTreeMap::new();
    for r in records {
        let e = by_strategy
            .entry(strategy_label(r.strategy).to_string())
            .or_default()
            .entry(r.n)
            .or_default();
        e.0 += r.chosen_reward as f64;
        e.1 += 1;
        pass.entry(r.n).or_default().insert(&r.task_id, r.rewards.contains(&1));
    }
    let mut out: Vec<(String, Vec<(usize, f64)>)> = by_strategy
        .into_iter()
        .map(|(name, points)| (name, points.into_iter().map(|(n, (sum, k))| (n, sum / k as f64)).collect()))
        .collect();
    if !pass.is_empty() {
        let points = pass
            .into_iter()
            .map(|(n, tasks)| (n, tasks.values().filter(|&&hit| hit).count() as f64 / tasks.len() as f64))
            .collect();
        out.push(("pass@N".to_string(), points));
    }
    out
}

fn strategy_label(s: Strategy) -> &'static str {
    match s {
        Strategy::Mcq => "mcq",
        Strategy::IterativePairwise => "iterative",
        Strategy::IndependentRank => "independent",
    }
}

pub fn render_svg(records: &[TaskRecord]) -> String {
    let lines = series(records);
    let ns: BTreeSet<usize> = lines.iter().flat_map(|(_, p)| p.iter().map(|&(n, _)| n)).collect();
    let (lo, hi) = (
        *ns.first().unwrap_or(&1) as f64,
        *ns.last().unwrap_or(&1) as f64,
    );
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |n: usize| {
        if hi > lo {
            LEFT + (n as f64 - lo) / (hi - lo) * plot_w
        } else {
            LEFT + plot_w / 2.0
        }
    };
    let y = |v: f64| TOP + (1.0 - v) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{yy:.2}" x2="{x2:.2}" y2="{yy:.2}" stroke="#dddddd"/><text x="{tx:.2}" y="{ty:.2}" text-anchor="end">{v:.2}</text>"##,
            yy = y(v),
            x2 = LEFT + plot_w,
            tx = LEFT - 6.0,
            ty = y(v) + 4.0,
        );
    }
    for &n in &ns {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{n}</text>"#,
            x(n),
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">N</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">success rate</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, (name, points)) in lines.iter().enumerate() {
        let dashed = name == "pass@N";
        let color = if dashed { COLORS[3] } else { COLORS[i % 3] };
        let path: Vec<String> = points.iter().map(|&(n, v)| format!("{:.2},{:.2}", x(n), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{} points="{}"/>"#,
            if dashed { r#" stroke-dasharray="6 4""# } else { "" },
            path.join(" ")
        );
        for &(n, v) in points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, x(n), y(v));
        }
        let ly = TOP + 16.0 * i as f64 + 8.0;
        let lx = WIDTH - RIGHT + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{name}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
