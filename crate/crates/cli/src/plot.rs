//! Static SVG figures: curves and a top-down trajectory overlay.

use std::fmt::Write;

use radarloop::geometry::Trajectory;
use radarloop::loop_verification::Outcome;

use crate::report::QueryRecord;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;

pub fn outcome_color(o: Outcome) -> &'static str {
    match o {
        Outcome::Success => "#2ca02c",
        Outcome::SafeFailureLowConfidence => "#1f77b4",
        Outcome::SafeFailureFalseLow => "#ff7f0e",
        Outcome::DangerousFailure => "#d62728",
    }
}

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#17becf"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }
    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>", W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(f: &Frame, pts: &[(f64, f64)], color: &str, extra: &str) -> String {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y))).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" {extra} points=\"{}\"/>\n",
        coords.join(" ")
    )
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(s, "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", r - l, b - t);
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", f.px(fx), b + 16.0, tick(fx));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", l - 6.0, f.py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 14.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(s: &mut String, items: &[(String, &str)]) {
    let x = W - MARGIN - 156.0;
    let _ = writeln!(
        s,
        "<rect x=\"{x}\" y=\"{}\" width=\"152\" height=\"{}\" fill=\"white\" fill-opacity=\"0.85\" stroke=\"#cccccc\"/>",
        MARGIN + 2.0,
        16.0 * items.len() as f64 + 6.0
    );
    for (i, (name, color)) in items.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let x = W - MARGIN - 150.0;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{color}\"/>", y - 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\">{}</text>", x + 18.0, escape(name));
    }
}

/// Curves on the unit square, e.g. ROC (fpr, tpr) or PR (recall, precision).
pub fn curve_svg(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    let mut s = header(title);
    axes(&mut s, &f, xlabel, ylabel);
    let mut items = Vec::new();
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        s += &polyline(&f, pts, color, "");
        items.push((name.clone(), color));
    }
    legend(&mut s, &items);
    s += "</svg>\n";
    s
}

/// Top-down view of ground truth, odometry and SLAM with every query's
/// decision drawn at its SLAM position in the outcome color; accepted loops
/// also get a line to their candidate.
pub fn trajectory_svg(
    title: &str,
    gt: Option<&Trajectory>,
    odometry: &Trajectory,
    slam: &Trajectory,
    records: &[QueryRecord],
) -> String {
    let xy = |t: &Trajectory| -> Vec<(f64, f64)> { t.poses.iter().map(|p| (p.translation.x, p.translation.y)).collect() };
    let mut all: Vec<(f64, f64)> = xy(odometry);
    all.extend(xy(slam));
    if let Some(g) = gt {
        all.extend(xy(g));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    // equal scale on both axes
    let aspect = (W - 2.0 * MARGIN) / (H - 2.0 * MARGIN);
    let span = ((x1 - x0) / aspect).max(y1 - y0).max(1.0) * 1.08;
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let f = Frame {
        x0: cx - 0.5 * span * aspect,
        x1: cx + 0.5 * span * aspect,
        y0: cy - 0.5 * span,
        y1: cy + 0.5 * span,
    };
    let mut s = header(title);
    axes(&mut s, &f, "x [m]", "y [m]");
    let mut items: Vec<(String, &str)> = Vec::new();
    if let Some(g) = gt {
        s += &polyline(&f, &xy(g), "#999999", "stroke-dasharray=\"5,3\"");
        items.push(("ground truth".into(), "#999999"));
    }
    s += &polyline(&f, &xy(odometry), "#9467bd", "");
    s += &polyline(&f, &xy(slam), "#000000", "");
    items.push(("odometry".into(), "#9467bd"));
    items.push(("slam".into(), "#000000"));
    let slam_xy = xy(slam);
    for r in records {
        let (Some(&(qx, qy)), Some(&(cx, cy))) = (slam_xy.get(r.query), slam_xy.get(r.candidate)) else {
            continue;
        };
        let color = outcome_color(r.outcome);
        if r.accepted {
            let _ = writeln!(
                s,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"0.8\"/>",
                f.px(qx),
                f.py(qy),
                f.px(cx),
                f.py(cy)
            );
        }
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>", f.px(qx), f.py(qy));
    }
    for o in [
        Outcome::Success,
        Outcome::SafeFailureLowConfidence,
        Outcome::SafeFailureFalseLow,
        Outcome::DangerousFailure,
    ] {
        items.push((o.as_str().to_string(), outcome_color(o)));
    }
    legend(&mut s, &items);
    s += "</svg>\n";
    s
}
