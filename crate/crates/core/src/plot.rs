//! Static SVG line plots of endmember spectra.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Spectra as columns of `values` (`bands x series`) with one name each.
#[derive(Debug, Clone, Copy)]
pub struct Series<'a> {
    pub names: &'a [String],
    pub values: &'a Matrix,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn check(s: &Series, what: &str) -> Result<()> {
    let (bands, k) = s.values.shape();
    if bands == 0 || k == 0 {
        return Err(Error::invalid(format!("{what} spectra are empty")));
    }
    if s.names.len() != k {
        return Err(Error::invalid(format!("{what}: {} names for {k} columns", s.names.len())));
    }
    if !s.values.is_finite() {
        return Err(Error::NonFinite(format!("{what} spectra")));
    }
    Ok(())
}

/// "Nice" tick step covering `span` with about `count` intervals.
fn tick_step(span: f64, count: f64) -> f64 {
    let raw = span / count;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// One polyline per column, band index on x and reflectance on y. Truth
/// spectra, when given, are drawn dashed in the color of the matching
/// estimated column. Output bytes depend only on the input.
pub fn endmember_svg(estimated: Series, truth: Option<Series>, title: &str) -> Result<String> {
    check(&estimated, "estimated")?;
    let (bands, k) = estimated.values.shape();
    if let Some(t) = &truth {
        check(t, "truth")?;
        if t.values.cols() != k {
            return Err(Error::invalid(format!(
                "truth has {} endmembers, estimate has {k}",
                t.values.cols()
            )));
        }
        if t.values.rows() != bands {
            return Err(Error::invalid(format!(
                "truth has {} bands, estimate has {bands}",
                t.values.rows()
            )));
        }
    }

    let mut y_min = estimated.values.min().min(0.0);
    let mut y_max = estimated.values.max();
    if let Some(t) = &truth {
        y_min = y_min.min(t.values.min());
        y_max = y_max.max(t.values.max());
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    let y_step = tick_step(y_max - y_min, 5.0);
    let y_lo = (y_min / y_step).floor() * y_step;
    let y_hi = (y_max / y_step).ceil() * y_step;
    let x_hi = (bands.max(2) - 1) as f64;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |b: f64| LEFT + b / x_hi * plot_w;
    let py = |v: f64| TOP + (y_hi - v) / (y_hi - y_lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );

    // Axes and ticks.
    let _ = writeln!(
        s,
        r#"<path d="M{:.2},{:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        LEFT,
        TOP,
        TOP + plot_h,
        LEFT + plot_w
    );
    let n_y = ((y_hi - y_lo) / y_step).round() as usize;
    for t in 0..=n_y {
        let v = y_lo + t as f64 * y_step;
        let y = py(v);
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>",
            LEFT,
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            trim_number(v)
        );
    }
    let x_step = tick_step(x_hi, 8.0).max(1.0);
    let mut b = 0.0;
    while b <= x_hi + 1e-9 {
        let x = px(b);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h + 18.0,
            trim_number(b)
        );
        b += x_step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">band index</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">reflectance</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    let polyline = |s: &mut String, m: &Matrix, col: usize, color: &str, dashed: bool, name: &str| {
        let pts: Vec<String> = (0..m.rows())
            .map(|r| format!("{:.2},{:.2}", px(r as f64), py(m[(r, col)])))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
            escape(name),
            pts.join(" ")
        );
    };
    let mut legend: Vec<(String, &str, bool)> = Vec::new();
    for c in 0..k {
        let color = PALETTE[c % PALETTE.len()];
        polyline(&mut s, estimated.values, c, color, false, &estimated.names[c]);
        legend.push((estimated.names[c].clone(), color, false));
        if let Some(t) = &truth {
            let name = format!("{} (truth)", t.names[c]);
            polyline(&mut s, t.values, c, color, true, &name);
            legend.push((name, color, true));
        }
    }

    let lx = WIDTH - RIGHT + 16.0;
    for (i, (name, color, dashed)) in legend.iter().enumerate() {
        let y = TOP + 8.0 + 18.0 * i as f64;
        let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 24.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 30.0, y + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn trim_number(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}
