//! Static SVG figures. Output depends only on the input rows, so the same
//! CSV always renders to the same bytes.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::neural::TrainRecord;
use crate::scaling::{fit_power_law, PowerLawFit, ScalingPoint, SweepRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

/// Linear map from a data interval onto a pixel interval.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self { lo, hi, px_lo, px_hi }
    }

    fn px(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn header(out: &mut String, title: &str, source_digest: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <desc>source sha256 {source_digest}</desc>\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        WIDTH / 2.0
    );
}

fn frame(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = write!(
        out,
        "<path d=\"M{x0:.1} {y1:.1} V{y0:.1} H{x1:.1}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 14.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
    );
}

fn x_tick(out: &mut String, px: f64, label: &str) {
    let y = HEIGHT - BOTTOM;
    let _ = writeln!(
        out,
        "<line x1=\"{px:.1}\" y1=\"{y:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\
         <text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>",
        y + 5.0,
        y + 19.0
    );
}

fn y_tick(out: &mut String, py: f64, label: &str) {
    let _ = writeln!(
        out,
        "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{LEFT:.1}\" y2=\"{py:.1}\" stroke=\"black\"/>\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>",
        LEFT - 5.0,
        LEFT - 8.0,
        py + 4.0
    );
}

fn point(out: &mut String, x: f64, y: f64) {
    let _ = writeln!(
        out,
        "<circle class=\"point\" cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"steelblue\"/>"
    );
}

/// Test loss against epoch on linear axes.
pub fn loss_curve_svg(history: &[TrainRecord], source_digest: &str) -> Result<String> {
    if history.is_empty() {
        return Err(Error::InvalidConfig("metrics CSV has no rows".into()));
    }
    let (first, last) = (history[0].epoch as f64, history[history.len() - 1].epoch as f64);
    let lo = history.iter().map(|r| r.test_loss).fold(f64::INFINITY, f64::min);
    let hi = history.iter().map(|r| r.test_loss).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let xa = Axis::new(first, last, LEFT + 10.0, WIDTH - RIGHT - 10.0);
    let ya = Axis::new(lo - pad, hi + pad, HEIGHT - BOTTOM, TOP);

    let mut out = String::new();
    header(&mut out, "Test loss by epoch", source_digest);
    frame(&mut out, "epoch", "test loss (nats)");
    let n_ticks = 5;
    for i in 0..=n_ticks {
        let v = ya.lo + (ya.hi - ya.lo) * i as f64 / n_ticks as f64;
        y_tick(&mut out, ya.px(v), &format!("{v:.3}"));
    }
    let step = ((last - first) / 6.0).ceil().max(1.0);
    let mut e = first;
    while e <= last + 1e-9 {
        x_tick(&mut out, xa.px(e), &format!("{e:.0}"));
        e += step;
    }
    let pts: Vec<String> = history
        .iter()
        .map(|r| format!("{:.1},{:.1}", xa.px(r.epoch as f64), ya.px(r.test_loss)))
        .collect();
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\"/>",
        pts.join(" ")
    );
    for r in history {
        point(&mut out, xa.px(r.epoch as f64), ya.px(r.test_loss));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn decade_ticks(lo: f64, hi: f64) -> Vec<f64> {
    (lo.floor() as i32..=hi.ceil() as i32)
        .map(f64::from)
        .filter(|&e| e >= lo - 1e-9 && e <= hi + 1e-9)
        .collect()
}

fn sci(log10: f64) -> String {
    let v = 10f64.powf(log10);
    if (0.01..10_000.0).contains(&v) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// Sweep points on log-log axes with the fitted power law and its exponent.
pub fn loglog_svg(rows: &[SweepRow], x_label: &str, source_digest: &str) -> Result<(String, PowerLawFit)> {
    if rows.is_empty() {
        return Err(Error::InvalidConfig("sweep CSV has no rows".into()));
    }
    let points: Vec<ScalingPoint> = rows.iter().map(ScalingPoint::from).collect();
    let fit = fit_power_law(&points)?;
    let lx: Vec<f64> = points.iter().map(|p| p.x.log10()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.y.log10()).collect();
    let (xlo, xhi) = (
        lx.iter().copied().fold(f64::INFINITY, f64::min),
        lx.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let fit_lo = fit.log10_a + fit.b * xlo;
    let fit_hi = fit.log10_a + fit.b * xhi;
    let ylo = ly.iter().copied().chain([fit_lo, fit_hi]).fold(f64::INFINITY, f64::min);
    let yhi = ly.iter().copied().chain([fit_lo, fit_hi]).fold(f64::NEG_INFINITY, f64::max);
    let xpad = ((xhi - xlo) * 0.05).max(0.02);
    let ypad = ((yhi - ylo) * 0.08).max(0.01);
    let xa = Axis::new(xlo - xpad, xhi + xpad, LEFT + 10.0, WIDTH - RIGHT - 10.0);
    let ya = Axis::new(ylo - ypad, yhi + ypad, HEIGHT - BOTTOM, TOP);

    let mut out = String::new();
    header(&mut out, "Minimum test loss (log-log)", source_digest);
    frame(&mut out, x_label, "test loss (nats)");
    let xt = decade_ticks(xa.lo, xa.hi);
    let xt = if xt.len() >= 2 { xt } else { vec![xlo, xhi] };
    for t in xt {
        x_tick(&mut out, xa.px(t), &sci(t));
    }
    let yt = decade_ticks(ya.lo, ya.hi);
    let yt = if yt.len() >= 2 { yt } else { vec![ylo, yhi] };
    for t in yt {
        y_tick(&mut out, ya.px(t), &sci(t));
    }
    let _ = writeln!(
        out,
        "<line class=\"fit\" x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"firebrick\" stroke-dasharray=\"6 4\"/>",
        xa.px(xlo),
        ya.px(fit_lo),
        xa.px(xhi),
        ya.px(fit_hi)
    );
    for (x, y) in lx.iter().zip(&ly) {
        point(&mut out, xa.px(*x), ya.px(*y));
    }
    let _ = writeln!(
        out,
        "<text class=\"slope\" x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"firebrick\">slope {:.3} (r² {:.3})</text>",
        WIDTH - RIGHT - 8.0,
        TOP + 16.0,
        fit.b,
        fit.r2
    );
    out.push_str("</svg>\n");
    Ok((out, fit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(n: usize) -> Vec<TrainRecord> {
        (1..=n)
            .map(|e| TrainRecord {
                epoch: e,
                train_loss: 3.0 / e as f64,
                test_loss: 3.2 / (e as f64).sqrt(),
                wall_time_s: e as f64,
            })
            .collect()
    }

    #[test]
    fn loss_curve_has_one_point_per_epoch() {
        let svg = loss_curve_svg(&history(30), "x").unwrap();
        assert_eq!(svg.matches("class=\"point\"").count(), 30);
        assert_eq!(svg, loss_curve_svg(&history(30), "x").unwrap());
        assert!(loss_curve_svg(&[], "x").is_err());
    }

    #[test]
    fn loglog_labels_the_fitted_slope() {
        let rows: Vec<SweepRow> = [(1.0, 3.0), (2.0, 2.5), (4.0, 2.2)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| SweepRow {
                run_id: format!("r{i}"),
                x: x * 2_097_152.0,
                y,
                epochs: 1,
                wall_time_s: 0.0,
            })
            .collect();
        let (svg, fit) = loglog_svg(&rows, "tokens", "x").unwrap();
        assert!(svg.contains(&format!("slope {:.3}", fit.b)));
        assert_eq!(svg.matches("class=\"point\"").count(), 3);
        assert_eq!(svg.matches("class=\"fit\"").count(), 1);
    }
}
