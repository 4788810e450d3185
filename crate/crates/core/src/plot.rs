//! Dependency-free SVG line plots for predicted and reference pulse signals.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::signal::{psd, TimeSeries, DEFAULT_NFFT, HR_BAND_HI, HR_BAND_LO};

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 300.0;
const MARGIN: f64 = 40.0;
const PRED_COLOR: &str = "#d62728";
const GT_COLOR: &str = "#1f77b4";

pub struct Line<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub y: &'a [f64],
}

/// Lines over a shared x axis, each scaled into a common y range.
pub fn line_plot(title: &str, x_label: &str, x: &[f64], lines: &[Line<'_>]) -> Result<String> {
    if x.len() < 2 || lines.iter().any(|l| l.y.len() != x.len()) {
        return Err(Error::param("plot needs at least two x values and matching line lengths"));
    }
    let finite = |v: &f64| v.is_finite();
    if !x.iter().all(finite) || !lines.iter().all(|l| l.y.iter().all(finite)) {
        return Err(Error::InvalidSignal("non-finite value in plot data".into()));
    }
    let (x0, x1) = (x[0], x[x.len() - 1]);
    let ys = lines.iter().flat_map(|l| l.y.iter().copied());
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let px = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{} ({x0:.2} to {x1:.2})</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    for (i, l) in lines.iter().enumerate() {
        let pts: Vec<String> = x.iter().zip(l.y).map(|(&a, &b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            l.color,
            pts.join(" ")
        );
        let ly = 24.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12" fill="{}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            l.color,
            escape(l.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Predicted and reference waveforms against time.
pub fn waveform_svg(title: &str, pred: &TimeSeries, gt: &TimeSeries) -> Result<String> {
    if pred.len() != gt.len() {
        return Err(Error::param("waveforms differ in length"));
    }
    let t: Vec<f64> = (0..pred.len()).map(|i| i as f64 / pred.fs()).collect();
    line_plot(
        title,
        "time, s",
        &t,
        &[
            Line {
                label: "predicted",
                color: PRED_COLOR,
                y: pred.samples(),
            },
            Line {
                label: "reference",
                color: GT_COLOR,
                y: gt.samples(),
            },
        ],
    )
}

/// Power spectra of both signals inside the heart-rate band, each scaled to
/// unit peak, against beats per minute.
pub fn psd_svg(title: &str, pred: &TimeSeries, gt: &TimeSeries) -> Result<String> {
    let band = |ts: &TimeSeries| -> Result<(Vec<f64>, Vec<f64>)> {
        let spec = psd(ts, DEFAULT_NFFT.max(ts.len().next_power_of_two()))?;
        let (f, p): (Vec<f64>, Vec<f64>) = spec
            .freqs
            .iter()
            .zip(&spec.power)
            .filter(|(f, _)| (HR_BAND_LO..=HR_BAND_HI).contains(*f))
            .map(|(&f, &p)| (60.0 * f, p))
            .unzip();
        let peak = p.iter().fold(0.0_f64, |m, &v| m.max(v));
        let p = if peak > 0.0 { p.iter().map(|v| v / peak).collect() } else { p };
        Ok((f, p))
    };
    let (bpm, pp) = band(pred)?;
    let (bpm_gt, pg) = band(gt)?;
    if bpm != bpm_gt {
        return Err(Error::param("signals differ in length or rate"));
    }
    line_plot(
        title,
        "heart rate, bpm",
        &bpm,
        &[
            Line {
                label: "predicted PSD",
                color: PRED_COLOR,
                y: &pp,
            },
            Line {
                label: "reference PSD",
                color: GT_COLOR,
                y: &pg,
            },
        ],
    )
}
