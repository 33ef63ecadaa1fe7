//! CSV artifacts, their schema validator, and plain SVG / gnuplot charts.
//!
//! Numbers are written with 9 significant digits; infinite radii are written
//! as `inf` and abstentions as `ABSTAIN`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::analysis::{ClosenessTrace, StudyRow};
use crate::certify::{CertificationResult, CurvePoint};
use crate::engine::RoundTrace;
use crate::error::{CrflError, Result};

pub const ABSTAIN: &str = "ABSTAIN";
pub const INF: &str = "inf";

pub const SAMPLE_HEADER: [&str; 8] = [
    "sample_id",
    "true_label",
    "prediction",
    "p_hat_A",
    "p_hat_B",
    "p_A_lower",
    "p_B_upper",
    "rad",
];
pub const CURVE_HEADER: [&str; 3] = ["r", "certified_accuracy", "certified_rate"];
pub const TRACE_HEADER: [&str; 5] = [
    "round",
    "pre_clip_norm",
    "post_clip_norm",
    "noise_seed",
    "effective_weights",
];
pub const CLOSENESS_HEADER: [&str; 3] = ["t", "distance", "bound"];
pub const STUDY_HEADER: [&str; 4] = ["ratio", "T", "rad", "saturated"];
pub const SWEEP_HEADER: [&str; 4] = ["axis_value", "r", "certified_accuracy", "certified_rate"];
pub const SWEEP_SUMMARY_HEADER: [&str; 6] = [
    "axis_value",
    "critical_radius",
    "clean_accuracy",
    "smoothed_accuracy",
    "attack_success_rate",
    "certified_samples",
];

/// `x` with 9 significant digits, `%g` style: plain notation for moderate
/// exponents, scientific otherwise, trailing zeros dropped.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 {
            INF.into()
        } else {
            format!("-{INF}")
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let s = format!("{x:.8e}");
        let (mantissa, e) = s.split_once('e').expect("scientific format");
        format!("{}e{e}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn parse_num(field: &str) -> Option<f64> {
    match field {
        INF => Some(f64::INFINITY),
        _ => field.parse::<f64>().ok().filter(|v| !v.is_nan()),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CrflError::io(dir, e))?;
    }
    Ok(())
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CrflError::io(path, e))
}

pub fn write_samples_csv(path: &Path, results: &[CertificationResult]) -> Result<()> {
    write_rows(
        path,
        &SAMPLE_HEADER,
        results.iter().map(|c| {
            vec![
                c.sample_id.to_string(),
                c.true_label.to_string(),
                c.prediction
                    .map_or_else(|| ABSTAIN.to_string(), |p| p.to_string()),
                fmt_num(c.p_hat_a),
                fmt_num(c.p_hat_b),
                fmt_num(c.p_a_lower),
                fmt_num(c.p_b_upper),
                fmt_num(c.rad),
            ]
        }),
    )
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    write_rows(
        path,
        &CURVE_HEADER,
        curve.iter().map(|p| {
            vec![
                fmt_num(p.r),
                fmt_num(p.certified_accuracy),
                fmt_num(p.certified_rate),
            ]
        }),
    )
}

pub fn write_trace_csv(path: &Path, traces: &[RoundTrace]) -> Result<()> {
    write_rows(
        path,
        &TRACE_HEADER,
        traces.iter().map(|t| {
            vec![
                t.round.to_string(),
                fmt_num(t.pre_clip_norm),
                fmt_num(t.post_clip_norm),
                t.noise_seed.to_string(),
                t.effective_weights
                    .iter()
                    .map(|w| fmt_num(*w))
                    .collect::<Vec<_>>()
                    .join(";"),
            ]
        }),
    )
}

pub fn write_closeness_csv(path: &Path, trace: &ClosenessTrace) -> Result<()> {
    write_rows(
        path,
        &CLOSENESS_HEADER,
        trace.rows.iter().map(|r| {
            vec![
                r.round.to_string(),
                fmt_num(r.distance),
                r.bound.map(fmt_num).unwrap_or_default(),
            ]
        }),
    )
}

pub fn write_study_csv(path: &Path, rows: &[StudyRow]) -> Result<()> {
    write_rows(
        path,
        &STUDY_HEADER,
        rows.iter().map(|r| {
            vec![
                fmt_num(r.ratio),
                r.rounds.to_string(),
                fmt_num(r.rad),
                r.saturated.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummaryRow {
    pub axis_value: f64,
    pub critical_radius: f64,
    pub clean_accuracy: f64,
    pub smoothed_accuracy: f64,
    pub attack_success_rate: Option<f64>,
    pub certified_samples: usize,
}

pub fn write_sweep_csv(path: &Path, curves: &[(f64, Vec<CurvePoint>)]) -> Result<()> {
    write_rows(
        path,
        &SWEEP_HEADER,
        curves.iter().flat_map(|(v, curve)| {
            curve.iter().map(move |p| {
                vec![
                    fmt_num(*v),
                    fmt_num(p.r),
                    fmt_num(p.certified_accuracy),
                    fmt_num(p.certified_rate),
                ]
            })
        }),
    )
}

pub fn write_sweep_summary_csv(path: &Path, rows: &[SweepSummaryRow]) -> Result<()> {
    write_rows(
        path,
        &SWEEP_SUMMARY_HEADER,
        rows.iter().map(|r| {
            vec![
                fmt_num(r.axis_value),
                fmt_num(r.critical_radius),
                fmt_num(r.clean_accuracy),
                fmt_num(r.smoothed_accuracy),
                r.attack_success_rate.map(fmt_num).unwrap_or_default(),
                r.certified_samples.to_string(),
            ]
        }),
    )
}

/// Per-sample rows read back from CSV.
pub fn read_samples_csv(path: &Path) -> Result<Vec<CertificationResult>> {
    let table = read_table(path, &SAMPLE_HEADER)?;
    let bad = |line: usize, what: &str| format_error(path, format!("row {line}: bad {what}"));
    table
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let line = i + 2;
            let int = |k: usize, what: &str| row[k].parse::<usize>().map_err(|_| bad(line, what));
            let num = |k: usize, what: &str| parse_num(&row[k]).ok_or_else(|| bad(line, what));
            let prediction = if row[2] == ABSTAIN {
                None
            } else {
                Some(int(2, "prediction")?)
            };
            let rec = CertificationResult {
                sample_id: int(0, "sample_id")?,
                true_label: int(1, "true_label")?,
                prediction,
                p_hat_a: num(3, "p_hat_A")?,
                p_hat_b: num(4, "p_hat_B")?,
                p_a_lower: num(5, "p_A_lower")?,
                p_b_upper: num(6, "p_B_upper")?,
                rad: num(7, "rad")?,
                saturated: false,
            };
            for (k, v) in [rec.p_hat_a, rec.p_hat_b, rec.p_a_lower, rec.p_b_upper]
                .iter()
                .enumerate()
            {
                if !(0.0..=1.0).contains(v) {
                    return Err(bad(line, SAMPLE_HEADER[3 + k]));
                }
            }
            if !(rec.rad >= 0.0) || rec.is_abstain() != (rec.rad == 0.0) {
                return Err(bad(line, "rad / ABSTAIN coupling"));
            }
            Ok(rec)
        })
        .collect()
}

/// Round traces read back from CSV (without parameter snapshots).
pub fn read_trace_csv(path: &Path) -> Result<Vec<RoundTrace>> {
    let table = read_table(path, &TRACE_HEADER)?;
    let last = table.len();
    table
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let bad = || format_error(path, format!("row {}: malformed trace row", i + 2));
            let effective_weights = row[4]
                .split(';')
                .map(|w| parse_num(w).ok_or_else(bad))
                .collect::<Result<Vec<_>>>()?;
            let round: usize = row[0].parse().map_err(|_| bad())?;
            Ok(RoundTrace {
                round,
                pre_clip_norm: parse_num(&row[1]).ok_or_else(bad)?,
                post_clip_norm: parse_num(&row[2]).ok_or_else(bad)?,
                noise_seed: row[3].parse().map_err(|_| bad())?,
                global_params_snapshot: None,
                effective_weights,
                noise_added: round < last,
            })
        })
        .collect()
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let table = read_table(path, &CURVE_HEADER)?;
    table
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let vals: Option<Vec<f64>> = row.iter().map(|f| parse_num(f)).collect();
            match vals.as_deref() {
                Some(&[r, acc, rate])
                    if (0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&rate) && acc <= rate =>
                {
                    Ok(CurvePoint {
                        r,
                        certified_accuracy: acc,
                        certified_rate: rate,
                    })
                }
                _ => Err(format_error(
                    path,
                    format!("row {}: malformed curve point", i + 2),
                )),
            }
        })
        .collect()
}

fn format_error(path: &Path, message: String) -> CrflError {
    CrflError::Format {
        path: path.to_path_buf(),
        message,
    }
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(format_error(
            path,
            format!("header {found:?}, expected {header:?}"),
        ));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

/// Kinds of CSV file the tools emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvKind {
    Samples,
    Curve,
    Trace,
    Closeness,
    Study,
    Sweep,
    SweepSummary,
}

/// Re-reads a CSV written by this crate, recognising it by its header and
/// checking every field against the column type. Returns the kind and row
/// count.
pub fn validate_csv(path: &Path) -> Result<(CsvKind, usize)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let kind = match h.as_slice() {
        x if x == SAMPLE_HEADER => CsvKind::Samples,
        x if x == CURVE_HEADER => CsvKind::Curve,
        x if x == TRACE_HEADER => CsvKind::Trace,
        x if x == CLOSENESS_HEADER => CsvKind::Closeness,
        x if x == STUDY_HEADER => CsvKind::Study,
        x if x == SWEEP_HEADER => CsvKind::Sweep,
        x if x == SWEEP_SUMMARY_HEADER => CsvKind::SweepSummary,
        _ => {
            return Err(format_error(
                path,
                format!("unrecognised header {header:?}"),
            ))
        }
    };
    drop(r);
    match kind {
        CsvKind::Samples => return Ok((kind, read_samples_csv(path)?.len())),
        CsvKind::Curve => return Ok((kind, read_curve_csv(path)?.len())),
        _ => {}
    }
    // column types: 'u' unsigned int, 'n' number, 'o' optional number,
    // 'b' bool, 'w' semicolon-separated numbers
    let types: &[u8] = match kind {
        CsvKind::Trace => b"unnuw",
        CsvKind::Closeness => b"uno",
        CsvKind::Study => b"nunb",
        CsvKind::Sweep => b"nnnn",
        CsvKind::SweepSummary => b"nnnnou",
        CsvKind::Samples | CsvKind::Curve => unreachable!(),
    };
    let rows = read_table(path, &h)?;
    for (i, row) in rows.iter().enumerate() {
        for (field, t) in row.iter().zip(types) {
            let ok = match t {
                b'u' => field.parse::<u64>().is_ok(),
                b'n' => parse_num(field).is_some(),
                b'o' => field.is_empty() || parse_num(field).is_some(),
                b'b' => field == "true" || field == "false",
                b'w' => field.split(';').all(|w| parse_num(w).is_some()),
                _ => unreachable!(),
            };
            if !ok {
                return Err(format_error(
                    path,
                    format!("row {}: bad field {field:?}", i + 2),
                ));
            }
        }
    }
    Ok((kind, rows.len()))
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#17becf",
];

/// Line chart with axes, tick labels and a legend. Non-finite points are
/// skipped.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&mut finite.iter().map(|p| p.0));
    let (y0, y1) = span(&mut finite.iter().map(|p| p.1));
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{l},{t} V{b} H{r}" fill="none" stroke="black"/>"#,
        l = left,
        t = top,
        b = h - bottom,
        r = w - right
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            h - bottom + 18.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = (top + h - bottom) / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 16.0 * i as f64;
        let lx = w - right - 150.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    trim_zeros(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// gnuplot data file: one block per series, separated by two blank lines.
pub fn dat_text(series: &[Series<'_>]) -> String {
    let mut s = String::new();
    for (i, ser) in series.iter().enumerate() {
        if i > 0 {
            s.push_str("\n\n");
        }
        let _ = writeln!(s, "# {}", ser.name);
        for (x, y) in &ser.points {
            let _ = writeln!(s, "{} {}", fmt_num(*x), fmt_num(*y));
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| CrflError::io(path, e))
}

/// Writes `<stem>.svg` and `<stem>.dat` side by side.
pub fn write_chart(
    stem: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
) -> Result<()> {
    write_text(
        &stem.with_extension("svg"),
        &line_chart_svg(title, x_label, y_label, series),
    )?;
    write_text(&stem.with_extension("dat"), &dat_text(series))
}
