//! Metric tables: one row per (method, scenario, view mask, seed), emitted as
//! fixed-precision CSV and as an aligned text table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::Method;
use crate::pipeline::ViewMask;
use crate::signal::MetricsReport;
use crate::synth::Scenario;

pub const CSV_HEADER: &str = "method,scenario,view_mask,mae,rmse,r,n,seed";
/// Decimal places for every metric column.
pub const DECIMALS: usize = 4;
const ALL_SCENARIOS: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    /// `None` when the test set spans every scenario.
    pub scenario: Option<Scenario>,
    pub views: ViewMask,
    pub mae: f64,
    pub rmse: f64,
    pub r: f64,
    pub n: usize,
    pub seed: u64,
}

impl ResultRow {
    pub fn new(method: Method, scenario: Option<Scenario>, views: ViewMask, m: &MetricsReport, seed: u64) -> Self {
        Self {
            method,
            scenario,
            views,
            mae: m.mae,
            rmse: m.rmse,
            r: m.r,
            n: m.n,
            seed,
        }
    }

    fn scenario_label(&self) -> &'static str {
        self.scenario.map_or(ALL_SCENARIOS, Scenario::name)
    }
}

fn fixed(v: f64) -> String {
    let s = format!("{v:.DECIMALS$}");
    // "-0.0000" and "0.0000" are the same table entry
    if s.trim_start_matches('-').bytes().all(|b| b == b'0' || b == b'.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

pub fn emit_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.scenario_label(),
            r.views,
            fixed(r.mae),
            fixed(r.rmse),
            fixed(r.r),
            r.n,
            r.seed
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "metrics header `{}` differs from `{CSV_HEADER}`",
                other.unwrap_or("")
            )))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| parse_row(line).map_err(|e| Error::Config(format!("metrics row {}: {e}", i + 1))))
        .collect()
}

fn parse_row(line: &str) -> Result<ResultRow> {
    let f: Vec<&str> = line.split(',').collect();
    let [method, scenario, views, mae, rmse, r, n, seed] = f[..] else {
        return Err(Error::Config(format!("expected 8 fields, found {}", f.len())));
    };
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("`{s}`: {e}")));
    let int = |s: &str| s.parse::<u64>().map_err(|e| Error::Config(format!("`{s}`: {e}")));
    Ok(ResultRow {
        method: method.parse()?,
        scenario: if scenario == ALL_SCENARIOS {
            None
        } else {
            Some(scenario.parse()?)
        },
        views: views.parse()?,
        mae: num(mae)?,
        rmse: num(rmse)?,
        r: num(r)?,
        n: int(n)? as usize,
        seed: int(seed)?,
    })
}

/// Column-aligned text rendering of the same rows.
pub fn render_table(rows: &[ResultRow]) -> String {
    let header: Vec<String> = CSV_HEADER.split(',').map(str::to_string).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.scenario_label().to_string(),
                r.views.to_string(),
                fixed(r.mae),
                fixed(r.rmse),
                fixed(r.r),
                r.n.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| if c < 3 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

/// CSV and text table for the same rows.
pub fn report(rows: &[ResultRow]) -> (String, String) {
    (emit_csv(rows), render_table(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(seed: u64, mae: f64) -> ResultRow {
        ResultRow {
            method: Method::MvrdRppg,
            scenario: Some(Scenario::Movement),
            views: ViewMask::ALL,
            mae,
            rmse: mae * 1.5,
            r: 0.97,
            n: 6,
            seed,
        }
    }

    #[test]
    fn single_row_has_header() {
        let csv = emit_csv(&[row(0, 1.25)]);
        assert_eq!(
            csv,
            "method,scenario,view_mask,mae,rmse,r,n,seed\nmvrd_rppg,movement,lcr,1.2500,1.8750,0.9700,6,0\n"
        );
    }

    #[test]
    fn seeds_differ_only_in_seed_and_metrics() {
        let csv = emit_csv(&[row(1, 2.0), row(2, 3.0)]);
        let lines: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(lines.len(), 2);
        let prefix = |l: &str| l.split(',').take(3).collect::<Vec<_>>().join(",");
        assert_eq!(prefix(lines[0]), prefix(lines[1]));
        assert!(lines[0].ends_with(",1") && lines[1].ends_with(",2"));
    }

    #[test]
    fn negative_zero_prints_as_zero() {
        let mut r = row(0, 0.0);
        r.r = -1e-9;
        assert!(emit_csv(&[r]).contains(",0.0000,6,0"));
    }

    #[test]
    fn table_is_aligned() {
        let t = render_table(&[row(0, 1.0), row(12, 10.5)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        let mae_end = |l: &str| l.find("1.0000").or(l.find("10.5000")).map(|i| i + l[i..].find(' ').unwrap());
        assert_eq!(mae_end(lines[2]), mae_end(lines[3]));
    }

    #[test]
    fn bad_header_or_row_is_rejected() {
        assert!(parse_csv("method,mae\n").is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\npos,movement,lcr,1.0\n")).is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\nica,movement,lcr,1,1,1,1,1\n")).is_err());
    }

    fn arb_row() -> impl Strategy<Value = ResultRow> {
        let method = prop_oneof![Just(Method::Pos), Just(Method::Chrom), Just(Method::MvrdRppg)];
        let scenario = prop_oneof![
            Just(None),
            Just(Some(Scenario::Stationary)),
            Just(Some(Scenario::Speaking)),
            Just(Some(Scenario::Movement)),
        ];
        let views = (1u8..8).prop_map(|b| ViewMask::new([b & 1 != 0, b & 2 != 0, b & 4 != 0]).unwrap());
        let q = |max: i64| (0..max).prop_map(|k| k as f64 / 1e4);
        (method, scenario, views, q(2_000_000), q(3_000_000), (-10_000i64..=10_000).prop_map(|k| k as f64 / 1e4), 1usize..500, any::<u64>())
            .prop_map(|(method, scenario, views, mae, rmse, r, n, seed)| ResultRow {
                method,
                scenario,
                views,
                mae,
                rmse,
                r,
                n,
                seed,
            })
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec(arb_row(), 1..6)) {
            let csv = emit_csv(&rows);
            let back = parse_csv(&csv).unwrap();
            // -0.0 prints as 0 and parses back as +0.0, which compares equal
            prop_assert_eq!(&back, &rows);
            prop_assert_eq!(emit_csv(&back), csv);
        }

        #[test]
        fn emission_is_stable_for_unrounded_values(mae in 0.0..100.0f64, r in -1.0..1.0f64) {
            let mut x = row(3, mae);
            x.r = r;
            let once = emit_csv(&[x]);
            prop_assert_eq!(emit_csv(&parse_csv(&once).unwrap()), once);
        }
    }
}
