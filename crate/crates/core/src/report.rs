//! Report serialization: a full JSON document, a flat CSV table and an
//! average-rank summary, all byte-deterministic for a given grid outcome.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::{ExperimentConfig, GridOutcome, RankTable};
use crate::error::{Error, Result};
use crate::protocol::ExperimentReport;

#[derive(Serialize)]
struct FullReport<'a> {
    schema_version: u32,
    config: &'a ExperimentConfig,
    runs: &'a [ExperimentReport],
    rank_table: &'a RankTable,
}

pub fn write_json(path: &Path, cfg: &ExperimentConfig, outcome: &GridOutcome) -> Result<()> {
    let doc = FullReport {
        schema_version: crate::config::SCHEMA_VERSION,
        config: cfg,
        runs: &outcome.runs,
        rank_table: &outcome.rank_table,
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Format(format!("json serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub const CSV_HEADER: &str = "victim,attack,mode,r,seed,segment,error";

/// Flat per-run rows: one line per segment plus an `overall` line.
pub fn csv_body(runs: &[ExperimentReport]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for run in runs {
        for (i, err) in run.per_segment_error.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{},{},{:.6}",
                run.victim, run.attack, run.mode, run.ratio, run.seed, i, err
            );
        }
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{},overall,{:.6}",
            run.victim, run.attack, run.mode, run.ratio, run.seed, run.overall_error
        );
    }
    out
}

pub fn write_csv(path: &Path, runs: &[ExperimentReport]) -> Result<()> {
    std::fs::write(path, csv_body(runs))?;
    Ok(())
}

/// Victims as columns, attacks as rows; trailing mean-error and
/// average-rank columns.
pub fn rank_table_csv(table: &RankTable) -> String {
    let mut out = String::new();
    out.push_str("attack");
    for v in &table.victims {
        let _ = write!(out, ",{v}");
    }
    out.push_str(",avg_error,avg_rank\n");
    for (ai, attack) in table.attacks.iter().enumerate() {
        let _ = write!(out, "{attack}");
        let row = &table.mean_errors[ai];
        for err in row {
            let _ = write!(out, ",{err:.6}");
        }
        let avg: f64 = row.iter().sum::<f64>() / row.len() as f64;
        let _ = writeln!(out, ",{avg:.6},{:.4}", table.average_ranks[ai]);
    }
    out
}

pub fn write_rank_table(path: &Path, table: &RankTable) -> Result<()> {
    std::fs::write(path, rank_table_csv(table))?;
    Ok(())
}

/// A parsed flat-CSV row (only the `overall` rows matter for ranking).
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub victim: String,
    pub attack: String,
    pub mode: String,
    pub ratio: f64,
    pub seed: u64,
    pub segment: String,
    pub error: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected csv header {other:?}, wanted `{CSV_HEADER}`"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!("csv row {} has {} fields", i + 2, fields.len())));
        }
        rows.push(CsvRow {
            victim: fields[0].to_string(),
            attack: fields[1].to_string(),
            mode: fields[2].to_string(),
            ratio: fields[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad ratio on row {}", i + 2)))?,
            seed: fields[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad seed on row {}", i + 2)))?,
            segment: fields[5].to_string(),
            error: fields[6]
                .parse()
                .map_err(|_| Error::Format(format!("bad error on row {}", i + 2)))?,
        });
    }
    Ok(rows)
}

/// Merge flat CSV bodies and recompute the rank table from the merged
/// `overall` rows. Victim and attack orderings follow first appearance.
pub fn merge_rows(rows: &[CsvRow]) -> Result<(String, RankTable)> {
    let mut victims: Vec<String> = Vec::new();
    let mut attacks: Vec<String> = Vec::new();
    for row in rows {
        if !victims.contains(&row.victim) {
            victims.push(row.victim.clone());
        }
        if !attacks.contains(&row.attack) {
            attacks.push(row.attack.clone());
        }
    }
    let mut sums = vec![vec![0.0; victims.len()]; attacks.len()];
    let mut counts = vec![vec![0usize; victims.len()]; attacks.len()];
    let mut body = String::new();
    body.push_str(CSV_HEADER);
    body.push('\n');
    for row in rows {
        let _ = writeln!(
            body,
            "{},{},{},{:.4},{},{},{:.6}",
            row.victim, row.attack, row.mode, row.ratio, row.seed, row.segment, row.error
        );
        if row.segment == "overall" {
            let vi = victims.iter().position(|v| *v == row.victim).unwrap();
            let ai = attacks.iter().position(|a| *a == row.attack).unwrap();
            sums[ai][vi] += row.error;
            counts[ai][vi] += 1;
        }
    }
    if counts.iter().flatten().any(|&c| c == 0) {
        return Err(Error::Contract("merged table is incomplete: missing cells".into()));
    }
    let mean_errors: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(r, c)| r.iter().zip(c).map(|(s, &n)| s / n as f64).collect())
        .collect();
    let average_ranks = crate::protocol::average_rank(&mean_errors)?;
    Ok((
        body,
        RankTable {
            victims,
            attacks,
            mean_errors,
            average_ranks,
        },
    ))
}
