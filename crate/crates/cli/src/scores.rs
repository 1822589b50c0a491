//! Score tables on disk: `expert,rank,group,task,score` as CSV or one JSON
//! object per line.

use std::path::Path;

use flexmore_core::analysis::{Rank, ScoreRecord, ScoreTable};
use serde::Deserialize;

use crate::error::{CliError, Result};
use crate::Format;

pub const HEADER: [&str; 5] = ["expert", "rank", "group", "task", "score"];

pub fn render(table: &ScoreTable, format: Format) -> Result<String> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(HEADER).map_err(csv_err)?;
            for r in table.records() {
                w.write_record([
                    r.expert.as_str(),
                    &r.rank.to_string(),
                    &r.group,
                    &r.task,
                    &r.score.to_string(),
                ])
                .map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        Format::JsonLines => {
            let mut out = String::new();
            for r in table.records() {
                out.push_str(&serde_json::to_string(r).map_err(|e| CliError::Data(e.to_string()))?);
                out.push('\n');
            }
            Ok(out)
        }
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RankField {
    Int(u64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    expert: String,
    rank: RankField,
    group: String,
    task: String,
    score: f64,
}

fn parse_rank(s: &str) -> std::result::Result<Rank, String> {
    s.trim().parse::<Rank>().map_err(|e| e.to_string())
}

fn parse_score(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("score '{s}' is not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("score {v} outside [0, 1]"));
    }
    Ok(v)
}

/// Reads a table, detecting JSON lines by a leading `{`. Malformed rows are
/// reported with their 1-based line number.
pub fn read(path: &Path) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let at = |line: u64, msg: String| CliError::Data(format!("{}:{line}: {msg}", path.display()));
    let mut records = Vec::new();
    if text.trim_start().starts_with('{') {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i as u64 + 1;
            let r: JsonRecord = serde_json::from_str(line).map_err(|e| at(line_no, e.to_string()))?;
            let rank = match r.rank {
                RankField::Int(v) => Rank::from_value(v).map_err(|e| e.to_string()),
                RankField::Text(s) => parse_rank(&s),
            }
            .map_err(|m| at(line_no, m))?;
            if !(0.0..=1.0).contains(&r.score) {
                return Err(at(line_no, format!("score {} outside [0, 1]", r.score)));
            }
            records.push(ScoreRecord::new(r.expert, rank, r.group, r.task, r.score));
        }
    } else {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| at(1, e.to_string()))?.clone();
        if header.iter().map(str::trim).ne(HEADER) {
            return Err(at(1, format!("expected header '{}'", HEADER.join(","))));
        }
        for row in reader.records() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                at(line, e.to_string())
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let rank = parse_rank(&row[1]).map_err(|m| at(line, m))?;
            let score = parse_score(&row[4]).map_err(|m| at(line, m))?;
            records.push(ScoreRecord::new(
                row[0].trim(),
                rank,
                row[2].trim(),
                row[3].trim(),
                score,
            ));
        }
    }
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: score table is empty", path.display())));
    }
    Ok(ScoreTable::new(records)?)
}
