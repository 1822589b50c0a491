//! Rank-sensitivity reports over a score table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use flexmore_core::analysis::{
    fit_rank_sensitivity, mean_of_group_means, peak_rank, rel_improvement, summarize_peaks, summarize_slopes,
    PeakSummary, Rank, RegressionResult, ScoreTable, SlopeSummary,
};
use serde::Serialize;

use crate::error::{CliError, Result};

/// Pseudo-group holding the mean over all groups.
pub const AVG_GROUP: &str = "Avg";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionRow {
    pub model: String,
    pub group: String,
    #[serde(flatten)]
    pub fit: RegressionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakRow {
    pub model: String,
    pub group: String,
    pub r_star: u64,
    pub log2_r_star: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AvgRow {
    pub model: String,
    pub rank: Rank,
    pub group_means: BTreeMap<String, f64>,
    pub avg: f64,
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub models: Vec<String>,
    pub groups: Vec<String>,
    pub min_points: usize,
    pub regressions: Vec<RegressionRow>,
    pub slope_summary: Vec<(String, SlopeSummary)>,
    pub peaks: Vec<PeakRow>,
    pub peak_summary: Vec<(String, PeakSummary)>,
    pub avg: Vec<AvgRow>,
}

/// Reference Avg for Δ%: a fixed (model, rank) cell, or each model's own
/// `full` row when absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Baseline {
    pub model: String,
    pub rank: Rank,
}

impl std::str::FromStr for Baseline {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (model, rank) = match s.split_once('@') {
            Some((m, r)) => (m, r.parse::<Rank>().map_err(|e| e.to_string())?),
            None => (s, Rank::Full),
        };
        if model.is_empty() {
            return Err("baseline model name is empty".into());
        }
        Ok(Self {
            model: model.to_string(),
            rank,
        })
    }
}

fn cell_avg(
    table: &ScoreTable,
    model: &str,
    rank: Rank,
    groups: &[String],
) -> Result<Option<(BTreeMap<String, f64>, f64)>> {
    let means = table.group_means(model, rank);
    if means.is_empty() {
        return Ok(None);
    }
    if let Some(g) = groups.iter().find(|g| !means.contains_key(*g)) {
        return Err(CliError::Data(format!(
            "model '{model}' rank {rank} has no scores for group '{g}'"
        )));
    }
    let per_group: Vec<Vec<f64>> = means.values().map(|m| vec![*m]).collect();
    let avg = mean_of_group_means(&per_group)?;
    Ok(Some((means, avg)))
}

pub fn analyze(table: &ScoreTable, baseline: Option<&Baseline>, min_points: usize) -> Result<Report> {
    if table.is_empty() {
        return Err(CliError::Data("score table is empty".into()));
    }
    if min_points < 2 {
        return Err(CliError::Usage("min-points must be at least 2".into()));
    }
    let models: Vec<String> = table.models().into_iter().map(String::from).collect();
    let groups: Vec<String> = table.groups().into_iter().map(String::from).collect();
    let mut all_groups = groups.clone();
    all_groups.push(AVG_GROUP.to_string());

    let mut avg = Vec::new();
    let mut curves: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for model in &models {
        for rank in table.ranks_of(model) {
            let (means, a) = cell_avg(table, model, rank, &groups)?.expect("rank listed for model");
            if let Some(r) = rank.value() {
                for (g, m) in &means {
                    curves.entry((model.clone(), g.clone())).or_default().push((r, *m));
                }
                curves
                    .entry((model.clone(), AVG_GROUP.to_string()))
                    .or_default()
                    .push((r, a));
            }
            avg.push(AvgRow {
                model: model.clone(),
                rank,
                group_means: means,
                avg: a,
                delta_pct: None,
            });
        }
    }

    let fixed_base = match baseline {
        Some(b) => Some(
            avg.iter()
                .find(|row| row.model == b.model && row.rank == b.rank)
                .map(|row| row.avg)
                .ok_or_else(|| CliError::Data(format!("baseline '{}' rank {} not in table", b.model, b.rank)))?,
        ),
        None => None,
    };
    let own_full: BTreeMap<String, f64> = avg
        .iter()
        .filter(|r| r.rank == Rank::Full)
        .map(|r| (r.model.clone(), r.avg))
        .collect();
    for row in &mut avg {
        let base = fixed_base.or_else(|| own_full.get(&row.model).copied());
        row.delta_pct = match base {
            Some(b) => Some(rel_improvement(row.avg, b)?),
            None => None,
        };
    }

    let mut regressions = Vec::new();
    let mut peaks = Vec::new();
    for model in &models {
        for group in &all_groups {
            let Some(points) = curves.get(&(model.clone(), group.clone())) else {
                continue;
            };
            if points.len() < min_points {
                continue;
            }
            let fit_points: Vec<(f64, f64)> = points.iter().map(|(r, s)| (*r as f64, *s)).collect();
            regressions.push(RegressionRow {
                model: model.clone(),
                group: group.clone(),
                fit: fit_rank_sensitivity(&fit_points)?,
            });
            let p = peak_rank(points)?;
            peaks.push(PeakRow {
                model: model.clone(),
                group: group.clone(),
                r_star: p.r_star,
                log2_r_star: p.log2_r_star,
                score: p.score,
            });
        }
    }

    let mut slope_summary = Vec::new();
    let mut peak_summary = Vec::new();
    for group in &all_groups {
        let slopes: Vec<f64> = regressions
            .iter()
            .filter(|r| &r.group == group)
            .map(|r| r.fit.beta)
            .collect();
        if !slopes.is_empty() {
            slope_summary.push((group.clone(), summarize_slopes(&slopes)?));
        }
        let logs: Vec<f64> = peaks
            .iter()
            .filter(|p| &p.group == group)
            .map(|p| p.log2_r_star as f64)
            .collect();
        if !logs.is_empty() {
            peak_summary.push((group.clone(), summarize_peaks(&logs)?));
        }
    }

    Ok(Report {
        models,
        groups,
        min_points,
        regressions,
        slope_summary,
        peaks,
        peak_summary,
        avg,
    })
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

/// Signed two-decimal percentage; values that round to zero print as `+0.00`.
fn pct(d: f64) -> String {
    let r = (d * 100.0).round() / 100.0;
    format!("{:+.2}", if r == 0.0 { 0.0 } else { r })
}

fn csv_line(out: &mut String, fields: &[String]) {
    let escaped: Vec<String> = fields
        .iter()
        .map(|f| {
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.clone()
            }
        })
        .collect();
    writeln!(out, "{}", escaped.join(",")).expect("write to String");
}

impl Report {
    /// `(file name, contents)` for every report file.
    pub fn files(&self) -> Result<Vec<(&'static str, String)>> {
        let s = |x: &str| x.to_string();

        let mut regression = String::new();
        csv_line(
            &mut regression,
            &["model", "group", "alpha", "beta", "pearson_r", "n_points"].map(s),
        );
        for r in &self.regressions {
            csv_line(
                &mut regression,
                &[
                    r.model.clone(),
                    r.group.clone(),
                    f6(r.fit.alpha),
                    f6(r.fit.beta),
                    f4(r.fit.pearson_r),
                    r.fit.n_points.to_string(),
                ],
            );
        }

        let mut slopes = String::new();
        csv_line(&mut slopes, &["group", "median", "min", "max", "n"].map(s));
        for (g, x) in &self.slope_summary {
            csv_line(
                &mut slopes,
                &[g.clone(), f6(x.median), f6(x.min), f6(x.max), x.n.to_string()],
            );
        }

        let mut peaks = String::new();
        csv_line(&mut peaks, &["model", "group", "r_star", "log2_r_star", "score"].map(s));
        for p in &self.peaks {
            csv_line(
                &mut peaks,
                &[
                    p.model.clone(),
                    p.group.clone(),
                    p.r_star.to_string(),
                    p.log2_r_star.to_string(),
                    f4(p.score),
                ],
            );
        }

        let mut peak_summary = String::new();
        csv_line(&mut peak_summary, &["group", "median", "q25", "q75", "n"].map(s));
        for (g, x) in &self.peak_summary {
            csv_line(
                &mut peak_summary,
                &[
                    g.clone(),
                    format!("{:.2}", x.median),
                    format!("{:.2}", x.q25),
                    format!("{:.2}", x.q75),
                    x.n.to_string(),
                ],
            );
        }

        let mut avg = String::new();
        let mut header = vec![s("model"), s("rank")];
        header.extend(self.groups.iter().cloned());
        header.extend([s(AVG_GROUP), s("delta_pct")]);
        csv_line(&mut avg, &header);
        for row in &self.avg {
            let mut fields = vec![row.model.clone(), row.rank.to_string()];
            fields.extend(self.groups.iter().map(|g| f4(row.group_means[g])));
            fields.push(f4(row.avg));
            fields.push(row.delta_pct.map(pct).unwrap_or_default());
            csv_line(&mut avg, &fields);
        }

        let mut summary = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        summary.push('\n');

        Ok(vec![
            ("regression.csv", regression),
            ("slopes.csv", slopes),
            ("peaks.csv", peaks),
            ("peak_summary.csv", peak_summary),
            ("avg.csv", avg),
            ("summary.json", summary),
        ])
    }
}
