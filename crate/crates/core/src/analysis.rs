//! Score aggregation and rank-sensitivity statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

/// Largest rank on the sweep grid (2^14).
pub const MAX_LOG2_RANK: u32 = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no data: {0}")]
    Empty(&'static str),
    #[error("group '{0}' has no scores")]
    EmptyGroup(String),
    #[error("baseline average must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("need at least 2 points for a fit, got {0}")]
    TooFewPoints(usize),
    #[error("all points share one rank; slope is undefined")]
    ZeroRankVariance,
    #[error("rank {0} appears more than once")]
    DuplicateRank(u64),
    #[error("invalid rank '{0}': expected a power of two in 1..=16384 or 'full'")]
    InvalidRank(String),
    #[error("duplicate record ({0})")]
    DuplicateRecord(String),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Expert rank on the power-of-two grid, or the full-size baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rank {
    /// Stored as log2 of the rank.
    Low(u32),
    Full,
}

impl Rank {
    pub fn from_value(r: u64) -> Result<Self> {
        if r.is_power_of_two() && r.trailing_zeros() <= MAX_LOG2_RANK {
            Ok(Rank::Low(r.trailing_zeros()))
        } else {
            Err(AnalysisError::InvalidRank(r.to_string()))
        }
    }

    pub fn value(self) -> Option<u64> {
        match self {
            Rank::Low(k) => Some(1 << k),
            Rank::Full => None,
        }
    }

    pub fn log2(self) -> Option<u32> {
        match self {
            Rank::Low(k) => Some(k),
            Rank::Full => None,
        }
    }

    /// `2^lo ..= 2^hi`.
    pub fn grid(lo: u32, hi: u32) -> Vec<Rank> {
        (lo..=hi.min(MAX_LOG2_RANK)).map(Rank::Low).collect()
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rank::Low(k) => write!(f, "{}", 1u64 << k),
            Rank::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Rank {
    type Err = AnalysisError;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "full" {
            return Ok(Rank::Full);
        }
        s.parse::<u64>()
            .map_err(|_| AnalysisError::InvalidRank(s.to_string()))
            .and_then(Rank::from_value)
    }
}

impl Serialize for Rank {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rank::Low(k) => s.serialize_u64(1 << k),
            Rank::Full => s.serialize_str("full"),
        }
    }
}

/// One task score for an (expert or model, rank, group, task) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub expert: String,
    pub rank: Rank,
    pub group: String,
    pub task: String,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(
        expert: impl Into<String>,
        rank: Rank,
        group: impl Into<String>,
        task: impl Into<String>,
        score: f64,
    ) -> Self {
        Self {
            expert: expert.into(),
            rank,
            group: group.into(),
            task: task.into(),
            score,
        }
    }

    fn key(&self) -> (&str, Rank, &str, &str) {
        (&self.expert, self.rank, &self.group, &self.task)
    }
}

/// Validated collection of score records, kept in (expert, rank, group,
/// task) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    records: Vec<ScoreRecord>,
}

impl ScoreTable {
    pub fn new(mut records: Vec<ScoreRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !(0.0..=1.0).contains(&r.score) {
                return Err(AnalysisError::ScoreOutOfRange(r.score));
            }
            if !seen.insert(r.key()) {
                return Err(AnalysisError::DuplicateRecord(format!(
                    "{}, {}, {}, {}",
                    r.expert, r.rank, r.group, r.task
                )));
            }
        }
        drop(seen);
        records.sort_by(|a, b| a.key().cmp(&b.key()));
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct model/expert names in sorted order.
    pub fn models(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.records.iter().map(|r| r.expert.as_str()).collect();
        v.dedup();
        v
    }

    /// Distinct group names in order of first appearance per sorted table.
    pub fn groups(&self) -> Vec<&str> {
        let set: std::collections::BTreeSet<&str> = self.records.iter().map(|r| r.group.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn ranks_of(&self, model: &str) -> Vec<Rank> {
        let mut v: Vec<Rank> = self.for_model(model).map(|r| r.rank).collect();
        v.dedup();
        v
    }

    pub fn for_model<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a ScoreRecord> + 'a {
        self.records.iter().filter(move |r| r.expert == model)
    }

    pub fn cell<'a>(&'a self, model: &'a str, rank: Rank) -> Vec<&'a ScoreRecord> {
        self.for_model(model).filter(|r| r.rank == rank).collect()
    }

    /// Mean task score per group for one (model, rank).
    pub fn group_means(&self, model: &str, rank: Rank) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in self.cell(model, rank) {
            let e = acc.entry(r.group.clone()).or_default();
            e.0 += r.score;
            e.1 += 1;
        }
        acc.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unweighted mean over groups of each group's mean task score.
pub fn mean_of_group_means(groups: &[Vec<f64>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(AnalysisError::Empty("no groups"));
    }
    let means = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.is_empty() {
                Err(AnalysisError::EmptyGroup(format!("#{i}")))
            } else {
                Ok(mean(g))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&means))
}

/// Avg score of one model's records: mean over groups of group means.
pub fn avg_score(records: &[&ScoreRecord]) -> Result<f64> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.group.as_str()).or_default().push(r.score);
    }
    mean_of_group_means(&groups.into_values().collect::<Vec<_>>())
}

/// `100 (model - baseline) / baseline`.
pub fn rel_improvement(model_avg: f64, baseline_avg: f64) -> Result<f64> {
    if baseline_avg.is_nan() || baseline_avg <= 0.0 {
        return Err(AnalysisError::NonPositiveBaseline(baseline_avg));
    }
    Ok(100.0 * (model_avg - baseline_avg) / baseline_avg)
}

/// Least-squares fit `score = alpha + beta log2(rank)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegressionResult {
    pub alpha: f64,
    pub beta: f64,
    pub pearson_r: f64,
    pub n_points: usize,
}

/// Closed-form OLS of score on `log2(rank)` plus the Pearson correlation of
/// the same pairs. Pearson is 0 when the scores have no variance.
pub fn fit_rank_sensitivity(points: &[(f64, f64)]) -> Result<RegressionResult> {
    let n = points.len();
    if n < 2 {
        return Err(AnalysisError::TooFewPoints(n));
    }
    let xs: Vec<f64> = points.iter().map(|(r, _)| r.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, s)| *s).collect();
    let (xm, ym) = (mean(&xs), mean(&ys));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        let (dx, dy) = (x - xm, y - ym);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::ZeroRankVariance);
    }
    let beta = sxy / sxx;
    let pearson_r = if syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    };
    Ok(RegressionResult {
        alpha: ym - beta * xm,
        beta,
        pearson_r,
        n_points: n,
    })
}

/// Lowest rank attaining the maximum observed score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakRank {
    pub r_star: u64,
    pub log2_r_star: u32,
    pub score: f64,
}

pub fn peak_rank(points: &[(u64, f64)]) -> Result<PeakRank> {
    if points.is_empty() {
        return Err(AnalysisError::Empty("peak rank of no points"));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|(r, _)| *r);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(AnalysisError::DuplicateRank(w[0].0));
    }
    let mut best = sorted[0];
    for p in &sorted[1..] {
        if p.1 > best.1 {
            best = *p;
        }
    }
    let rank = Rank::from_value(best.0)?;
    Ok(PeakRank {
        r_star: best.0,
        log2_r_star: rank.log2().expect("low rank"),
        score: best.1,
    })
}

/// Linear-interpolation quantile at index `p (n - 1)` of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakSummary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n: usize,
}

/// Median and interquartile range of `log2 r*` values.
pub fn summarize_peaks(log2_peaks: &[f64]) -> Result<PeakSummary> {
    if log2_peaks.is_empty() {
        return Err(AnalysisError::Empty("no peaks to summarize"));
    }
    let v = sorted_copy(log2_peaks);
    Ok(PeakSummary {
        median: quantile(&v, 0.5),
        q25: quantile(&v, 0.25),
        q75: quantile(&v, 0.75),
        n: v.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeSummary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

pub fn summarize_slopes(slopes: &[f64]) -> Result<SlopeSummary> {
    if slopes.is_empty() {
        return Err(AnalysisError::Empty("no slopes to summarize"));
    }
    let v = sorted_copy(slopes);
    Ok(SlopeSummary {
        median: quantile(&v, 0.5),
        min: v[0],
        max: v[v.len() - 1],
        n: v.len(),
    })
}
