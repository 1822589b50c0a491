//! Rank sweeps: fidelity of low-rank mixtures against their dense reference
//! for every (model, rank, group, task).

use std::collections::BTreeMap;

use flexmore_core::adapter::{DeltaDecomposition, RankSpec};
use flexmore_core::analysis::{Rank, ScoreRecord, ScoreTable};
use flexmore_core::linalg::Matrix;
use flexmore_core::moe::{Activation, BlockTargets, ExpertEntry, MixtureSpec, RouterMatrix, SoftmaxMode};
use flexmore_core::synth::{fidelity, Scenario};
use flexmore_core::weights::{ExpertBundle, LowRankAdapter};
use rayon::prelude::*;

use crate::error::{CliError, Result};

/// Dense weights a sweep measures against.
#[derive(Debug, Clone)]
pub struct SweepSource {
    pub base: ExpertBundle,
    pub experts: Vec<ExpertBundle>,
    /// `(n+1) x h`, row 0 for the base.
    pub router: Matrix,
    pub activation: Activation,
    pub targets: BlockTargets,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Single-expert grid; empty skips single-expert jobs.
    pub ranks: Vec<Rank>,
    /// Mixture grid; empty skips mixture jobs.
    pub mixture_ranks: Vec<Rank>,
    pub active: Vec<usize>,
    pub softmax_mode: SoftmaxMode,
}

/// Default single-expert grid: 2⁰ through 2¹⁴.
pub fn default_ranks() -> Vec<Rank> {
    Rank::grid(0, 14)
}

/// Default mixture grid: 2⁰ through 2¹¹ plus the dense baseline.
pub fn default_mixture_ranks() -> Vec<Rank> {
    let mut v = Rank::grid(0, 11);
    v.push(Rank::Full);
    v
}

pub fn mixture_model_name(active: usize) -> String {
    format!("flexmore-a{active}")
}

/// Named tasks and their probe vectors.
pub type Tasks = Vec<(String, Vec<Vec<f64>>)>;

/// Probe sets per group, each split into named tasks.
#[derive(Debug, Clone)]
pub struct Workload {
    pub groups: Vec<(String, Tasks)>,
}

impl Workload {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let groups = scenario
            .groups()
            .into_iter()
            .enumerate()
            .map(|(g, group)| {
                let tasks = scenario
                    .group_probes(g)
                    .into_iter()
                    .enumerate()
                    .map(|(t, probes)| (format!("t{:02}", t + 1), probes))
                    .collect();
                (group.name, tasks)
            })
            .collect();
        Self { groups }
    }
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Single { expert: usize, rank: Rank },
    Mixture { active: usize, rank: Rank },
}

struct Prepared<'a> {
    source: &'a SweepSource,
    decomps: Vec<DeltaDecomposition>,
    mode: SoftmaxMode,
}

impl Prepared<'_> {
    /// Adapter at `rank`, clamped per target to the largest available rank.
    fn adapter(&self, expert: usize, rank: u64) -> Result<LowRankAdapter> {
        let d = &self.decomps[expert];
        let ranks: BTreeMap<String, usize> = d
            .targets
            .iter()
            .map(|(t, svd)| (t.clone(), (rank as usize).min(svd.rank())))
            .collect();
        Ok(d.adapter(&RankSpec::PerTarget(ranks))?)
    }

    fn spec(&self, experts: Vec<ExpertEntry>, router: Matrix, top_k: usize) -> Result<MixtureSpec> {
        Ok(MixtureSpec::with_options(
            self.source.base.clone(),
            experts,
            RouterMatrix::new(router),
            top_k,
            self.mode,
            self.source.activation,
            self.source.targets.clone(),
        )?)
    }

    fn entries(&self, experts: &[usize], rank: Rank) -> Result<Vec<ExpertEntry>> {
        experts
            .iter()
            .map(|&i| {
                Ok(match rank.value() {
                    Some(r) => ExpertEntry::LowRank(self.adapter(i, r)?),
                    None => ExpertEntry::Full(self.source.experts[i].clone()),
                })
            })
            .collect()
    }

    fn run(&self, job: Job, workload: &Workload) -> Result<Vec<ScoreRecord>> {
        let (model, experts, router, top_k, rank) = match job {
            Job::Single { expert, rank } => {
                let r = &self.source.router;
                let rows = [r.row(0), r.row(expert + 1)];
                let router = Matrix::from_rows(&rows)?;
                (
                    self.source.experts[expert].name().to_string(),
                    vec![expert],
                    router,
                    2,
                    rank,
                )
            }
            Job::Mixture { active, rank } => {
                let all: Vec<usize> = (0..self.source.experts.len()).collect();
                (
                    mixture_model_name(active),
                    all,
                    self.source.router.clone(),
                    active,
                    rank,
                )
            }
        };
        let full = self.spec(self.entries(&experts, Rank::Full)?, router.clone(), top_k)?;
        let low = match rank {
            Rank::Full => full.clone(),
            _ => self.spec(self.entries(&experts, rank)?, router, top_k)?,
        };
        let mut out = Vec::new();
        for (group, tasks) in &workload.groups {
            for (task, probes) in tasks {
                let score = fidelity(&low, &full, probes)?.value;
                out.push(ScoreRecord::new(
                    model.clone(),
                    rank,
                    group.clone(),
                    task.clone(),
                    score,
                ));
            }
        }
        Ok(out)
    }
}

/// Runs every job in parallel. The result is ordered by (model, rank,
/// group, task) regardless of scheduling.
pub fn run_sweep(source: &SweepSource, config: &SweepConfig, workload: &Workload) -> Result<ScoreTable> {
    let n = source.experts.len();
    if n == 0 {
        return Err(CliError::Data("sweep needs at least one expert".into()));
    }
    if source.router.rows() != n + 1 {
        return Err(CliError::Data(format!(
            "router has {} rows for {} experts plus base",
            source.router.rows(),
            n
        )));
    }
    if let Some(a) = config.active.iter().find(|a| **a == 0 || **a > n + 1) {
        return Err(CliError::Usage(format!(
            "active experts {a} out of range 1..={}",
            n + 1
        )));
    }
    for e in &source.experts {
        if e.name().starts_with("flexmore-a") {
            return Err(CliError::Data(format!(
                "expert name '{}' collides with mixture model names",
                e.name()
            )));
        }
    }
    let decomps = source
        .experts
        .par_iter()
        .map(|e| DeltaDecomposition::new(e, &source.base))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let prepared = Prepared {
        source,
        decomps,
        mode: config.softmax_mode,
    };

    let mut jobs = Vec::new();
    for expert in 0..n {
        jobs.extend(config.ranks.iter().map(|&rank| Job::Single { expert, rank }));
    }
    for &active in &config.active {
        jobs.extend(config.mixture_ranks.iter().map(|&rank| Job::Mixture { active, rank }));
    }
    let records = jobs
        .par_iter()
        .map(|job| prepared.run(*job, workload))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable::new(records.into_iter().flatten().collect())?)
}
