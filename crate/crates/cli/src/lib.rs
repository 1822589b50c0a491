//! `flexmore` command-line pipelines: generate synthetic experts, extract
//! low-rank adapters, compose mixtures, sweep ranks and analyze the scores.

pub mod commands;
pub mod composition;
pub mod error;
pub mod report;
pub mod scores;
pub mod sweep;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use flexmore_core::adapter::ExpertSize;
use flexmore_core::analysis::Rank;
use flexmore_core::moe::{Activation, BlockTargets, SoftmaxMode};

use commands::{ComposeArgs, ForwardInput, RankArg, Strategy, SweepArgs, SweepWeights};
use composition::ExpertRef;
pub use error::{CliError, Result};
use report::Baseline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    JsonLines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Global,
    Renormalized,
}

impl From<ModeArg> for SoftmaxMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Global => SoftmaxMode::Global,
            ModeArg::Renormalized => SoftmaxMode::Renormalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Silu,
    Linear,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Silu => Activation::Silu,
            ActivationArg::Linear => Activation::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Single,
    Mixture,
    All,
}

#[derive(Debug, Parser)]
#[command(
    name = "flexmore",
    version,
    about = "Rank-heterogeneous mixtures of low-rank experts"
)]
pub struct Cli {
    /// Seed overriding the scenario's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file, where noted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate base, expert and router weights from a scenario file.
    Gen { scenario: PathBuf },
    /// Extract a low-rank adapter from an expert and its base.
    Extract(ExtractCmd),
    /// Validate a mixture and write its composition file.
    Compose(ComposeCmd),
    /// Run a composed mixture on input vectors.
    Forward(ForwardCmd),
    /// Score low-rank mixtures against their dense reference over a rank grid.
    Sweep(SweepCmd),
    /// Pick one rank per expert from a score table.
    SelectRanks(SelectCmd),
    /// Regression, peak-rank and Avg reports from a score table.
    Analyze(AnalyzeCmd),
    /// Parameter totals for a mixture at a model-size preset.
    Params(ParamsCmd),
}

#[derive(Debug, Args)]
pub struct ExtractCmd {
    pub expert: PathBuf,
    pub base: PathBuf,
    /// Rank for every target.
    #[arg(long, conflicts_with = "ranks", required_unless_present = "ranks")]
    pub rank: Option<usize>,
    /// Per-target ranks: `w1=8,w2=4`.
    #[arg(long, value_parser = commands::parse_per_target)]
    pub ranks: Option<std::collections::BTreeMap<String, usize>>,
}

#[derive(Debug, Args)]
pub struct ComposeCmd {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub router: PathBuf,
    /// `full:<path>` or `adapter:<path>`; repeat in router-row order.
    #[arg(long = "expert", value_parser = commands::parse_expert_ref)]
    pub experts: Vec<ExpertRef>,
    #[arg(long)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Global)]
    pub softmax_mode: ModeArg,
    #[arg(long, value_enum, default_value_t = ActivationArg::Silu)]
    pub activation: ActivationArg,
    #[arg(long, default_value = "w1")]
    pub up: String,
    #[arg(long, default_value = "w2")]
    pub down: String,
}

#[derive(Debug, Args)]
pub struct ForwardCmd {
    pub composition: PathBuf,
    /// File of comma-separated input vectors, one per line.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    pub input: Option<PathBuf>,
    /// Number of uniform random inputs drawn with `--seed`.
    #[arg(long)]
    pub random: Option<usize>,
}

fn parse_rank_list(s: &str) -> std::result::Result<Vec<Rank>, String> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        if let Some((lo, hi)) = item.split_once("..") {
            let lo: Rank = lo
                .parse()
                .map_err(|e: flexmore_core::analysis::AnalysisError| e.to_string())?;
            let hi: Rank = hi
                .parse()
                .map_err(|e: flexmore_core::analysis::AnalysisError| e.to_string())?;
            match (lo.log2(), hi.log2()) {
                (Some(a), Some(b)) if a <= b => out.extend(Rank::grid(a, b)),
                _ => return Err(format!("bad rank range '{item}'")),
            }
        } else {
            out.push(
                item.parse()
                    .map_err(|e: flexmore_core::analysis::AnalysisError| e.to_string())?,
            );
        }
    }
    let mut sorted = out.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != out.len() {
        return Err("ranks must be distinct".into());
    }
    if out.is_empty() {
        return Err("empty rank list".into());
    }
    Ok(out)
}

/// Aliases keep clap from treating these as repeated flags.
type RankList = Vec<Rank>;
type ActiveList = Vec<usize>;

fn parse_active(s: &str) -> std::result::Result<Vec<usize>, String> {
    let v = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad active-expert count '{x}'"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if v.is_empty() || v.contains(&0) {
        return Err("active-expert counts must be positive".into());
    }
    Ok(v)
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    pub scenario: PathBuf,
    /// Directory written by `gen`.
    #[arg(long, conflicts_with = "composition", required_unless_present = "composition")]
    pub weights: Option<PathBuf>,
    /// Composition with dense experts to sweep instead.
    #[arg(long)]
    pub composition: Option<PathBuf>,
    /// Single-expert grid, e.g. `1..16384` or `1,4,full`.
    #[arg(long, value_parser = parse_rank_list)]
    pub ranks: Option<RankList>,
    /// Mixture grid; `full` is always added.
    #[arg(long, value_parser = parse_rank_list)]
    pub mixture_ranks: Option<RankList>,
    /// Active-expert counts for mixture sweeps (default 2,4,7 up to n+1).
    #[arg(long, value_parser = parse_active)]
    pub active: Option<ActiveList>,
    #[arg(long, value_enum, default_value_t = SweepKind::All)]
    pub kind: SweepKind,
    #[arg(long, value_enum)]
    pub softmax_mode: Option<ModeArg>,
    /// Probes per task, overriding the scenario.
    #[arg(long)]
    pub probes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectCmd {
    pub table: PathBuf,
    /// `group:<name>` or `avg`.
    #[arg(long, default_value = "avg")]
    pub strategy: Strategy,
    /// Restrict to these models (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct AnalyzeCmd {
    pub table: PathBuf,
    /// `model[@rank]` whose Avg is the Δ% denominator for every row
    /// (default: each model's own `full` row).
    #[arg(long)]
    pub baseline: Option<Baseline>,
    /// Minimum swept ranks for a regression or peak row.
    #[arg(long, default_value_t = 4)]
    pub min_points: usize,
}

#[derive(Debug, Args)]
pub struct ParamsCmd {
    pub composition: Option<PathBuf>,
    #[arg(long, default_value = "olmo7b")]
    pub preset: String,
    /// Expert sizes instead of a composition: `full,512,16`.
    #[arg(long, value_delimiter = ',', value_parser = commands::parse_expert_size, conflicts_with = "composition")]
    pub experts: Option<Vec<ExpertSize>>,
}

fn out_dir(out: &Option<PathBuf>) -> &Path {
    out.as_deref().unwrap_or(Path::new("."))
}

/// Runs a parsed command and returns its standard output.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Gen { scenario } => commands::gen(scenario, cli.seed, out_dir(&cli.out)),
        Command::Extract(c) => {
            let ranks = match (&c.rank, &c.ranks) {
                (Some(r), None) => RankArg::Uniform(*r),
                (None, Some(m)) => RankArg::PerTarget(m.clone()),
                _ => return Err(CliError::Usage("give exactly one of --rank or --ranks".into())),
            };
            commands::extract(&c.expert, &c.base, &ranks, out_dir(&cli.out))
        }
        Command::Compose(c) => {
            let args = ComposeArgs {
                base: c.base.clone(),
                router: c.router.clone(),
                experts: c.experts.clone(),
                top_k: c.top_k,
                softmax_mode: c.softmax_mode.into(),
                activation: c.activation.into(),
                targets: BlockTargets {
                    up: c.up.clone(),
                    down: c.down.clone(),
                },
            };
            let output = match &cli.out {
                Some(p) if p.extension().is_some_and(|x| x == "toml") => p.clone(),
                other => out_dir(other).join("composition.toml"),
            };
            commands::compose(&args, &output)
        }
        Command::Forward(c) => {
            let input = match (&c.input, c.random) {
                (Some(p), None) => ForwardInput::File(p.clone()),
                (None, Some(count)) => ForwardInput::Random {
                    count,
                    seed: cli.seed.unwrap_or(0),
                },
                _ => return Err(CliError::Usage("give exactly one of --input or --random".into())),
            };
            commands::forward(&c.composition, &input, cli.format)
        }
        Command::Sweep(c) => {
            let weights = match (&c.weights, &c.composition) {
                (Some(d), None) => SweepWeights::Dir(d.clone()),
                (None, Some(p)) => SweepWeights::Composition(p.clone()),
                _ => return Err(CliError::Usage("give exactly one of --weights or --composition".into())),
            };
            let args = SweepArgs {
                scenario: c.scenario.clone(),
                weights,
                ranks: c.ranks.clone(),
                mixture_ranks: c.mixture_ranks.clone(),
                active: c.active.clone(),
                single: c.kind != SweepKind::Mixture,
                mixture: c.kind != SweepKind::Single,
                softmax_mode: c.softmax_mode.map(Into::into),
                probes: c.probes,
                seed: cli.seed,
            };
            commands::sweep(&args, out_dir(&cli.out), cli.format)
        }
        Command::SelectRanks(c) => {
            let table = scores::read(&c.table)?;
            let sel = commands::select_ranks(&table, &c.strategy, c.models.as_deref())?;
            let text = commands::render_selection(&sel, cli.format)?;
            match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                    let name = match cli.format {
                        Format::Csv => "selection.csv",
                        Format::JsonLines => "selection.jsonl",
                    };
                    let p = dir.join(name);
                    std::fs::write(&p, &text).map_err(|e| CliError::io(&p, e))?;
                    Ok(format!("{text}wrote {}\n", p.display()))
                }
                None => Ok(text),
            }
        }
        Command::Analyze(c) => commands::analyze(&c.table, c.baseline.as_ref(), c.min_points, out_dir(&cli.out)),
        Command::Params(c) => commands::params(&c.preset, c.composition.as_deref(), c.experts.as_deref(), cli.format),
    }
}
