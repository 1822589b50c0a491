//! Subcommand bodies. Each returns the text destined for standard output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flexmore_core::adapter::{self, mixture_params, ExpertSize, ParamCount, ParamPreset, RankSpec};
use flexmore_core::analysis::{mean_of_group_means, peak_rank, Rank, ScoreTable};
use flexmore_core::linalg::Matrix;
use flexmore_core::moe::{self, Activation, BlockTargets, SoftmaxMode};
use flexmore_core::synth::{make_probes, Rng, Scenario, BASE_NAME};
use flexmore_core::weights;
use serde::Serialize;

use crate::composition::{self, Composition, ExpertKind, ExpertRef};
use crate::error::{CliError, Result};
use crate::report::{self, Baseline};
use crate::sweep::{self, SweepConfig, SweepSource, Workload};
use crate::{scores, Format};

pub const ROUTER_FILE: &str = "router.fmw";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut s: Scenario =
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.message())))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    for e in &s.experts {
        let stem = e.name.as_str();
        if stem == "router" || stem.contains(['/', '\\']) || stem.starts_with('.') {
            return Err(CliError::Data(format!(
                "expert name '{stem}' cannot be used as a file name"
            )));
        }
    }
    s.validate()?;
    Ok(s)
}

fn bundle_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.fmw"))
}

/// Writes `base.fmw`, `<expert>.fmw` per expert and `router.fmw`.
pub fn gen(scenario: &Path, seed: Option<u64>, out: &Path) -> Result<String> {
    let s = load_scenario(scenario, seed)?;
    let world = s.generate()?;
    ensure_dir(out)?;
    let mut log = String::new();
    let mut save = |b: &weights::ExpertBundle| -> Result<()> {
        let p = bundle_file(out, b.name());
        weights::save_bundle(b, &p)?;
        writeln!(log, "wrote {}", p.display()).expect("write to String");
        Ok(())
    };
    save(&world.base)?;
    for e in &world.experts {
        save(e)?;
    }
    let router_path = out.join(ROUTER_FILE);
    composition::save_router(world.router.weights(), &router_path)?;
    writeln!(log, "wrote {}", router_path.display()).expect("write to String");
    Ok(log)
}

/// `--rank r` or `--ranks target=r,...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankArg {
    Uniform(usize),
    PerTarget(BTreeMap<String, usize>),
}

pub fn parse_per_target(s: &str) -> std::result::Result<BTreeMap<String, usize>, String> {
    let mut map = BTreeMap::new();
    for item in s.split(',').filter(|x| !x.trim().is_empty()) {
        let (t, r) = item
            .split_once('=')
            .ok_or_else(|| format!("expected target=rank, got '{item}'"))?;
        let r: usize = r.trim().parse().map_err(|_| format!("bad rank in '{item}'"))?;
        if map.insert(t.trim().to_string(), r).is_some() {
            return Err(format!("target '{}' given twice", t.trim()));
        }
    }
    if map.is_empty() {
        return Err("no target ranks given".into());
    }
    Ok(map)
}

pub fn extract(expert: &Path, base: &Path, ranks: &RankArg, output: &Path) -> Result<String> {
    let e = weights::load_bundle(expert)?;
    let b = weights::load_bundle(base)?;
    let spec = match ranks {
        RankArg::Uniform(r) => RankSpec::Uniform(*r),
        RankArg::PerTarget(m) => RankSpec::PerTarget(m.clone()),
    };
    let ad = adapter::phlora_extract(&e, &b, &spec)?;
    let delta = adapter::delta(&e, &b)?;
    let path = if output.extension().is_some_and(|x| x == "fma") {
        output.to_path_buf()
    } else {
        ensure_dir(output)?;
        output.join(format!("{}.fma", ad.name()))
    };
    weights::save_adapter(&ad, &path)?;

    let mut out = String::from("target,rank,frobenius_error,relative_error\n");
    for entry in ad.entries() {
        let d = delta.get(&entry.target).expect("delta has every target");
        let err = d.sub(&entry.product())?.frobenius_norm();
        let norm = d.frobenius_norm();
        let rel = if norm > 0.0 { err / norm } else { 0.0 };
        writeln!(out, "{},{},{err:e},{rel:e}", entry.target, entry.rank).expect("write to String");
    }
    writeln!(out, "wrote {}", path.display()).expect("write to String");
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ComposeArgs {
    pub base: PathBuf,
    pub router: PathBuf,
    pub experts: Vec<ExpertRef>,
    pub top_k: usize,
    pub softmax_mode: SoftmaxMode,
    pub activation: Activation,
    pub targets: BlockTargets,
}

pub fn parse_expert_ref(s: &str) -> std::result::Result<ExpertRef, String> {
    let (kind, path) = s
        .split_once(':')
        .ok_or_else(|| format!("expected full:<path> or adapter:<path>, got '{s}'"))?;
    let kind = match kind {
        "full" => ExpertKind::Full,
        "adapter" => ExpertKind::Adapter,
        other => return Err(format!("unknown expert kind '{other}' (full|adapter)")),
    };
    Ok(ExpertRef {
        kind,
        path: PathBuf::from(path),
    })
}

/// Validates the mixture and writes its composition file.
pub fn compose(args: &ComposeArgs, output: &Path) -> Result<String> {
    let dir = output.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        ensure_dir(&dir)?;
    }
    let comp = Composition {
        base: composition::relative_to(&args.base, &dir),
        router: composition::relative_to(&args.router, &dir),
        top_k: args.top_k,
        softmax_mode: args.softmax_mode,
        activation: args.activation,
        targets: args.targets.clone(),
        experts: args
            .experts
            .iter()
            .map(|e| ExpertRef {
                kind: e.kind,
                path: composition::relative_to(&e.path, &dir),
            })
            .collect(),
    };
    let spec = comp.resolve(&dir)?;
    comp.save(output)?;
    let mut out = format!(
        "mixture: {} experts + base, hidden {}, top_k {}, softmax {:?}\n",
        spec.experts().len(),
        spec.hidden(),
        spec.top_k(),
        spec.softmax_mode()
    );
    for e in spec.experts() {
        writeln!(out, "  {}", e.name()).expect("write to String");
    }
    writeln!(out, "wrote {}", output.display()).expect("write to String");
    Ok(out)
}

pub enum ForwardInput {
    File(PathBuf),
    Random { count: usize, seed: u64 },
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CliError::Data(format!(
                "{}:{}: non-finite input",
                path.display(),
                i + 1
            )));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn forward(composition: &Path, input: &ForwardInput, format: Format) -> Result<String> {
    let (comp, dir) = Composition::load(composition)?;
    let spec = comp.resolve(&dir)?;
    let xs = match input {
        ForwardInput::File(p) => read_vectors(p)?,
        ForwardInput::Random { count, seed } => make_probes(&mut Rng::new(*seed), spec.hidden(), *count, 1.0, None),
    };
    let mut out = String::new();
    for x in &xs {
        let y = moe::mixture_forward(&spec, x)?;
        match format {
            Format::Csv => {
                let fields: Vec<String> = y.iter().map(f64::to_string).collect();
                writeln!(out, "{}", fields.join(",")).expect("write to String");
            }
            Format::JsonLines => {
                let routes: Vec<(usize, f64)> = moe::route(&spec, x)?.iter().map(|r| (r.index, r.weight)).collect();
                let line = serde_json::json!({ "output": y, "routes": routes });
                writeln!(out, "{line}").expect("write to String");
            }
        }
    }
    Ok(out)
}

/// Where a sweep's dense weights come from.
pub enum SweepWeights {
    /// `gen` output directory for the scenario.
    Dir(PathBuf),
    /// Composition whose experts are all dense bundles.
    Composition(PathBuf),
}

pub struct SweepArgs {
    pub scenario: PathBuf,
    pub weights: SweepWeights,
    pub ranks: Option<Vec<Rank>>,
    pub mixture_ranks: Option<Vec<Rank>>,
    pub active: Option<Vec<usize>>,
    pub single: bool,
    pub mixture: bool,
    pub softmax_mode: Option<SoftmaxMode>,
    pub probes: Option<usize>,
    pub seed: Option<u64>,
}

fn sweep_source(args: &SweepArgs, scenario: &Scenario) -> Result<(SweepSource, SoftmaxMode)> {
    match &args.weights {
        SweepWeights::Dir(dir) => {
            let base = weights::load_bundle(bundle_file(dir, BASE_NAME))?;
            let experts = scenario
                .experts
                .iter()
                .map(|e| Ok(weights::load_bundle(bundle_file(dir, &e.name))?))
                .collect::<Result<Vec<_>>>()?;
            let router = composition::load_router(&dir.join(ROUTER_FILE))?;
            let source = SweepSource {
                base,
                experts,
                router,
                activation: Activation::default(),
                targets: scenario.targets.clone(),
            };
            Ok((source, args.softmax_mode.unwrap_or_default()))
        }
        SweepWeights::Composition(path) => {
            let (comp, dir) = Composition::load(path)?;
            if let Some(e) = comp.experts.iter().find(|e| e.kind != ExpertKind::Full) {
                return Err(CliError::Data(format!(
                    "sweeps need dense experts; '{}' is an adapter",
                    e.path.display()
                )));
            }
            let spec = comp.resolve(&dir)?;
            let experts = spec
                .experts()
                .iter()
                .map(|e| match e {
                    moe::ExpertEntry::Full(b) => b.clone(),
                    moe::ExpertEntry::LowRank(_) => unreachable!("checked above"),
                })
                .collect();
            let source = SweepSource {
                base: spec.base().clone(),
                experts,
                router: spec.router().weights().clone(),
                activation: spec.activation(),
                targets: spec.targets().clone(),
            };
            Ok((source, args.softmax_mode.unwrap_or(spec.softmax_mode())))
        }
    }
}

pub fn sweep(args: &SweepArgs, out: &Path, format: Format) -> Result<String> {
    let mut scenario = load_scenario(&args.scenario, args.seed)?;
    if let Some(p) = args.probes {
        if p == 0 {
            return Err(CliError::Usage("probe count must be positive".into()));
        }
        scenario.probes = p;
        scenario.groups.iter_mut().for_each(|g| g.probes = None);
    }
    let (source, mode) = sweep_source(args, &scenario)?;
    if source.base.get(&source.targets.up).map(Matrix::cols) != Some(scenario.hidden) {
        return Err(CliError::Data(format!(
            "weights do not match the scenario's hidden size {}",
            scenario.hidden
        )));
    }
    let n = source.experts.len();
    let active = match &args.active {
        Some(a) => a.clone(),
        None => [2, 4, 7].into_iter().filter(|a| *a <= n + 1).collect(),
    };
    let config = SweepConfig {
        ranks: if args.single {
            args.ranks.clone().unwrap_or_else(sweep::default_ranks)
        } else {
            Vec::new()
        },
        mixture_ranks: if args.mixture {
            let mut r = args.mixture_ranks.clone().unwrap_or_else(sweep::default_mixture_ranks);
            if !r.contains(&Rank::Full) {
                r.push(Rank::Full);
            }
            r
        } else {
            Vec::new()
        },
        active: if args.mixture { active } else { Vec::new() },
        softmax_mode: mode,
    };
    let workload = Workload::from_scenario(&scenario);
    let table = sweep::run_sweep(&source, &config, &workload)?;
    ensure_dir(out)?;
    let path = out.join(match format {
        Format::Csv => "scores.csv",
        Format::JsonLines => "scores.jsonl",
    });
    write_file(&path, &scores::render(&table, format)?)?;
    Ok(format!(
        "{} records for {} models\nwrote {}\n",
        table.records().len(),
        table.models().len(),
        path.display()
    ))
}

/// Rank selection strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    /// Score on one group only.
    Group(String),
    /// Mean over all group means.
    Avg,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "avg" => Ok(Strategy::Avg),
            _ => match s.strip_prefix("group:") {
                Some(g) if !g.is_empty() => Ok(Strategy::Group(g.to_string())),
                _ => Err(format!("strategy must be 'avg' or 'group:<name>', got '{s}'")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub expert: String,
    pub rank: u64,
    pub log2_rank: u32,
    pub metric: f64,
}

/// Per model, the swept rank maximizing the strategy's metric, ties to the
/// lowest rank. `full` rows are not candidates.
pub fn select_ranks(table: &ScoreTable, strategy: &Strategy, models: Option<&[String]>) -> Result<Vec<Selection>> {
    let groups: Vec<&str> = table.groups();
    if let Strategy::Group(g) = strategy {
        if !groups.contains(&g.as_str()) {
            return Err(CliError::Data(format!("group '{g}' not in score table")));
        }
    }
    let chosen: Vec<String> = match models {
        Some(m) => m.to_vec(),
        None => table
            .models()
            .into_iter()
            .filter(|m| table.ranks_of(m).iter().any(|r| r.value().is_some()))
            .map(String::from)
            .collect(),
    };
    if chosen.is_empty() {
        return Err(CliError::Data("no models with swept ranks".into()));
    }
    for m in &chosen {
        if !table.ranks_of(m).iter().any(|r| r.value().is_some()) {
            return Err(CliError::Data(format!("model '{m}' has no swept ranks")));
        }
    }
    let mut out = Vec::new();
    for model in &chosen {
        let mut points = Vec::new();
        for rank in table.ranks_of(model).into_iter().filter(|r| r.value().is_some()) {
            let means = table.group_means(model, rank);
            let missing = |g: &str| CliError::Data(format!("model '{model}' is missing rank {rank} in group '{g}'"));
            let metric = match strategy {
                Strategy::Group(g) => *means.get(g).ok_or_else(|| missing(g))?,
                Strategy::Avg => {
                    if let Some(g) = groups.iter().find(|g| !means.contains_key(**g)) {
                        return Err(missing(g));
                    }
                    let per: Vec<Vec<f64>> = means.values().map(|m| vec![*m]).collect();
                    mean_of_group_means(&per)?
                }
            };
            points.push((rank.value().expect("low rank"), metric));
        }
        let p = peak_rank(&points)?;
        out.push(Selection {
            expert: model.clone(),
            rank: p.r_star,
            log2_rank: p.log2_r_star,
            metric: p.score,
        });
    }
    Ok(out)
}

pub fn render_selection(sel: &[Selection], format: Format) -> Result<String> {
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("expert,rank,log2_rank,metric\n");
            for s in sel {
                writeln!(out, "{},{},{},{:.4}", s.expert, s.rank, s.log2_rank, s.metric).expect("write to String");
            }
        }
        Format::JsonLines => {
            for s in sel {
                let line = serde_json::to_string(s).map_err(|e| CliError::Data(e.to_string()))?;
                writeln!(out, "{line}").expect("write to String");
            }
        }
    }
    Ok(out)
}

pub fn analyze(table_path: &Path, baseline: Option<&Baseline>, min_points: usize, out: &Path) -> Result<String> {
    let table = scores::read(table_path)?;
    let report = report::analyze(&table, baseline, min_points)?;
    let files = report.files()?;
    ensure_dir(out)?;
    let mut log = format!(
        "{} models, {} groups, {} regressions\n",
        report.models.len(),
        report.groups.len(),
        report.regressions.len()
    );
    for (name, contents) in files {
        let p = out.join(name);
        write_file(&p, &contents)?;
        writeln!(log, "wrote {}", p.display()).expect("write to String");
    }
    Ok(log)
}

/// One expert slot in a parameter report.
pub fn parse_expert_size(s: &str) -> std::result::Result<ExpertSize, String> {
    match s.trim() {
        "full" => Ok(ExpertSize::Full),
        r => r
            .parse::<u64>()
            .ok()
            .filter(|r| *r > 0)
            .map(ExpertSize::LowRank)
            .ok_or_else(|| format!("expert size must be 'full' or a positive rank, got '{r}'")),
    }
}

fn composition_sizes(path: &Path) -> Result<Vec<ExpertSize>> {
    let (comp, dir) = Composition::load(path)?;
    comp.experts
        .iter()
        .map(|e| match e.kind {
            ExpertKind::Full => Ok(ExpertSize::Full),
            ExpertKind::Adapter => {
                let a = weights::load_adapter(dir.join(&e.path))?;
                let r = a.entries()[0].rank;
                if a.entries().iter().any(|x| x.rank != r) {
                    return Err(CliError::Data(format!(
                        "adapter '{}' has mixed ranks; parameter presets need one rank per expert",
                        a.name()
                    )));
                }
                Ok(ExpertSize::LowRank(r as u64))
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ParamsJson {
    preset: String,
    base: u64,
    experts: Vec<(String, u64)>,
    total: u64,
    total_display: String,
}

pub fn params(
    preset: &str,
    composition: Option<&Path>,
    sizes: Option<&[ExpertSize]>,
    format: Format,
) -> Result<String> {
    let p = ParamPreset::by_name(preset).ok_or_else(|| CliError::Usage(format!("unknown preset '{preset}'")))?;
    let sizes: Vec<ExpertSize> = match (composition, sizes) {
        (Some(path), None) => composition_sizes(path)?,
        (None, Some(s)) => s.to_vec(),
        _ => {
            return Err(CliError::Usage(
                "give exactly one of a composition file or --experts".into(),
            ))
        }
    };
    let label = |s: &ExpertSize| match s {
        ExpertSize::Full => "full".to_string(),
        ExpertSize::LowRank(r) => format!("r={r}"),
    };
    let per: Vec<(String, u64)> = sizes
        .iter()
        .map(|s| Ok((label(s), p.expert_params(*s)?)))
        .collect::<Result<_>>()?;
    let total = mixture_params(&p, &sizes)?;
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("component,params,display\n");
            writeln!(out, "base,{},{}", p.base_params, ParamCount(p.base_params)).expect("write to String");
            for (i, (l, n)) in per.iter().enumerate() {
                writeln!(out, "expert{} {l},{n},{}", i + 1, ParamCount(*n)).expect("write to String");
            }
            writeln!(out, "total,{},{total}", total.0).expect("write to String");
        }
        Format::JsonLines => {
            let j = ParamsJson {
                preset: p.name.clone(),
                base: p.base_params,
                experts: per,
                total: total.0,
                total_display: total.to_string(),
            };
            let line = serde_json::to_string(&j).map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(out, "{line}").expect("write to String");
        }
    }
    Ok(out)
}
