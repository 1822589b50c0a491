//! Post-hoc low-rank adapter extraction and parameter accounting.
//!
//! A domain expert `W_i` is stored relative to its base `W_0` as the delta
//! `W_i - W_0`. Truncating the delta's SVD at rank `r` and splitting the
//! singular values symmetrically gives LoRA factors
//! `B = U_r sqrt(S_r)` and `A = sqrt(S_r) V_rᵀ`, so `B·A` is the best rank-`r`
//! approximation of the delta.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, SvdResult};
use crate::weights::{AdapterEntry, ExpertBundle, LowRankAdapter, WeightsError};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("bundles are not composable: {0}")]
    Mismatch(String),
    #[error("target '{target}': rank {rank} out of range 1..={max}")]
    RankOutOfRange { target: String, rank: usize, max: usize },
    #[error("no rank given for target '{0}'")]
    MissingRank(String),
    #[error("rank map names unknown target '{0}'")]
    UnknownTarget(String),
    #[error("adapter is anchored to '{expected}' but base is '{found}'")]
    BaseMismatch { expected: String, found: String },
    #[error("parameter counts need positive arguments: {0}")]
    NonPositive(&'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

/// Per-target rank request for extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankSpec {
    Uniform(usize),
    PerTarget(BTreeMap<String, usize>),
}

impl RankSpec {
    fn rank_for(&self, target: &str) -> Result<usize> {
        match self {
            RankSpec::Uniform(r) => Ok(*r),
            RankSpec::PerTarget(map) => map
                .get(target)
                .copied()
                .ok_or_else(|| AdapterError::MissingRank(target.to_string())),
        }
    }
}

/// Entrywise `expert - base`, per target. Output is named `<expert>.delta`.
pub fn delta(expert: &ExpertBundle, base: &ExpertBundle) -> Result<ExpertBundle> {
    if let Some(msg) = expert.first_incompatibility(base) {
        return Err(AdapterError::Mismatch(msg));
    }
    let targets = expert
        .targets()
        .iter()
        .zip(base.targets())
        .map(|(e, b)| Ok((e.name.clone(), e.matrix.sub(&b.matrix)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertBundle::new(format!("{}.delta", expert.name()), targets)?)
}

/// Full SVD of every target's delta, kept so several ranks can be cut from
/// one decomposition.
#[derive(Debug, Clone)]
pub struct DeltaDecomposition {
    pub expert_name: String,
    pub base_name: String,
    pub targets: Vec<(String, SvdResult)>,
}

impl DeltaDecomposition {
    pub fn new(expert: &ExpertBundle, base: &ExpertBundle) -> Result<Self> {
        let d = delta(expert, base)?;
        let targets = d
            .targets()
            .iter()
            .map(|t| Ok((t.name.clone(), linalg::svd(&t.matrix)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            expert_name: expert.name().to_string(),
            base_name: base.name().to_string(),
            targets,
        })
    }

    /// Builds the adapter for the requested ranks.
    pub fn adapter(&self, ranks: &RankSpec) -> Result<LowRankAdapter> {
        if let RankSpec::PerTarget(map) = ranks {
            if let Some(unknown) = map.keys().find(|k| !self.targets.iter().any(|(t, _)| t == *k)) {
                return Err(AdapterError::UnknownTarget(unknown.clone()));
            }
        }
        let entries = self
            .targets
            .iter()
            .map(|(target, svd)| split_factors(target, svd, ranks.rank_for(target)?))
            .collect::<Result<Vec<_>>>()?;
        let name = match ranks {
            RankSpec::Uniform(r) => format!("{}.r{r}", self.expert_name),
            RankSpec::PerTarget(_) => format!("{}.lora", self.expert_name),
        };
        Ok(LowRankAdapter::new(name, self.base_name.clone(), entries)?)
    }
}

/// `B = U_r sqrt(S_r)`, `A = sqrt(S_r) V_rᵀ`. Zero singular values are kept
/// so the factor shapes always match the requested rank.
fn split_factors(target: &str, svd: &SvdResult, rank: usize) -> Result<AdapterEntry> {
    let max = svd.rank();
    if rank == 0 || rank > max {
        return Err(AdapterError::RankOutOfRange {
            target: target.to_string(),
            rank,
            max,
        });
    }
    let t = linalg::truncate_svd(svd, rank)?;
    let root: Vec<f64> = t.sigma.iter().map(|s| s.sqrt()).collect();
    let b = Matrix::from_fn(t.u.rows(), rank, |i, j| t.u.get(i, j) * root[j]);
    let a = Matrix::from_fn(rank, t.vt.cols(), |i, j| root[i] * t.vt.get(i, j));
    Ok(AdapterEntry::new(target, b, a)?)
}

/// PHLoRA extraction of `expert` relative to `base`.
pub fn phlora_extract(expert: &ExpertBundle, base: &ExpertBundle, ranks: &RankSpec) -> Result<LowRankAdapter> {
    // Validate ranks against shapes before paying for any SVD.
    if let Some(msg) = expert.first_incompatibility(base) {
        return Err(AdapterError::Mismatch(msg));
    }
    for t in base.targets() {
        let r = ranks.rank_for(&t.name)?;
        let max = t.matrix.rows().min(t.matrix.cols());
        if r == 0 || r > max {
            return Err(AdapterError::RankOutOfRange {
                target: t.name.clone(),
                rank: r,
                max,
            });
        }
    }
    DeltaDecomposition::new(expert, base)?.adapter(ranks)
}

/// `W_0 + B·A` for every adapted target; other targets are copied from the
/// base. The result carries the adapter's name.
pub fn materialize(adapter: &LowRankAdapter, base: &ExpertBundle) -> Result<ExpertBundle> {
    if adapter.base_name() != base.name() {
        return Err(AdapterError::BaseMismatch {
            expected: adapter.base_name().to_string(),
            found: base.name().to_string(),
        });
    }
    check_adapter_fits(adapter, base)?;
    let targets = base
        .targets()
        .iter()
        .map(|t| {
            let m = match adapter.entry(&t.name) {
                Some(e) => t.matrix.add(&e.product())?,
                None => t.matrix.clone(),
            };
            Ok((t.name.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertBundle::new(adapter.name(), targets)?)
}

/// Every adapter entry must name a base target of matching shape.
pub fn check_adapter_fits(adapter: &LowRankAdapter, base: &ExpertBundle) -> Result<()> {
    for e in adapter.entries() {
        let m = base
            .get(&e.target)
            .ok_or_else(|| AdapterError::UnknownTarget(e.target.clone()))?;
        if m.shape() != e.target_shape() {
            return Err(AdapterError::Mismatch(format!(
                "target '{}': adapter shape {:?} vs base {:?}",
                e.target,
                e.target_shape(),
                m.shape()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parameter accounting

/// LoRA parameter count `r (d_in + d_out)` for one matrix.
pub fn adapter_params(r: u64, d_in: u64, d_out: u64) -> Result<u64> {
    if r == 0 {
        return Err(AdapterError::NonPositive("rank"));
    }
    if d_in == 0 || d_out == 0 {
        return Err(AdapterError::NonPositive("dimension"));
    }
    Ok(r * (d_in + d_out))
}

/// Largest rank whose adapter is no larger than the dense `d_out x d_in`
/// matrix: `floor(d_in d_out / (d_in + d_out))`.
pub fn max_useful_rank(d_in: u64, d_out: u64) -> u64 {
    (d_in * d_out) / (d_in + d_out)
}

/// Model dimensions used to count mixture parameters at full scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPreset {
    pub name: String,
    /// Model width; the input side of every adapted matrix.
    pub d_in: u64,
    /// Other side of each adapted matrix in one layer.
    pub d_out_list: Vec<u64>,
    pub layers: u64,
    /// Router embedding row each expert adds (one `d_in` vector per layer).
    pub router_params_per_expert: u64,
    pub full_expert_params: u64,
    pub base_params: u64,
}

/// Dense decoder census: untied embeddings, four attention projections,
/// a three-matrix gated FFN and four norm vectors per layer (pre/post norms
/// plus QK-norm), and a final norm.
pub fn dense_decoder_params(vocab: u64, hidden: u64, ffn: u64, layers: u64) -> u64 {
    let embeddings = 2 * vocab * hidden;
    let per_layer = 4 * hidden * hidden + 3 * hidden * ffn + 4 * hidden;
    embeddings + layers * per_layer + hidden
}

impl ParamPreset {
    /// OLMo-2 7B dimensions (h = 4096, FFN 11008, 32 layers, vocab 100352).
    ///
    /// The base counts the dense model plus its own router row; a full expert
    /// is one FFN stack plus a router row. Both round to the 7.30B / 4.33B
    /// shown for FlexOlmo.
    pub fn olmo7b() -> Self {
        let (vocab, hidden, ffn, layers) = (100_352, 4096, 11_008, 32);
        let router = layers * hidden;
        Self {
            name: "olmo7b".into(),
            d_in: hidden,
            d_out_list: vec![ffn; 3],
            layers,
            router_params_per_expert: router,
            full_expert_params: layers * 3 * hidden * ffn + router,
            base_params: dense_decoder_params(vocab, hidden, ffn, layers) + router,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "olmo7b" => Some(Self::olmo7b()),
            _ => None,
        }
    }

    pub fn matrices_per_layer(&self) -> u64 {
        self.d_out_list.len() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.d_in > 0
            && !self.d_out_list.is_empty()
            && self.d_out_list.iter().all(|d| *d > 0)
            && self.layers > 0
            && self.full_expert_params > 0
            && self.base_params > 0;
        if all_positive {
            Ok(())
        } else {
            Err(AdapterError::NonPositive("preset counts"))
        }
    }

    /// Parameters added by one expert of the given size.
    pub fn expert_params(&self, size: ExpertSize) -> Result<u64> {
        match size {
            ExpertSize::Full => Ok(self.full_expert_params),
            ExpertSize::LowRank(r) => {
                let per_layer = self
                    .d_out_list
                    .iter()
                    .map(|d_out| adapter_params(r, self.d_in, *d_out))
                    .sum::<Result<u64>>()?;
                Ok(self.layers * per_layer + self.router_params_per_expert)
            }
        }
    }

    /// Percent of a full expert's parameters saved by an expert of `size`.
    pub fn memory_reduction_pct(&self, size: ExpertSize) -> Result<f64> {
        let cost = self.expert_params(size)? as f64;
        Ok(100.0 * (1.0 - cost / self.full_expert_params as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertSize {
    Full,
    LowRank(u64),
}

/// Total parameters of the base plus the listed experts.
pub fn mixture_params(preset: &ParamPreset, experts: &[ExpertSize]) -> Result<ParamCount> {
    preset.validate()?;
    let experts = experts.iter().map(|e| preset.expert_params(*e)).sum::<Result<u64>>()?;
    Ok(ParamCount(preset.base_params + experts))
}

/// Exact parameter count; `Display` rounds the way the result tables do
/// (two decimals for billions, three significant digits for millions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamCount(pub u64);

impl ParamCount {
    pub fn billions(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn millions(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.0 as f64;
        if n >= 1e9 {
            write!(f, "{:.2}B", n / 1e9)
        } else if n >= 1e6 {
            let m = n / 1e6;
            match m {
                m if m >= 100.0 => write!(f, "{m:.0}M"),
                m if m >= 10.0 => write!(f, "{m:.1}M"),
                m => write!(f, "{m:.2}M"),
            }
        } else if n >= 1e3 {
            write!(f, "{:.1}K", n / 1e3)
        } else {
            write!(f, "{}", self.0)
        }
    }
}
