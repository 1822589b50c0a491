//! Mixture of a full-size base expert and rank-heterogeneous experts.
//!
//! Router logits are `W_r x` with one row per expert (row 0 is the base).
//! Softmax is taken over all logits, the `top_k` largest are kept, and the
//! output is the weighted sum of the selected experts' FFN outputs. A
//! low-rank expert runs the base weights with its adapter added per target,
//! `(W_0 + B A) x`, evaluated in factored form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{self, AdapterError};
use crate::linalg::{dot, LinalgError, Matrix};
use crate::weights::{AdapterEntry, ExpertBundle, LowRankAdapter};

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid mixture: {0}")]
    Invalid(String),
    #[error("expert '{expert}' is anchored to '{wanted}', which is not the mixture base '{base}'")]
    UnresolvedBase {
        expert: String,
        wanted: String,
        base: String,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

pub type Result<T> = std::result::Result<T, MoeError>;

/// How the top-k weights are formed from the full softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxMode {
    /// Softmax over all experts; selected weights are used as-is.
    #[default]
    Global,
    /// Selected weights are rescaled to sum to one.
    Renormalized,
}

impl std::str::FromStr for SoftmaxMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global" => Ok(Self::Global),
            "renormalized" => Ok(Self::Renormalized),
            other => Err(format!("unknown softmax mode '{other}' (global|renormalized)")),
        }
    }
}

/// Nonlinearity between the two block matrices. `Linear` exists for
/// hand-checkable tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }
}

/// Names of the two bundle targets that form an expert block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTargets {
    /// `d_ff x h`
    pub up: String,
    /// `h x d_ff`
    pub down: String,
}

impl Default for BlockTargets {
    fn default() -> Self {
        Self {
            up: "w1".into(),
            down: "w2".into(),
        }
    }
}

/// Two-matrix FFN: `w2 · act(w1 · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBlock {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl ExpertBlock {
    pub fn new(w1: Matrix, w2: Matrix) -> Result<Self> {
        if w2.cols() != w1.rows() || w2.rows() != w1.cols() {
            return Err(MoeError::Invalid(format!(
                "block shapes do not chain: w1 {:?}, w2 {:?}",
                w1.shape(),
                w2.shape()
            )));
        }
        Ok(Self { w1, w2 })
    }

    pub fn from_bundle(bundle: &ExpertBundle, targets: &BlockTargets) -> Result<Self> {
        let get = |name: &str| {
            bundle
                .get(name)
                .cloned()
                .ok_or_else(|| MoeError::Invalid(format!("bundle '{}' has no target '{name}'", bundle.name())))
        };
        Self::new(get(&targets.up)?, get(&targets.down)?)
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }
}

pub fn expert_forward(block: &ExpertBlock, x: &[f64], activation: Activation) -> Result<Vec<f64>> {
    if x.len() != block.hidden() {
        return Err(MoeError::DimensionMismatch {
            what: "expert input",
            expected: block.hidden(),
            got: x.len(),
        });
    }
    let mut z = block.w1.matvec(x)?;
    z.iter_mut().for_each(|v| *v = activation.apply(*v));
    Ok(block.w2.matvec(&z)?)
}

/// Router weights, one row per expert; row 0 is the base.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterMatrix(Matrix);

impl RouterMatrix {
    pub fn new(weights: Matrix) -> Self {
        Self(weights)
    }

    pub fn weights(&self) -> &Matrix {
        &self.0
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.0.cols() {
            return Err(MoeError::DimensionMismatch {
                what: "router input",
                expected: self.0.cols(),
                got: x.len(),
            });
        }
        Ok((0..self.0.rows()).map(|i| dot(self.0.row(i), x)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertEntry {
    Full(ExpertBundle),
    LowRank(LowRankAdapter),
}

impl ExpertEntry {
    pub fn name(&self) -> &str {
        match self {
            ExpertEntry::Full(b) => b.name(),
            ExpertEntry::LowRank(a) => a.name(),
        }
    }
}

/// One routed expert and its mixing weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Routed {
    pub index: usize,
    pub weight: f64,
}

/// A validated mixture: base, experts, router and routing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    base: ExpertBundle,
    experts: Vec<ExpertEntry>,
    router: RouterMatrix,
    top_k: usize,
    softmax_mode: SoftmaxMode,
    activation: Activation,
    targets: BlockTargets,
}

impl MixtureSpec {
    pub fn new(
        base: ExpertBundle,
        experts: Vec<ExpertEntry>,
        router: RouterMatrix,
        top_k: usize,
        softmax_mode: SoftmaxMode,
    ) -> Result<Self> {
        Self::with_options(
            base,
            experts,
            router,
            top_k,
            softmax_mode,
            Activation::default(),
            BlockTargets::default(),
        )
    }

    pub fn with_options(
        base: ExpertBundle,
        experts: Vec<ExpertEntry>,
        router: RouterMatrix,
        top_k: usize,
        softmax_mode: SoftmaxMode,
        activation: Activation,
        targets: BlockTargets,
    ) -> Result<Self> {
        let block = ExpertBlock::from_bundle(&base, &targets)?;
        let h = block.hidden();
        let n_total = experts.len() + 1;
        if router.weights().rows() != n_total {
            return Err(MoeError::Invalid(format!(
                "router has {} rows, mixture has {n_total} experts",
                router.weights().rows()
            )));
        }
        if router.weights().cols() != h {
            return Err(MoeError::Invalid(format!(
                "router width {} does not match hidden size {h}",
                router.weights().cols()
            )));
        }
        if top_k == 0 || top_k > n_total {
            return Err(MoeError::Invalid(format!("top_k {top_k} out of range 1..={n_total}")));
        }
        for e in &experts {
            match e {
                ExpertEntry::Full(b) => {
                    if let Some(msg) = base.first_incompatibility(b) {
                        return Err(MoeError::Invalid(format!(
                            "expert '{}' not composable with base: {msg}",
                            b.name()
                        )));
                    }
                }
                ExpertEntry::LowRank(a) => {
                    if a.base_name() != base.name() {
                        return Err(MoeError::UnresolvedBase {
                            expert: a.name().to_string(),
                            wanted: a.base_name().to_string(),
                            base: base.name().to_string(),
                        });
                    }
                    adapter::check_adapter_fits(a, &base)?;
                }
            }
        }
        Ok(Self {
            base,
            experts,
            router,
            top_k,
            softmax_mode,
            activation,
            targets,
        })
    }

    pub fn base(&self) -> &ExpertBundle {
        &self.base
    }

    pub fn experts(&self) -> &[ExpertEntry] {
        &self.experts
    }

    pub fn router(&self) -> &RouterMatrix {
        &self.router
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn softmax_mode(&self) -> SoftmaxMode {
        self.softmax_mode
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn targets(&self) -> &BlockTargets {
        &self.targets
    }

    /// Number of experts including the base.
    pub fn n_experts(&self) -> usize {
        self.experts.len() + 1
    }

    pub fn hidden(&self) -> usize {
        self.router.weights().cols()
    }

    pub fn with_top_k(&self, top_k: usize) -> Result<Self> {
        Self::with_options(
            self.base.clone(),
            self.experts.clone(),
            self.router.clone(),
            top_k,
            self.softmax_mode,
            self.activation,
            self.targets.clone(),
        )
    }

    /// Same mixture with every low-rank expert replaced by its dense
    /// `W_0 + B A` bundle.
    pub fn materialized(&self) -> Result<Self> {
        let experts = self
            .experts
            .iter()
            .map(|e| match e {
                ExpertEntry::Full(b) => Ok(ExpertEntry::Full(b.clone())),
                ExpertEntry::LowRank(a) => Ok(ExpertEntry::Full(adapter::materialize(a, &self.base)?)),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_options(
            self.base.clone(),
            experts,
            self.router.clone(),
            self.top_k,
            self.softmax_mode,
            self.activation,
            self.targets.clone(),
        )
    }
}

/// Top-k selection from raw logits. Sorted by descending logit, ties to the
/// lower index; weights are the full softmax values (renormalized over the
/// selection in `Renormalized` mode).
pub fn route_logits(logits: &[f64], top_k: usize, mode: SoftmaxMode) -> Vec<Routed> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();

    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut routed: Vec<Routed> = order
        .into_iter()
        .take(top_k)
        .map(|index| Routed {
            index,
            weight: exps[index] / total,
        })
        .collect();
    if mode == SoftmaxMode::Renormalized {
        let sum: f64 = routed.iter().map(|r| r.weight).sum();
        routed.iter_mut().for_each(|r| r.weight /= sum);
    }
    routed
}

pub fn route(spec: &MixtureSpec, x: &[f64]) -> Result<Vec<Routed>> {
    let logits = spec.router.logits(x)?;
    Ok(route_logits(&logits, spec.top_k, spec.softmax_mode))
}

/// `W x`, or `W x + B (A x)` when an adapter entry is present.
fn apply_target(w: &Matrix, entry: Option<&AdapterEntry>, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = w.matvec(x)?;
    if let Some(e) = entry {
        let ax = e.a.matvec(x)?;
        let bax = e.b.matvec(&ax)?;
        y.iter_mut().zip(bax).for_each(|(a, b)| *a += b);
    }
    Ok(y)
}

/// Output of expert `index` (0 = base) on `x`.
pub fn expert_output(spec: &MixtureSpec, index: usize, x: &[f64]) -> Result<Vec<f64>> {
    let t = &spec.targets;
    let (bundle, adapter) = match index {
        0 => (&spec.base, None),
        i => match spec.experts.get(i - 1) {
            Some(ExpertEntry::Full(b)) => (b, None),
            Some(ExpertEntry::LowRank(a)) => (&spec.base, Some(a)),
            None => {
                return Err(MoeError::Invalid(format!(
                    "expert index {i} out of range (n+1 = {})",
                    spec.n_experts()
                )))
            }
        },
    };
    let up = bundle.get(&t.up).expect("validated at construction");
    let down = bundle.get(&t.down).expect("validated at construction");
    let mut z = apply_target(up, adapter.and_then(|a| a.entry(&t.up)), x)?;
    z.iter_mut().for_each(|v| *v = spec.activation.apply(*v));
    apply_target(down, adapter.and_then(|a| a.entry(&t.down)), &z)
}

/// `y = sum over routed experts of weight_i * expert_i(x)`.
pub fn mixture_forward(spec: &MixtureSpec, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.hidden() {
        return Err(MoeError::DimensionMismatch {
            what: "mixture input",
            expected: spec.hidden(),
            got: x.len(),
        });
    }
    let mut y = vec![0.0; spec.hidden()];
    for r in route(spec, x)? {
        let out = expert_output(spec, r.index, x)?;
        y.iter_mut().zip(out).for_each(|(acc, v)| *acc += r.weight * v);
    }
    Ok(y)
}

/// Routes each column of `xs` (`h x batch`) independently.
pub fn mixture_forward_batch(spec: &MixtureSpec, xs: &Matrix) -> Result<Matrix> {
    if xs.rows() != spec.hidden() {
        return Err(MoeError::DimensionMismatch {
            what: "batch rows",
            expected: spec.hidden(),
            got: xs.rows(),
        });
    }
    let mut out = Matrix::zeros(xs.rows(), xs.cols());
    for j in 0..xs.cols() {
        let y = mixture_forward(spec, &xs.column(j))?;
        for (i, v) in y.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_bundle(name: &str, w1: Matrix, w2: Matrix) -> ExpertBundle {
        ExpertBundle::new(name, vec![("w1".into(), w1), ("w2".into(), w2)]).unwrap()
    }

    #[test]
    fn equal_logits_split_evenly() {
        let r = route_logits(&[0.3, 0.3], 2, SoftmaxMode::Global);
        assert_eq!(r.iter().map(|r| r.index).collect::<Vec<_>>(), vec![0, 1]);
        assert!(r.iter().all(|r| (r.weight - 0.5).abs() < 1e-15));
    }

    #[test]
    fn softmax_three_to_one() {
        let logits = [3f64.ln(), 1f64.ln()];
        let r = route_logits(&logits, 1, SoftmaxMode::Global);
        assert_eq!(r[0].index, 0);
        assert!((r[0].weight - 0.75).abs() < 1e-15);
        let r = route_logits(&logits, 1, SoftmaxMode::Renormalized);
        assert_eq!(r[0].weight, 1.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let r = route_logits(&[0.0, 2.0, 2.0, 1.0], 2, SoftmaxMode::Global);
        assert_eq!(r.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn silu_block_cases() {
        let id = Matrix::identity(1);
        let block = ExpertBlock::new(id.clone(), id.clone()).unwrap();
        assert_eq!(expert_forward(&block, &[0.0], Activation::Silu).unwrap(), vec![0.0]);
        let y = expert_forward(&block, &[2.0], Activation::Silu).unwrap();
        assert!((y[0] - 1.761_594_155_955_764_9).abs() < 1e-15);

        let zero = ExpertBlock::new(Matrix::zeros(3, 2), Matrix::from_fn(2, 3, |i, j| (i + j) as f64)).unwrap();
        assert_eq!(
            expert_forward(&zero, &[5.0, -7.0], Activation::Silu).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn block_shape_errors() {
        assert!(ExpertBlock::new(Matrix::zeros(3, 2), Matrix::zeros(3, 2)).is_err());
        let block = ExpertBlock::new(Matrix::zeros(3, 2), Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(
            expert_forward(&block, &[1.0], Activation::Silu),
            Err(MoeError::DimensionMismatch {
                expected: 2,
                got: 1,
                ..
            })
        ));
    }

    #[test]
    fn linear_probe_by_hand() {
        let base = block_bundle("base", Matrix::identity(2), Matrix::identity(2));
        let b = Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let a = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let ad = LowRankAdapter::new("e", "base", vec![AdapterEntry::new("w1", b, a).unwrap()]).unwrap();
        let spec = MixtureSpec::with_options(
            base,
            vec![ExpertEntry::LowRank(ad)],
            RouterMatrix::new(Matrix::zeros(2, 2)),
            2,
            SoftmaxMode::Global,
            Activation::Linear,
            BlockTargets::default(),
        )
        .unwrap();
        let y = mixture_forward(&spec, &[1.0, 0.0]).unwrap();
        assert!((y[0] - 1.5).abs() < 1e-15 && y[1].abs() < 1e-15, "{y:?}");
    }

    #[test]
    fn spec_validation() {
        let base = block_bundle("base", Matrix::zeros(3, 2), Matrix::zeros(2, 3));
        let router = RouterMatrix::new(Matrix::zeros(2, 2));
        let ad = LowRankAdapter::new(
            "orphan",
            "elsewhere",
            vec![AdapterEntry::new("w1", Matrix::zeros(3, 1), Matrix::zeros(1, 2)).unwrap()],
        )
        .unwrap();
        let err = MixtureSpec::new(
            base.clone(),
            vec![ExpertEntry::LowRank(ad)],
            router.clone(),
            1,
            SoftmaxMode::Global,
        )
        .unwrap_err();
        assert!(matches!(err, MoeError::UnresolvedBase { .. }));

        let full = ExpertEntry::Full(base.clone().with_name("e"));
        assert!(MixtureSpec::new(base.clone(), vec![full.clone()], router.clone(), 3, SoftmaxMode::Global).is_err());
        assert!(MixtureSpec::new(base.clone(), vec![full.clone()], router.clone(), 0, SoftmaxMode::Global).is_err());
        assert!(MixtureSpec::new(base.clone(), vec![], router, 1, SoftmaxMode::Global).is_err());
        let spec = MixtureSpec::new(
            base,
            vec![full],
            RouterMatrix::new(Matrix::zeros(2, 2)),
            2,
            SoftmaxMode::Global,
        )
        .unwrap();
        assert!(matches!(
            mixture_forward(&spec, &[1.0]),
            Err(MoeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_matches_columnwise() {
        let base = block_bundle(
            "base",
            Matrix::from_fn(3, 2, |i, j| 0.1 * (i as f64) - 0.2 * (j as f64)),
            Matrix::from_fn(2, 3, |i, j| 0.3 * (i as f64 + 1.0) * (j as f64 - 1.0)),
        );
        let router = RouterMatrix::new(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let spec = MixtureSpec::new(
            base.clone(),
            vec![ExpertEntry::Full(base.clone().with_name("copy"))],
            router,
            1,
            SoftmaxMode::Renormalized,
        )
        .unwrap();
        let xs = Matrix::from_rows(&[&[1.0, -1.0, 0.5], &[2.0, 0.0, -3.0]]).unwrap();
        let ys = mixture_forward_batch(&spec, &xs).unwrap();
        for j in 0..3 {
            assert_eq!(ys.column(j), mixture_forward(&spec, &xs.column(j)).unwrap());
        }
    }
}
