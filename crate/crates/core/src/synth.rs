//! Deterministic synthetic experts, probes and fidelity scores.
//!
//! Everything here is a pure function of a `u64` seed, driven by splitmix64,
//! so generated bundles are byte-identical across runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm2, Matrix};
use crate::moe::{self, BlockTargets, MixtureSpec, MoeError, RouterMatrix};
use crate::weights::{ExpertBundle, WeightsError};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("fidelity needs at least one probe")]
    NoProbes,
    #[error("mixtures are not comparable: {0}")]
    Incomparable(String),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// splitmix64 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent generator for a numbered sub-stream of `seed`.
    pub fn for_stream(seed: u64, stream: u64) -> Self {
        Self::new(mix64(seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-scale, scale)`.
    #[inline]
    pub fn uniform(&mut self, scale: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * scale
    }
}

/// Entries i.i.d. uniform in `[-scale, scale]`, drawn in row-major order.
pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m.set(i, j, rng.uniform(scale));
        }
    }
    m
}

/// `count` orthonormal vectors of length `dim` (modified Gram–Schmidt, two
/// passes; a draw whose residual falls below 1e-8 is discarded and redrawn).
pub fn orthonormal_vectors(rng: &mut Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(
        count <= dim,
        "cannot draw {count} orthonormal vectors in dimension {dim}"
    );
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut w: Vec<f64> = (0..dim).map(|_| rng.uniform(1.0)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm2(&w);
        if n < 1e-8 {
            continue;
        }
        w.iter_mut().for_each(|x| *x /= n);
        basis.push(w);
    }
    basis
}

/// Planted singular spectrum for a synthetic expert delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    pub effective_rank: usize,
    pub sigma0: f64,
    pub decay: f64,
    #[serde(default)]
    pub noise_floor: f64,
}

impl SpectrumSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(SynthError::InvalidSpectrum(format!(
                "sigma0 must be > 0, got {}",
                self.sigma0
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(SynthError::InvalidSpectrum(format!(
                "decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return Err(SynthError::InvalidSpectrum(format!(
                "noise_floor must be >= 0, got {}",
                self.noise_floor
            )));
        }
        Ok(())
    }

    /// Planted `sigma_k` for 1-based `k <= effective_rank`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma0 * self.decay.powi(k as i32 - 1)
    }
}

/// Base plus a planted delta per target:
/// `W_i = W_0 + sum_k sigma_k u_k v_kᵀ + noise_floor * N`, with `N` of unit
/// Frobenius norm.
pub fn make_expert(base: &ExpertBundle, spec: &SpectrumSpec, rng: &mut Rng, name: &str) -> Result<ExpertBundle> {
    spec.validate()?;
    let rho = spec.effective_rank;
    let mut targets = Vec::with_capacity(base.targets().len());
    for t in base.targets() {
        let (d_out, d_in) = t.matrix.shape();
        if rho > d_out.min(d_in) {
            return Err(SynthError::InvalidSpectrum(format!(
                "effective rank {rho} exceeds min dims of target '{}' ({d_out}x{d_in})",
                t.name
            )));
        }
        let us = orthonormal_vectors(rng, d_out, rho);
        let vs = orthonormal_vectors(rng, d_in, rho);
        let mut w = t.matrix.clone();
        for (k, (u, v)) in us.iter().zip(&vs).enumerate() {
            let s = spec.sigma(k + 1);
            for (i, ui) in u.iter().enumerate() {
                for (j, vj) in v.iter().enumerate() {
                    w.set(i, j, w.get(i, j) + s * ui * vj);
                }
            }
        }
        if spec.noise_floor > 0.0 {
            let noise = random_matrix(rng, d_out, d_in, 1.0);
            let scale = spec.noise_floor / noise.frobenius_norm();
            w = w.add(&noise.scale(scale)).expect("same shape");
        }
        targets.push((t.name.clone(), w));
    }
    Ok(ExpertBundle::new(name, targets)?)
}

/// `count` probe vectors of length `h`. With a subspace size, probes are
/// random combinations of a fixed random orthonormal basis of that size;
/// otherwise entries are uniform. Coefficients are uniform in `[-scale, scale]`.
pub fn make_probes(rng: &mut Rng, h: usize, count: usize, scale: f64, subspace: Option<usize>) -> Vec<Vec<f64>> {
    match subspace {
        Some(k) => {
            let basis = orthonormal_vectors(rng, h, k.min(h));
            (0..count)
                .map(|_| {
                    let mut x = vec![0.0; h];
                    for q in &basis {
                        let c = rng.uniform(scale);
                        x.iter_mut().zip(q).for_each(|(a, b)| *a += c * b);
                    }
                    x
                })
                .collect()
        }
        None => (0..count)
            .map(|_| (0..h).map(|_| rng.uniform(scale)).collect())
            .collect(),
    }
}

/// Agreement between a low-rank mixture and its dense reference in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FidelityScore {
    pub value: f64,
    pub probes: usize,
}

/// Per-probe `max(0, 1 - |y_lr - y_full| / |y_full|)`, averaged. A probe
/// where both outputs are exactly zero counts as 1.
pub fn fidelity(spec_lr: &MixtureSpec, spec_full: &MixtureSpec, probes: &[Vec<f64>]) -> Result<FidelityScore> {
    if probes.is_empty() {
        return Err(SynthError::NoProbes);
    }
    if spec_lr.hidden() != spec_full.hidden() {
        return Err(SynthError::Incomparable(format!(
            "hidden sizes {} vs {}",
            spec_lr.hidden(),
            spec_full.hidden()
        )));
    }
    if spec_lr.top_k() != spec_full.top_k()
        || spec_lr.softmax_mode() != spec_full.softmax_mode()
        || spec_lr.n_experts() != spec_full.n_experts()
    {
        return Err(SynthError::Incomparable("routing configuration differs".into()));
    }
    let mut total = 0.0;
    for x in probes {
        let y_lr = moe::mixture_forward(spec_lr, x)?;
        let y_full = moe::mixture_forward(spec_full, x)?;
        total += probe_fidelity(&y_lr, &y_full);
    }
    Ok(FidelityScore {
        value: total / probes.len() as f64,
        probes: probes.len(),
    })
}

fn probe_fidelity(y_lr: &[f64], y_full: &[f64]) -> f64 {
    let reference = norm2(y_full);
    if reference == 0.0 {
        return if norm2(y_lr) == 0.0 { 1.0 } else { 0.0 };
    }
    let err: f64 = y_lr
        .iter()
        .zip(y_full)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    (1.0 - err / reference).max(0.0)
}

// ---------------------------------------------------------------------------
// Scenarios

fn default_base_scale() -> f64 {
    0.5
}
fn default_router_scale() -> f64 {
    1.0
}
fn default_probes() -> usize {
    16
}
fn default_probe_scale() -> f64 {
    1.0
}
fn default_tasks() -> usize {
    1
}

/// One synthetic domain expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertScenario {
    pub name: String,
    #[serde(flatten)]
    pub spectrum: SpectrumSpec,
    /// Random stream; defaults to `1 + index`. Two experts with the same
    /// spectrum and stream are identical.
    #[serde(default)]
    pub stream: Option<u64>,
}

/// Synthetic evaluation group: a probe distribution split into tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScenario {
    pub name: String,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    /// Probes per task; falls back to the scenario's `probes`.
    #[serde(default)]
    pub probes: Option<usize>,
    #[serde(default)]
    pub scale: Option<f64>,
    /// Restrict probes to a random subspace of this dimension.
    #[serde(default)]
    pub subspace: Option<usize>,
}

/// Everything needed to regenerate base, experts, router and probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub hidden: usize,
    pub ffn: usize,
    #[serde(default)]
    pub targets: BlockTargets,
    #[serde(default = "default_base_scale")]
    pub base_scale: f64,
    #[serde(default = "default_router_scale")]
    pub router_scale: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_probe_scale")]
    pub probe_scale: f64,
    pub experts: Vec<ExpertScenario>,
    #[serde(default)]
    pub groups: Vec<GroupScenario>,
}

/// Generated weights for a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub base: ExpertBundle,
    pub experts: Vec<ExpertBundle>,
    /// `(n+1) x h`, row 0 for the base.
    pub router: RouterMatrix,
}

const BASE_STREAM: u64 = 0;
const GROUP_STREAM_OFFSET: u64 = 1 << 32;

pub const BASE_NAME: &str = "base";

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SynthError::InvalidScenario(msg));
        if self.hidden == 0 || self.ffn == 0 {
            return bad("hidden and ffn must be positive".into());
        }
        if self.targets.up == self.targets.down {
            return bad("block targets must have distinct names".into());
        }
        if self.experts.is_empty() {
            return bad("at least one expert is required".into());
        }
        let mut names = std::collections::HashSet::new();
        for e in &self.experts {
            if e.name == BASE_NAME || e.name.is_empty() || !names.insert(e.name.as_str()) {
                return bad(format!("expert name '{}' is empty, reserved or duplicated", e.name));
            }
            e.spectrum.validate()?;
            if e.spectrum.effective_rank > self.hidden.min(self.ffn) {
                return Err(SynthError::InvalidSpectrum(format!(
                    "expert '{}': effective rank {} exceeds min(hidden, ffn) = {}",
                    e.name,
                    e.spectrum.effective_rank,
                    self.hidden.min(self.ffn)
                )));
            }
        }
        let mut group_names = std::collections::HashSet::new();
        for g in self.groups() {
            if g.name.is_empty() || !group_names.insert(g.name.clone()) {
                return bad(format!("group name '{}' is empty or duplicated", g.name));
            }
            if g.tasks == 0 || g.probes.unwrap_or(self.probes) == 0 {
                return bad(format!("group '{}' needs at least one task and one probe", g.name));
            }
            if g.subspace.is_some_and(|k| k == 0 || k > self.hidden) {
                return bad(format!("group '{}' subspace must be in 1..={}", g.name, self.hidden));
            }
        }
        Ok(())
    }

    /// Declared groups, or a single group "all" built from the top-level
    /// probe settings.
    pub fn groups(&self) -> Vec<GroupScenario> {
        if self.groups.is_empty() {
            vec![GroupScenario {
                name: "all".into(),
                tasks: 1,
                probes: None,
                scale: None,
                subspace: None,
            }]
        } else {
            self.groups.clone()
        }
    }

    pub fn expert_stream(&self, index: usize) -> u64 {
        self.experts[index].stream.unwrap_or(1 + index as u64)
    }

    pub fn generate(&self) -> Result<SyntheticWorld> {
        self.validate()?;
        let mut rng = Rng::for_stream(self.seed, BASE_STREAM);
        let base = ExpertBundle::new(
            BASE_NAME,
            vec![
                (
                    self.targets.up.clone(),
                    random_matrix(&mut rng, self.ffn, self.hidden, self.base_scale),
                ),
                (
                    self.targets.down.clone(),
                    random_matrix(&mut rng, self.hidden, self.ffn, self.base_scale),
                ),
            ],
        )?;
        let mut router_rows: Vec<f64> = (0..self.hidden).map(|_| rng.uniform(self.router_scale)).collect();

        let mut experts = Vec::with_capacity(self.experts.len());
        for (i, e) in self.experts.iter().enumerate() {
            let mut rng = Rng::for_stream(self.seed, self.expert_stream(i));
            experts.push(make_expert(&base, &e.spectrum, &mut rng, &e.name)?);
            router_rows.extend((0..self.hidden).map(|_| rng.uniform(self.router_scale)));
        }
        let router =
            Matrix::new(self.experts.len() + 1, self.hidden, router_rows).expect("router rows are finite and complete");
        Ok(SyntheticWorld {
            base,
            experts,
            router: RouterMatrix::new(router),
        })
    }

    /// Probe sets for group `index`, one `Vec` per task.
    pub fn group_probes(&self, index: usize) -> Vec<Vec<Vec<f64>>> {
        let g = &self.groups()[index];
        let mut rng = Rng::for_stream(self.seed, GROUP_STREAM_OFFSET + index as u64);
        let per_task = g.probes.unwrap_or(self.probes);
        let scale = g.scale.unwrap_or(self.probe_scale);
        let all = make_probes(&mut rng, self.hidden, per_task * g.tasks, scale, g.subspace);
        all.chunks(per_task).map(|c| c.to_vec()).collect()
    }
}
