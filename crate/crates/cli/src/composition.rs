//! Composition files: a TOML description of a mixture that points at weight
//! files on disk.
//!
//! ```toml
//! base = "base.fmw"
//! router = "router.fmw"
//! top_k = 2
//! softmax_mode = "global"
//!
//! [[experts]]
//! kind = "adapter"
//! path = "code.r64.fma"
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::path::{Path, PathBuf};

use flexmore_core::linalg::Matrix;
use flexmore_core::moe::{Activation, BlockTargets, ExpertEntry, MixtureSpec, RouterMatrix, SoftmaxMode};
use flexmore_core::weights::{self, ExpertBundle};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Target name of the single matrix in a router file.
pub const ROUTER_TARGET: &str = "router";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Full,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRef {
    pub kind: ExpertKind,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composition {
    pub base: PathBuf,
    pub router: PathBuf,
    pub top_k: usize,
    #[serde(default)]
    pub softmax_mode: SoftmaxMode,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub targets: BlockTargets,
    #[serde(default)]
    pub experts: Vec<ExpertRef>,
}

impl Composition {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let comp: Composition =
            toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.message())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((comp, dir))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    /// Loads every referenced file and validates the mixture.
    pub fn resolve(&self, dir: &Path) -> Result<MixtureSpec> {
        let base = weights::load_bundle(dir.join(&self.base))?;
        let router = load_router(&dir.join(&self.router))?;
        let experts = self
            .experts
            .iter()
            .map(|e| {
                let p = dir.join(&e.path);
                Ok(match e.kind {
                    ExpertKind::Full => ExpertEntry::Full(weights::load_bundle(&p)?),
                    ExpertKind::Adapter => ExpertEntry::LowRank(weights::load_adapter(&p)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureSpec::with_options(
            base,
            experts,
            RouterMatrix::new(router),
            self.top_k,
            self.softmax_mode,
            self.activation,
            self.targets.clone(),
        )?)
    }
}

pub fn load_router(path: &Path) -> Result<Matrix> {
    let b = weights::load_bundle(path)?;
    match (b.get(ROUTER_TARGET), b.targets()) {
        (Some(m), _) => Ok(m.clone()),
        (None, [only]) => Ok(only.matrix.clone()),
        _ => Err(CliError::Data(format!(
            "{}: router file needs a target named '{ROUTER_TARGET}'",
            path.display()
        ))),
    }
}

pub fn save_router(router: &Matrix, path: &Path) -> Result<()> {
    let b = ExpertBundle::new(ROUTER_TARGET, vec![(ROUTER_TARGET.to_string(), router.clone())])?;
    Ok(weights::save_bundle(&b, path)?)
}

/// `path` relative to `dir` when it lies underneath it, absolute otherwise.
pub fn relative_to(path: &Path, dir: &Path) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, d) = (abs(path), abs(dir));
    match p.strip_prefix(&d) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => p,
    }
}
