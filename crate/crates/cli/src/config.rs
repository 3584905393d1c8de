//! JSON experiment configuration.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use vecchia::geom::{coord_order, grid_locations, maxmin_order, GeomError, LocationSet, Ordering};
use vecchia::inference::{FreeParam, ParamBounds};
use vecchia::kernels::{KernelError, ModelConfig};
use vecchia::plan::{
    make_fsa, make_independent_blocks, make_mpp, make_mra, singleton_plan, ConditioningRule,
    Partition, PlanError, VecchiaPlan,
};

use crate::rng::{stream_rng, Purpose};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub geometry: GeometrySpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Observations CSV (`x1,...,xd,z`) for `loglik`, `fit` and `posterior`;
    /// simulated from `model` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<KlGridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<PosteriorSpec>,
}

fn one() -> usize {
    1
}

fn unit_spacing() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometrySpec {
    Grid {
        dim: usize,
        points_per_side: usize,
        #[serde(default = "unit_spacing")]
        spacing: f64,
    },
    /// Grid with every coordinate perturbed uniformly by up to
    /// `jitter * spacing`; redrawn per replicate.
    JitteredGrid {
        dim: usize,
        points_per_side: usize,
        #[serde(default = "unit_spacing")]
        spacing: f64,
        jitter: f64,
    },
    /// `n` uniform points in the unit cube; redrawn per replicate.
    Uniform { dim: usize, n: usize },
    Csv { path: PathBuf },
}

impl GeometrySpec {
    pub fn dim(&self) -> Option<usize> {
        match self {
            GeometrySpec::Grid { dim, .. }
            | GeometrySpec::JitteredGrid { dim, .. }
            | GeometrySpec::Uniform { dim, .. } => Some(*dim),
            GeometrySpec::Csv { .. } => None,
        }
    }

    pub fn locations(&self, seed: u64, replicate: u64) -> Result<LocationSet, ConfigError> {
        match self {
            GeometrySpec::Grid {
                dim,
                points_per_side,
                spacing,
            } => Ok(grid_locations(*dim, *points_per_side, *spacing)?),
            GeometrySpec::JitteredGrid {
                dim,
                points_per_side,
                spacing,
                jitter,
            } => {
                if !(0.0..0.5).contains(jitter) {
                    return Err(ConfigError::Invalid("jitter must lie in [0, 0.5)".into()));
                }
                let g = grid_locations(*dim, *points_per_side, *spacing)?;
                let mut rng = stream_rng(seed, Purpose::Geometry, replicate);
                let pts = g
                    .points()
                    .map(|p| {
                        p.iter()
                            .map(|&c| c + jitter * spacing * rng.random_range(-1.0..1.0))
                            .collect()
                    })
                    .collect();
                Ok(LocationSet::new(pts)?)
            }
            GeometrySpec::Uniform { dim, n } => {
                let mut rng = stream_rng(seed, Purpose::Geometry, replicate);
                let pts = (0..*n)
                    .map(|_| (0..*dim).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect();
                Ok(LocationSet::new(pts)?)
            }
            GeometrySpec::Csv { path } => {
                let f = std::fs::File::open(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                Ok(LocationSet::read_csv(std::io::BufReader::new(f))?)
            }
        }
    }

    /// Whether every replicate sees the same locations.
    pub fn is_fixed(&self) -> bool {
        matches!(self, GeometrySpec::Grid { .. } | GeometrySpec::Csv { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingKind {
    Coord,
    Maxmin,
}

impl OrderingKind {
    pub fn name(&self) -> &'static str {
        match self {
            OrderingKind::Coord => "coord",
            OrderingKind::Maxmin => "maxmin",
        }
    }

    pub fn order(&self, s: &LocationSet) -> Ordering {
        match self {
            OrderingKind::Coord => coord_order(s),
            OrderingKind::Maxmin => maxmin_order(s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    Nn,
    FirstM,
}

impl ConditioningKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConditioningKind::Nn => "nn",
            ConditioningKind::FirstM => "first_m",
        }
    }

    pub fn rule(&self, m: usize) -> ConditioningRule {
        match self {
            ConditioningKind::Nn => ConditioningRule::NearestPrevious { m },
            ConditioningKind::FirstM => ConditioningRule::FirstM { m },
        }
    }
}

/// One approximation (or baseline) to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Vecchia {
        partition: Partition,
        ordering: OrderingKind,
        conditioning: ConditioningKind,
        m: usize,
    },
    IndependentBlocks { blocks_per_side: usize },
    Mpp { knots_per_side: usize },
    Fsa {
        knots_per_side: usize,
        blocks_per_side: usize,
    },
    Mra { j: usize, levels: usize, r: usize },
    Exact,
    Fcl,
    Pbl { blocks_per_side: usize },
}

/// Flat description of a method for CSV columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodLabel {
    pub method: String,
    pub ordering: &'static str,
    pub conditioning: &'static str,
    pub m: usize,
}

impl MethodSpec {
    pub fn label(&self) -> MethodLabel {
        let fixed = |method: String, m: usize| MethodLabel {
            method,
            ordering: "coord",
            conditioning: "none",
            m,
        };
        match self {
            MethodSpec::Vecchia {
                partition,
                ordering,
                conditioning,
                m,
            } => MethodLabel {
                method: partition.name().to_string(),
                ordering: ordering.name(),
                conditioning: conditioning.name(),
                m: *m,
            },
            MethodSpec::IndependentBlocks { blocks_per_side } => {
                fixed(format!("blocks{blocks_per_side}"), 0)
            }
            MethodSpec::Mpp { knots_per_side } => fixed(format!("mpp{knots_per_side}"), 1),
            MethodSpec::Fsa {
                knots_per_side,
                blocks_per_side,
            } => fixed(format!("fsa{knots_per_side}x{blocks_per_side}"), 1),
            MethodSpec::Mra { j, levels, r } => MethodLabel {
                method: format!("mra{j}x{levels}x{r}"),
                ordering: "maxmin",
                conditioning: "ancestors",
                m: *levels,
            },
            MethodSpec::Exact => fixed("exact".into(), 0),
            MethodSpec::Fcl => fixed("fcl".into(), 0),
            MethodSpec::Pbl { blocks_per_side } => fixed(format!("pbl{blocks_per_side}"), 0),
        }
    }

    /// Whether the method is a Vecchia plan (as opposed to a dense or
    /// composite baseline).
    pub fn is_plan(&self) -> bool {
        !matches!(self, MethodSpec::Exact | MethodSpec::Fcl | MethodSpec::Pbl { .. })
    }

    /// The Vecchia plan for `s`, with conditioning size `m` overriding the
    /// configured one when given.
    pub fn plan(&self, s: &LocationSet, m: Option<usize>) -> Result<VecchiaPlan, ConfigError> {
        Ok(match self {
            MethodSpec::Vecchia {
                partition,
                ordering,
                conditioning,
                m: m0,
            } => {
                let rule = conditioning.rule(m.unwrap_or(*m0));
                singleton_plan(s, &ordering.order(s), &rule)?.apply(*partition)
            }
            MethodSpec::IndependentBlocks { blocks_per_side } => {
                make_independent_blocks(s, *blocks_per_side)?
            }
            MethodSpec::Mpp { knots_per_side } => make_mpp(s, &knot_grid(s, *knots_per_side)?)?,
            MethodSpec::Fsa {
                knots_per_side,
                blocks_per_side,
            } => make_fsa(s, &knot_grid(s, *knots_per_side)?, *blocks_per_side)?,
            MethodSpec::Mra { j, levels, r } => make_mra(s, *j, *levels, *r)?,
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "{} is not a Vecchia plan",
                    self.label().method
                )))
            }
        })
    }
}

/// Regular knots at cell centres of the bounding box, nudged off the cell
/// centre so they avoid coinciding with grid data.
pub fn knot_grid(s: &LocationSet, per_side: usize) -> Result<LocationSet, ConfigError> {
    if per_side == 0 {
        return Err(ConfigError::Invalid("knots_per_side must be >= 1".into()));
    }
    let bb = s.bounding_box();
    let d = bb.len();
    let total = per_side.pow(d as u32);
    let pts = (0..total)
        .map(|flat| {
            let mut rest = flat;
            let mut p = vec![0.0; d];
            for k in (0..d).rev() {
                let idx = rest % per_side;
                rest /= per_side;
                let (lo, hi) = bb[k];
                let w = (hi - lo) / per_side as f64;
                p[k] = lo + (idx as f64 + 0.5 + 0.0137) * w;
            }
            p
        })
        .collect();
    Ok(LocationSet::new(pts)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KlMode {
    /// Dense-oracle divergences over `x` and over `z`.
    Exact,
    /// Per-replicate `loglik(reference) - loglik(method)` on simulated data,
    /// the reference being maxmin nearest-neighbour SGV with `reference_m`.
    LoglikReference { reference_m: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlGridSpec {
    pub nu: Vec<f64>,
    /// Signal-to-noise ratios `sigma2 / tau2`; `null` means no noise.
    pub snr: Vec<Option<f64>>,
    #[serde(default = "exact_mode")]
    pub mode: KlMode,
}

fn exact_mode() -> KlMode {
    KlMode::Exact
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySpec {
    /// Points per side of each grid; dimension and spacing come from a
    /// `grid` geometry.
    pub points_per_side: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub free: Vec<ParamBounds>,
    /// Conditioning sizes visited in turn with warm starts; the method's own
    /// `m` is used when empty.
    #[serde(default)]
    pub m_schedule: Vec<usize>,
    /// Starting point; the data-generating model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<ModelConfig>,
    #[serde(default = "max_evals")]
    pub max_evals_per_stage: usize,
}

fn max_evals() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorSpec {
    #[serde(default)]
    pub marginal_variances: bool,
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.resolve()?;
        if self.replicates == 0 {
            return Err(ConfigError::Invalid("replicates must be >= 1".into()));
        }
        if let Some(d) = self.geometry.dim() {
            if d == 0 {
                return Err(ConfigError::Invalid("dim must be >= 1".into()));
            }
        }
        if let Some(fit) = &self.fit {
            if fit.free.is_empty() {
                return Err(ConfigError::Invalid("fit.free must be nonempty".into()));
            }
            let mut seen: Vec<FreeParam> = Vec::new();
            for b in &fit.free {
                if seen.contains(&b.param) {
                    return Err(ConfigError::Invalid(format!(
                        "{} listed twice in fit.free",
                        b.param.name()
                    )));
                }
                seen.push(b.param);
            }
        }
        if let Some(kl) = &self.kl {
            if kl.nu.is_empty() || kl.snr.is_empty() {
                return Err(ConfigError::Invalid("kl.nu and kl.snr must be nonempty".into()));
            }
            if kl.snr.iter().flatten().any(|&r| !(r > 0.0 && r.is_finite())) {
                return Err(ConfigError::Invalid("kl.snr entries must be positive or null".into()));
            }
        }
        Ok(())
    }

    /// Methods, failing when none are configured.
    pub fn require_methods(&self) -> Result<&[MethodSpec], ConfigError> {
        if self.methods.is_empty() {
            Err(ConfigError::Invalid("method list is empty".into()))
        } else {
            Ok(&self.methods)
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex sha256 of the canonical JSON, first 16 characters.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes());
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
