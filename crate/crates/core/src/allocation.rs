//! Layer-wise expert allocation plans and trainable-parameter accounting.
//!
//! A plan is stored fully expanded, one expert count per transformer layer.
//! The four-digit group codes (`8642`, `2468`, `8228`, `5555`) split the
//! layer stack into four equal consecutive groups, lowest layers first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::MatrixTag;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocationError {
    #[error("{num_layers} layers cannot be split into 4 equal groups; use an explicit counts list")]
    IndivisibleLayers { num_layers: usize },
    #[error("group value {value} is below top-k {k}")]
    GroupBelowTopK { value: usize, k: usize },
    #[error("unknown allocation shape `{0}`")]
    UnknownShape(String),
    #[error("invalid allocation spec `{spec}`: {reason}")]
    Parse { spec: String, reason: String },
    #[error("unknown dims preset `{0}`")]
    UnknownDims(String),
}

/// The four layer-wise allocation patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationShape {
    /// More experts in lower layers (`8642`).
    Triangle,
    /// More experts in higher layers (`2468`).
    InvertedTriangle,
    /// More experts at both ends (`8228`).
    Hourglass,
    /// Uniform (`5555`).
    Rectangle,
}

impl AllocationShape {
    pub const ALL: [AllocationShape; 4] = [
        AllocationShape::Triangle,
        AllocationShape::InvertedTriangle,
        AllocationShape::Hourglass,
        AllocationShape::Rectangle,
    ];

    pub fn default_groups(self) -> [usize; 4] {
        match self {
            AllocationShape::Triangle => [8, 6, 4, 2],
            AllocationShape::InvertedTriangle => [2, 4, 6, 8],
            AllocationShape::Hourglass => [8, 2, 2, 8],
            AllocationShape::Rectangle => [5, 5, 5, 5],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AllocationShape::Triangle => "triangle",
            AllocationShape::InvertedTriangle => "inverted_triangle",
            AllocationShape::Hourglass => "hourglass",
            AllocationShape::Rectangle => "rectangle",
        }
    }
}

impl fmt::Display for AllocationShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AllocationShape {
    type Err = AllocationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "triangle" | "tri" => Ok(AllocationShape::Triangle),
            "inverted_triangle" | "inverted-triangle" | "inverted" | "inv" => {
                Ok(AllocationShape::InvertedTriangle)
            }
            "hourglass" | "hour" => Ok(AllocationShape::Hourglass),
            "rectangle" | "rect" | "square" => Ok(AllocationShape::Rectangle),
            other => Err(AllocationError::UnknownShape(other.to_string())),
        }
    }
}

/// Expert count per layer plus the router's top-K.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    counts: Vec<usize>,
    top_k: usize,
    #[serde(default)]
    shape: Option<AllocationShape>,
}

impl AllocationPlan {
    /// Unchecked; see [`validate`].
    pub fn new(counts: Vec<usize>, top_k: usize) -> Self {
        Self {
            counts,
            top_k,
            shape: None,
        }
    }

    /// The named pattern this plan was built from, if any.
    pub fn shape(&self) -> Option<AllocationShape> {
        self.shape
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn num_layers(&self) -> usize {
        self.counts.len()
    }

    pub fn total_experts(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Compact code: the four group values when the plan is group-shaped,
    /// otherwise the comma-joined counts.
    pub fn code(&self) -> String {
        let m = self.counts.len();
        if m > 0 && m.is_multiple_of(4) {
            let g = m / 4;
            let groups: Vec<usize> = (0..4).map(|i| self.counts[i * g]).collect();
            let regular = self
                .counts
                .iter()
                .enumerate()
                .all(|(j, &c)| c == groups[j / g]);
            if regular && groups.iter().all(|&v| v < 10) {
                return groups.iter().map(|v| v.to_string()).collect();
            }
        }
        self.counts
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Repeats each group value over `num_layers / 4` consecutive layers.
pub fn plan_from_shape(
    shape: AllocationShape,
    groups: [usize; 4],
    num_layers: usize,
    top_k: usize,
) -> Result<AllocationPlan, AllocationError> {
    if num_layers == 0 || !num_layers.is_multiple_of(4) {
        return Err(AllocationError::IndivisibleLayers { num_layers });
    }
    if let Some(&value) = groups.iter().find(|&&v| v < top_k) {
        return Err(AllocationError::GroupBelowTopK { value, k: top_k });
    }
    let per_group = num_layers / 4;
    let counts = groups
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, per_group))
        .collect();
    Ok(AllocationPlan {
        counts,
        top_k,
        shape: Some(shape),
    })
}

/// One adapted weight matrix: `in_dim -> out_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptedMatrix {
    pub tag: MatrixTag,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub rank: usize,
    pub matrices: Vec<AdaptedMatrix>,
}

impl ModelDims {
    /// Dims with the seven default adapted matrices.
    pub fn new(num_layers: usize, d_model: usize, d_ffn: usize, rank: usize) -> Self {
        let matrices = MatrixTag::ALL
            .iter()
            .map(|&tag| {
                let (in_dim, out_dim) = tag.dims(d_model, d_ffn);
                AdaptedMatrix { tag, in_dim, out_dim }
            })
            .collect();
        Self {
            num_layers,
            d_model,
            d_ffn,
            rank,
            matrices,
        }
    }

    pub fn llama2_7b() -> Self {
        Self::new(32, 4096, 11008, 8)
    }

    pub fn toy_default() -> Self {
        Self::new(4, 64, 172, 8)
    }

    /// `llama2-7b`, `toy-default`, or `layers,d_model,d_ffn,rank`.
    pub fn preset(name: &str) -> Result<Self, AllocationError> {
        match name.trim() {
            "llama2-7b" | "llama2_7b" => Ok(Self::llama2_7b()),
            "toy-default" | "toy_default" | "toy" => Ok(Self::toy_default()),
            other => {
                let parts: Vec<usize> = other
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| AllocationError::UnknownDims(other.to_string()))?;
                match parts[..] {
                    [m, d, f, r] => Ok(Self::new(m, d, f, r)),
                    _ => Err(AllocationError::UnknownDims(other.to_string())),
                }
            }
        }
    }

    /// Trainable parameters one expert adds to one layer across all adapted
    /// matrices, including its router column.
    pub fn params_per_expert(&self) -> u64 {
        self.matrices
            .iter()
            .map(|m| (self.rank * (m.in_dim + m.out_dim) + m.in_dim) as u64)
            .sum()
    }
}

/// Expert pairs (`r * (in + out)` each) plus router weights (`in` per expert)
/// summed over layers and adapted matrices.
pub fn trainable_param_count(plan: &AllocationPlan, dims: &ModelDims) -> u64 {
    let per_expert = dims.params_per_expert();
    plan.counts().iter().map(|&n| n as u64 * per_expert).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    LayerCount { expected: usize, found: usize },
    TooFewExperts { layer: usize, experts: usize, k: usize },
    RankTooLarge { rank: usize, bound: usize },
    ZeroTopK,
    ZeroRank,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LayerCount { expected, found } => {
                write!(f, "plan has {found} layers, model has {expected}")
            }
            Violation::TooFewExperts { layer, experts, k } => {
                write!(f, "layer {layer}: N_j < K ({experts} < {k})")
            }
            Violation::RankTooLarge { rank, bound } => {
                write!(f, "rank {rank} must be below the smallest matrix dimension {bound}")
            }
            Violation::ZeroTopK => f.write_str("top-k must be at least 1"),
            Violation::ZeroRank => f.write_str("rank must be at least 1"),
        }
    }
}

/// Collects every violation rather than stopping at the first.
pub fn validate(plan: &AllocationPlan, dims: &ModelDims, k: usize) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if k == 0 {
        out.push(Violation::ZeroTopK);
    }
    if plan.num_layers() != dims.num_layers {
        out.push(Violation::LayerCount {
            expected: dims.num_layers,
            found: plan.num_layers(),
        });
    }
    for (layer, &experts) in plan.counts().iter().enumerate() {
        if experts < k {
            out.push(Violation::TooFewExperts { layer, experts, k });
        }
    }
    if dims.rank == 0 {
        out.push(Violation::ZeroRank);
    }
    let bound = dims
        .matrices
        .iter()
        .map(|m| m.in_dim.min(m.out_dim))
        .min()
        .unwrap_or(usize::MAX);
    if dims.rank >= bound {
        out.push(Violation::RankTooLarge {
            rank: dims.rank,
            bound,
        });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Parsed allocation string, independent of the layer count.
///
/// Accepted forms: `shape=inverted group=2468`, `inverted:2468`,
/// `triangle` (default groups), `counts=1,1,3,3`, or a bare `1,1,3,3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AllocationSpec {
    Groups {
        shape: AllocationShape,
        groups: [usize; 4],
    },
    Counts(Vec<usize>),
}

impl AllocationSpec {
    pub fn to_plan(&self, num_layers: usize, top_k: usize) -> Result<AllocationPlan, AllocationError> {
        match self {
            AllocationSpec::Groups { shape, groups } => plan_from_shape(*shape, *groups, num_layers, top_k),
            AllocationSpec::Counts(c) => Ok(AllocationPlan::new(c.clone(), top_k)),
        }
    }
}

fn parse_group_code(spec: &str, code: &str) -> Result<[usize; 4], AllocationError> {
    let digits: Vec<usize> = code
        .trim()
        .chars()
        .map(|c| c.to_digit(10).map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| AllocationError::Parse {
            spec: spec.to_string(),
            reason: format!("group code `{code}` must be four digits"),
        })?;
    digits.try_into().map_err(|_| AllocationError::Parse {
        spec: spec.to_string(),
        reason: format!("group code `{code}` must be four digits"),
    })
}

fn parse_counts(spec: &str, list: &str) -> Result<Vec<usize>, AllocationError> {
    list.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AllocationError::Parse {
            spec: spec.to_string(),
            reason: e.to_string(),
        })
}

impl FromStr for AllocationSpec {
    type Err = AllocationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let spec = s.trim();
        let mut shape = None;
        let mut groups = None;
        let mut counts = None;
        for token in spec.split_whitespace() {
            if let Some((key, value)) = token.split_once('=') {
                match key {
                    "shape" => shape = Some(value.parse::<AllocationShape>()?),
                    "group" | "groups" => groups = Some(parse_group_code(spec, value)?),
                    "counts" => counts = Some(parse_counts(spec, value)?),
                    _ => {
                        return Err(AllocationError::Parse {
                            spec: spec.to_string(),
                            reason: format!("unknown key `{key}`"),
                        })
                    }
                }
            } else if let Some((name, code)) = token.split_once(':') {
                shape = Some(name.parse::<AllocationShape>()?);
                groups = Some(parse_group_code(spec, code)?);
            } else if token.contains(',') || token.chars().all(|c| c.is_ascii_digit()) && token.len() != 4 {
                counts = Some(parse_counts(spec, token)?);
            } else {
                shape = Some(token.parse::<AllocationShape>()?);
            }
        }
        match (shape, groups, counts) {
            (None, None, Some(c)) => Ok(AllocationSpec::Counts(c)),
            (Some(shape), groups, None) => Ok(AllocationSpec::Groups {
                shape,
                groups: groups.unwrap_or_else(|| shape.default_groups()),
            }),
            _ => Err(AllocationError::Parse {
                spec: spec.to_string(),
                reason: "expected a shape with optional group code, or an explicit counts list".into(),
            }),
        }
    }
}
