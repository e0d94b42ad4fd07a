//! LoRA experts, top-K routers and the mixture-of-LoRA adapted linear layer.
//!
//! Weight layout follows the `out x in` convention: the frozen matrix maps an
//! `in`-vector `x` to `W0 x`, expert `i` contributes
//! `(alpha / r) * A_i (B_i x)` with `A_i: out x r` and `B_i: r x in`, and the
//! router holds one `in`-sized row per expert. The router consumes the same
//! activation that enters the adapted matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, SeedRng, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("rank {rank} must be positive and below min({in_dim}, {out_dim})")]
    InvalidRank {
        rank: usize,
        in_dim: usize,
        out_dim: usize,
    },
    #[error("top-k {k} must be between 1 and the expert count {experts}")]
    InvalidTopK { k: usize, experts: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("alpha {0} must be positive")]
    InvalidAlpha(f64),
    #[error("experts disagree on (in, out, rank)")]
    InconsistentExperts,
    #[error("empty batch of routing outcomes")]
    EmptyBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

/// Adapted weight matrices of a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixTag {
    Q,
    K,
    V,
    O,
    Gate,
    Down,
    Up,
}

impl MatrixTag {
    pub const ALL: [MatrixTag; 7] = [
        MatrixTag::Q,
        MatrixTag::K,
        MatrixTag::V,
        MatrixTag::O,
        MatrixTag::Gate,
        MatrixTag::Down,
        MatrixTag::Up,
    ];

    pub const ATTENTION: [MatrixTag; 4] = [MatrixTag::Q, MatrixTag::K, MatrixTag::V, MatrixTag::O];

    pub fn name(self) -> &'static str {
        match self {
            MatrixTag::Q => "q",
            MatrixTag::K => "k",
            MatrixTag::V => "v",
            MatrixTag::O => "o",
            MatrixTag::Gate => "gate",
            MatrixTag::Down => "down",
            MatrixTag::Up => "up",
        }
    }

    /// `(in_dim, out_dim)` for a block with the given widths.
    pub fn dims(self, d_model: usize, d_ffn: usize) -> (usize, usize) {
        match self {
            MatrixTag::Q | MatrixTag::K | MatrixTag::V | MatrixTag::O => (d_model, d_model),
            MatrixTag::Gate | MatrixTag::Up => (d_model, d_ffn),
            MatrixTag::Down => (d_ffn, d_model),
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, MatrixTag::Q | MatrixTag::K | MatrixTag::V | MatrixTag::O)
    }

    pub fn index(self) -> usize {
        MatrixTag::ALL.iter().position(|&t| t == self).expect("listed")
    }
}

impl fmt::Display for MatrixTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatrixTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        MatrixTag::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown matrix tag `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Standard deviation of the Gaussian used for `A`.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            init_std: 1.0 / (8f64).sqrt(),
        }
    }
}

/// How the selected router probabilities become fusion weights. The two are
/// equal in exact arithmetic; they are separate code paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Softmax over all experts, keep the top K, divide by their sum.
    #[default]
    Renormalize,
    /// Softmax over the K selected logits only.
    SelectedSoftmax,
}

/// Dropout behaviour for a forward pass.
pub enum Phase<'a> {
    Eval,
    Train(&'a mut SeedRng),
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert<T> {
    /// `out x rank`, Gaussian at init.
    pub a: Tensor<T>,
    /// `rank x in`, zero at init.
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl<T: Scalar> LoraExpert<T> {
    pub fn new(in_dim: usize, out_dim: usize, cfg: &LoraConfig, rng: &mut SeedRng) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank >= in_dim.min(out_dim) {
            return Err(AdapterError::InvalidRank {
                rank: cfg.rank,
                in_dim,
                out_dim,
            });
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(AdapterError::InvalidDropout(cfg.dropout));
        }
        if cfg.alpha.is_nan() || cfg.alpha <= 0.0 {
            return Err(AdapterError::InvalidAlpha(cfg.alpha));
        }
        Ok(Self {
            a: rng.normal_tensor(&[out_dim, cfg.rank], cfg.init_std),
            b: Tensor::zeros(&[cfg.rank, in_dim]),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        })
    }

    /// Builds an expert from explicit factors.
    pub fn from_factors(a: Tensor<T>, b: Tensor<T>, alpha: f64, dropout: f64) -> Result<Self> {
        let rank = a.cols();
        if b.rows() != rank {
            return Err(NumericsError::ShapeMismatch {
                op: "lora factors",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        Ok(Self {
            a,
            b,
            rank,
            alpha,
            dropout,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn scaling(&self) -> T {
        T::of(self.alpha / self.rank as f64)
    }

    /// `(alpha / r) * A (B dropout(x))`.
    pub fn delta(&self, x: &[T], phase: &mut Phase<'_>) -> Result<Vec<T>> {
        if x.len() != self.in_dim() {
            return Err(NumericsError::ShapeMismatch {
                op: "expert_delta",
                left: self.b.shape().to_vec(),
                right: vec![x.len()],
            }
            .into());
        }
        let input: Vec<T> = match phase {
            Phase::Eval => x.to_vec(),
            Phase::Train(rng) => {
                let mask: Vec<T> = rng.dropout_mask(x.len(), self.dropout);
                x.iter().zip(&mask).map(|(&v, &m)| v * m).collect()
            }
        };
        let hidden = self.b.matmul(&column(&input))?;
        let out = self.a.matmul(&hidden)?;
        let s = self.scaling();
        Ok(out.data().iter().map(|&v| v * s).collect())
    }

    /// Dense adaptation `A B` (`out x in`), without the `alpha / r` factor.
    pub fn effective_delta(&self) -> Tensor<T> {
        self.a.matmul(&self.b).expect("rank agrees by construction")
    }
}

fn column<T: Scalar>(x: &[T]) -> Tensor<T> {
    Tensor::new(vec![x.len(), 1], x.to_vec()).expect("non-empty input")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterState<T> {
    /// `experts x in`.
    pub weight: Tensor<T>,
    pub top_k: usize,
    pub layer: usize,
    pub tag: MatrixTag,
    pub mode: RoutingMode,
}

impl<T: Scalar> RouterState<T> {
    pub const INIT_STD: f64 = 0.02;

    pub fn new(
        in_dim: usize,
        experts: usize,
        top_k: usize,
        layer: usize,
        tag: MatrixTag,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Self::from_weight(rng.normal_tensor(&[experts, in_dim], Self::INIT_STD), top_k, layer, tag)
    }

    pub fn from_weight(weight: Tensor<T>, top_k: usize, layer: usize, tag: MatrixTag) -> Result<Self> {
        let experts = weight.rows();
        if top_k == 0 || top_k > experts {
            return Err(AdapterError::InvalidTopK { k: top_k, experts });
        }
        Ok(Self {
            weight,
            top_k,
            layer,
            tag,
            mode: RoutingMode::default(),
        })
    }

    pub fn experts(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        let row = Tensor::row(x);
        Ok(row.matmul_nt(&self.weight)?.into_data())
    }

    pub fn route(&self, x: &[T]) -> Result<RoutingOutcome<T>> {
        let logits = self.logits(x)?;
        RoutingOutcome::from_logits(&logits, self.top_k, self.mode)
    }
}

/// Result of routing one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutcome<T> {
    /// Selected experts, highest probability first.
    pub selected: Vec<usize>,
    /// Fusion weights aligned with `selected`; they sum to one.
    pub weights: Vec<T>,
    /// Softmax over every expert.
    pub full_softmax: Vec<T>,
}

impl<T: Scalar> RoutingOutcome<T> {
    pub fn from_logits(logits: &[T], k: usize, mode: RoutingMode) -> Result<Self> {
        let probs = Tensor::row(logits).softmax(1)?.into_data();
        let selected = top_k_indices(&probs, k);
        let weights = match mode {
            RoutingMode::Renormalize => {
                let z: T = selected.iter().map(|&i| probs[i]).sum();
                selected.iter().map(|&i| probs[i] / z).collect()
            }
            RoutingMode::SelectedSoftmax => {
                let picked: Vec<T> = selected.iter().map(|&i| logits[i]).collect();
                Tensor::row(&picked).softmax(1)?.into_data()
            }
        };
        Ok(Self {
            selected,
            weights,
            full_softmax: probs,
        })
    }

    /// Fusion weight of `expert`, zero when not selected.
    pub fn weight_of(&self, expert: usize) -> T {
        self.selected
            .iter()
            .position(|&i| i == expert)
            .map_or(T::zero(), |p| self.weights[p])
    }
}

/// Indices of the `k` largest values, largest first; the lower index wins ties.
pub fn top_k_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Frozen matrix plus its experts and router.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear<T> {
    /// `out x in`, never trained.
    pub base: Tensor<T>,
    pub experts: Vec<LoraExpert<T>>,
    pub router: RouterState<T>,
}

/// Tape handles for one adapted layer's parameters.
#[derive(Clone, Debug)]
pub struct LinearVars {
    pub base: Var,
    pub experts: Vec<(Var, Var)>,
    pub router: Var,
}

/// Routing of a batch of tokens through one router, on the tape.
pub struct RoutedBatch<T> {
    pub probs: Var,
    pub selection: Vec<Vec<usize>>,
    pub outcomes: Vec<RoutingOutcome<T>>,
}

impl<T: Scalar> AdaptedLinear<T> {
    pub fn new(
        base: Tensor<T>,
        experts: Vec<LoraExpert<T>>,
        router: RouterState<T>,
    ) -> Result<Self> {
        let (out_dim, in_dim) = (base.rows(), base.cols());
        if experts.len() != router.experts() || router.in_dim() != in_dim {
            return Err(AdapterError::InconsistentExperts);
        }
        let rank = experts.first().map(|e| e.rank);
        for e in &experts {
            if e.in_dim() != in_dim || e.out_dim() != out_dim || Some(e.rank) != rank {
                return Err(AdapterError::InconsistentExperts);
            }
        }
        Ok(Self {
            base,
            experts,
            router,
        })
    }

    /// Fresh experts and router around a frozen `base` (`out x in`).
    pub fn init(
        base: Tensor<T>,
        experts: usize,
        top_k: usize,
        cfg: &LoraConfig,
        layer: usize,
        tag: MatrixTag,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let (out_dim, in_dim) = (base.rows(), base.cols());
        let router = RouterState::new(in_dim, experts, top_k, layer, tag, &mut rng.split(0))?;
        let experts = (0..experts)
            .map(|i| LoraExpert::new(in_dim, out_dim, cfg, &mut rng.split(1 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(base, experts, router)
    }

    pub fn in_dim(&self) -> usize {
        self.base.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base.rows()
    }

    /// `W0 x + sum_{i in top-K} S_i(x) delta_i(x)` for a single vector.
    pub fn forward(&self, x: &[T], phase: &mut Phase<'_>) -> Result<(Vec<T>, RoutingOutcome<T>)> {
        if x.len() != self.in_dim() {
            return Err(NumericsError::ShapeMismatch {
                op: "adapted_forward",
                left: self.base.shape().to_vec(),
                right: vec![x.len()],
            }
            .into());
        }
        let outcome = self.router.route(x)?;
        let mut out = self.base.matmul(&column(x))?.into_data();
        for (&i, &w) in outcome.selected.iter().zip(&outcome.weights) {
            let delta = self.experts[i].delta(x, phase)?;
            for (o, d) in out.iter_mut().zip(delta) {
                *o += w * d;
            }
        }
        Ok((out, outcome))
    }

    /// Puts this layer's parameters on `g`: the frozen matrix as a constant,
    /// experts and router as tracked leaves.
    pub fn bind(&self, g: &Graph<T>) -> LinearVars {
        LinearVars {
            base: g.constant(self.base.clone()),
            experts: self
                .experts
                .iter()
                .map(|e| (g.param(e.a.clone()), g.param(e.b.clone())))
                .collect(),
            router: g.param(self.router.weight.clone()),
        }
    }

    /// Batched forward on the tape. `x` is `tokens x in`; returns
    /// `tokens x out`. `dropout` seeds one mask stream per expert.
    pub fn forward_graph(
        &self,
        g: &Graph<T>,
        vars: &LinearVars,
        x: Var,
        dropout: Option<&SeedRng>,
    ) -> Result<(Var, RoutedBatch<T>)> {
        let mut out = g.matmul_nt(x, vars.base)?;
        let logits = g.matmul_nt(x, vars.router)?;
        let probs = g.softmax_rows(logits)?;
        let k = self.router.top_k;
        let (selection, outcomes) = g.with_value(logits, |lv| -> Result<_> {
            let mut sel = Vec::with_capacity(lv.rows());
            let mut outs = Vec::with_capacity(lv.rows());
            for r in 0..lv.rows() {
                let o = RoutingOutcome::from_logits(lv.row_slice(r), k, self.router.mode)?;
                sel.push(o.selected.clone());
                outs.push(o);
            }
            Ok((sel, outs))
        })?;
        let weights = match self.router.mode {
            RoutingMode::Renormalize => g.topk_renorm(probs, selection.clone())?,
            RoutingMode::SelectedSoftmax => g.selected_softmax(logits, selection.clone())?,
        };
        let (tokens, in_dim) = g.dims_of(x);
        for (i, (expert, &(a, b))) in self.experts.iter().zip(&vars.experts).enumerate() {
            if !selection.iter().any(|s| s.contains(&i)) {
                continue;
            }
            let input = match dropout {
                Some(rng) if expert.dropout > 0.0 => {
                    let mask = rng.split(i as u64).dropout_mask(tokens * in_dim, expert.dropout);
                    g.dropout(x, mask)?
                }
                _ => x,
            };
            let hidden = g.matmul_nt(input, b)?;
            let delta = g.matmul_nt(hidden, a)?;
            let delta = g.scale(delta, expert.scaling());
            let w = g.slice_cols(weights, i, 1)?;
            let contrib = g.mul_col(delta, w)?;
            out = g.add(out, contrib)?;
        }
        Ok((
            out,
            RoutedBatch {
                probs,
                selection,
                outcomes,
            },
        ))
    }
}

/// Switch-style balance loss `N * sum_i f_i P_i` over a batch of tokens routed
/// by one router: `f_i` is the share of the `T * K` selections that went to
/// expert `i`, `P_i` the mean router probability of expert `i`.
pub fn load_balance_loss<T: Scalar>(outcomes: &[RoutingOutcome<T>]) -> Result<T> {
    let first = outcomes.first().ok_or(AdapterError::EmptyBatch)?;
    let n = first.full_softmax.len();
    let (fractions, _) = selection_fractions(outcomes.iter().map(|o| o.selected.as_slice()), n);
    let tokens = T::of_usize(outcomes.len());
    let mut total = T::zero();
    for (i, f) in fractions.iter().enumerate() {
        let mean_p = outcomes.iter().map(|o| o.full_softmax[i]).sum::<T>() / tokens;
        total += T::of(*f) * mean_p;
    }
    Ok(T::of_usize(n) * total)
}

/// `f_i = count_i / (T * K)` plus the raw counts.
pub fn selection_fractions<'a>(
    selections: impl Iterator<Item = &'a [usize]>,
    experts: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut counts = vec![0usize; experts];
    let mut picks = 0usize;
    for sel in selections {
        for &i in sel {
            counts[i] += 1;
            picks += 1;
        }
    }
    let denom = picks.max(1) as f64;
    (counts.iter().map(|&c| c as f64 / denom).collect(), counts)
}

/// Balance loss on the tape; differentiable through the mean probabilities.
pub fn load_balance_graph<T: Scalar>(g: &Graph<T>, routed: &RoutedBatch<T>) -> Result<Var> {
    if routed.selection.is_empty() {
        return Err(AdapterError::EmptyBatch);
    }
    let (_, n) = g.dims_of(routed.probs);
    let (fractions, _) = selection_fractions(routed.selection.iter().map(|s| s.as_slice()), n);
    let f = g.constant(Tensor::row(&fractions.iter().map(|&v| T::of(v)).collect::<Vec<_>>()));
    let mean_p = g.mean_rows(routed.probs);
    let prod = g.mul(mean_p, f)?;
    let s = g.sum(prod);
    Ok(g.scale(s, T::of_usize(n)))
}

pub fn route<T: Scalar>(router: &RouterState<T>, x: &[T]) -> Result<RoutingOutcome<T>> {
    router.route(x)
}

pub fn expert_delta<T: Scalar>(e: &LoraExpert<T>, x: &[T], phase: &mut Phase<'_>) -> Result<Vec<T>> {
    e.delta(x, phase)
}

pub fn adapted_forward<T: Scalar>(
    layer: &AdaptedLinear<T>,
    x: &[T],
    phase: &mut Phase<'_>,
) -> Result<(Vec<T>, RoutingOutcome<T>)> {
    layer.forward(x, phase)
}

pub fn effective_delta<T: Scalar>(e: &LoraExpert<T>) -> Tensor<T> {
    e.effective_delta()
}
