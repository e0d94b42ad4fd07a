//! Model and optimizer configuration, plus the flat `key = value` format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{LoraConfig, RoutingMode};
use crate::allocation::{validate, AllocationPlan, AllocationSpec, ModelDims};

use super::{ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTransformerConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub allocation: AllocationPlan,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lambda_aux: f64,
    pub seed: u64,
    #[serde(default)]
    pub routing: RoutingMode,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        Self::desk(AllocationPlan::new(vec![2; 4], 2))
    }
}

impl ToyTransformerConfig {
    /// Desk-scale defaults (4 layers, d 64, ffn 172, 4 heads, vocab 256,
    /// seq 64) around the given allocation.
    pub fn desk(allocation: AllocationPlan) -> Self {
        Self {
            num_layers: allocation.num_layers(),
            d_model: 64,
            d_ffn: 172,
            num_heads: 4,
            vocab_size: 256,
            max_seq_len: 64,
            allocation,
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            lambda_aux: 0.01,
            seed: 0,
            routing: RoutingMode::Renormalize,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.num_layers, self.d_model, self.d_ffn, self.rank)
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            init_std: 1.0 / (self.rank as f64).sqrt(),
        }
    }

    pub fn top_k(&self) -> usize {
        self.allocation.top_k()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                problems.push(format!("{k} must be positive"));
            }
        }
        if self.num_heads > 0 && !self.d_model.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.vocab_size > 256 {
            problems.push(format!("vocab_size {} exceeds the byte vocabulary", self.vocab_size));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.lambda_aux >= 0.0 && self.lambda_aux.is_finite()) {
            problems.push(format!("lambda_aux must be non-negative, got {}", self.lambda_aux));
        }
        if self.num_layers > 0 && self.d_model > 0 && self.d_ffn > 0 {
            if let Err(v) = validate(&self.allocation, &self.dims(), self.top_k()) {
                problems.extend(v.iter().map(|v| v.to_string()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// AdamW settings and the training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Prompts longer than this keep only their last `cutoff_len` tokens.
    pub cutoff_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 10,
            cutoff_len: 64,
        }
    }
}

/// Parsed `key = value` document. `#` starts a comment; later keys win.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ModelError::InvalidConfig(format!("line {}: empty key", i + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries of `other` fill keys missing here.
    pub fn merge_defaults(&mut self, other: &KvDoc) {
        for (k, v) in &other.entries {
            self.entries.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }

    pub fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.get(key)
            .map(|v| {
                v.parse::<V>()
                    .map_err(|_| ModelError::InvalidConfig(format!("`{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    /// Sorted, one entry per line; the canonical form used for hashing.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

pub const MODEL_KEYS: [&str; 15] = [
    "num_layers",
    "d_model",
    "d_ffn",
    "num_heads",
    "vocab_size",
    "max_seq_len",
    "allocation",
    "top_k",
    "rank",
    "alpha",
    "dropout",
    "lambda_aux",
    "seed",
    "routing",
    "precision",
];

pub const OPTIMIZER_KEYS: [&str; 8] = [
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "batch_size",
    "epochs",
    "cutoff_len",
];

fn parse_routing(s: &str) -> Result<RoutingMode> {
    match s {
        "renormalize" => Ok(RoutingMode::Renormalize),
        "selected_softmax" => Ok(RoutingMode::SelectedSoftmax),
        other => Err(ModelError::InvalidConfig(format!("unknown routing mode `{other}`"))),
    }
}

fn routing_name(m: RoutingMode) -> &'static str {
    match m {
        RoutingMode::Renormalize => "renormalize",
        RoutingMode::SelectedSoftmax => "selected_softmax",
    }
}

impl ToyTransformerConfig {
    /// Reads model keys; missing ones fall back to the desk defaults.
    /// `allocation` takes any allocation string, `top_k` defaults to 2.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut c = ToyTransformerConfig::default();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = doc.parsed(stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        take!(num_layers);
        take!(d_model);
        take!(d_ffn);
        take!(num_heads);
        take!(vocab_size);
        take!(max_seq_len);
        take!(rank);
        take!(alpha);
        take!(dropout);
        take!(lambda_aux);
        take!(seed);
        if let Some(r) = doc.get("routing") {
            c.routing = parse_routing(r)?;
        }
        let top_k: usize = doc.parsed("top_k")?.unwrap_or(2);
        let spec: AllocationSpec = match doc.get("allocation") {
            Some(a) => a.parse().map_err(|e| ModelError::InvalidConfig(format!("allocation: {e}")))?,
            None => AllocationSpec::Counts(vec![2; c.num_layers]),
        };
        c.allocation = spec
            .to_plan(c.num_layers, top_k)
            .map_err(|e| ModelError::InvalidConfig(format!("allocation: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::default();
        d.insert("num_layers", self.num_layers);
        d.insert("d_model", self.d_model);
        d.insert("d_ffn", self.d_ffn);
        d.insert("num_heads", self.num_heads);
        d.insert("vocab_size", self.vocab_size);
        d.insert("max_seq_len", self.max_seq_len);
        let counts: Vec<String> = self.allocation.counts().iter().map(|n| n.to_string()).collect();
        d.insert("allocation", format!("counts={}", counts.join(",")));
        d.insert("top_k", self.top_k());
        d.insert("rank", self.rank);
        d.insert("alpha", self.alpha);
        d.insert("dropout", self.dropout);
        d.insert("lambda_aux", self.lambda_aux);
        d.insert("seed", self.seed);
        d.insert("routing", routing_name(self.routing));
        d
    }
}

impl TrainConfig {
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut c = TrainConfig::default();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = doc.parsed(stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        take!(lr);
        take!(beta1);
        take!(beta2);
        take!(eps);
        take!(weight_decay);
        take!(batch_size);
        take!(epochs);
        take!(cutoff_len);
        if !(c.lr >= 0.0 && c.lr.is_finite()) {
            return Err(ModelError::InvalidConfig(format!("lr must be non-negative, got {}", c.lr)));
        }
        if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) || c.eps.is_nan() || c.eps <= 0.0 {
            return Err(ModelError::InvalidConfig("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if c.batch_size == 0 || c.cutoff_len == 0 {
            return Err(ModelError::InvalidConfig("batch_size and cutoff_len must be positive".into()));
        }
        Ok(c)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::default();
        d.insert("lr", self.lr);
        d.insert("beta1", self.beta1);
        d.insert("beta2", self.beta2);
        d.insert("eps", self.eps);
        d.insert("weight_decay", self.weight_decay);
        d.insert("batch_size", self.batch_size);
        d.insert("epochs", self.epochs);
        d.insert("cutoff_len", self.cutoff_len);
        d
    }
}
