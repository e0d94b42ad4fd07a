//! Synthetic desk-scale datasets, JSONL ingestion and domain sequences.
//!
//! Tokens are bytes (a fixed 256-symbol vocabulary) and every answer is a
//! single token, optionally restricted to a list of choices.
//!
//! Generation rules:
//! - `copy`: a string `s` of `length` symbols over `a..`, then `>`, then the
//!   first `p` symbols of `s`; the answer is `s[p]`.
//! - `modular_add`: `x+y=` with residues written as `'0' + v`; the answer is
//!   `(x + y) mod m`.
//! - `parity`: `bits` characters `0`/`1` then `=`; the answer is their XOR.
//! - `keyed_lookup`: `pairs` distinct key/value pairs, `?`, a queried key;
//!   the answer is that key's value.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Value};
use thiserror::Error;

use crate::numerics::SeedRng;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task kind `{0}`")]
    UnknownKind(String),
    #[error("dataset size must be positive")]
    EmptySize,
    #[error("requested {size} examples but `{kind}` only has {universe} distinct ones")]
    SizeExceedsUniverse {
        kind: String,
        size: usize,
        universe: usize,
    },
    #[error("at least two domains are required, got {0}")]
    TooFewDomains(usize),
    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{0}: no examples")]
    EmptyFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TaskError>;

/// One prompt with a single-token answer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub prompt: Vec<u32>,
    /// Candidate answer tokens; `None` means the whole vocabulary.
    pub choices: Option<Vec<u32>>,
    /// Answer token.
    pub label: u32,
}

impl Example {
    pub fn new(prompt: impl Into<Vec<u32>>, label: u32, choices: Option<Vec<u32>>) -> Self {
        Self {
            prompt: prompt.into(),
            choices,
            label,
        }
    }

    pub fn from_text(prompt: &str, label: char, choices: Option<&[char]>) -> Self {
        Self {
            prompt: prompt.bytes().map(u32::from).collect(),
            choices: choices.map(|c| c.iter().map(|&ch| ch as u32).collect()),
            label: label as u32,
        }
    }

    /// Position of the label among the choices.
    pub fn label_index(&self) -> Option<usize> {
        self.choices.as_ref()?.iter().position(|&c| c == self.label)
    }

    pub fn is_valid(&self) -> bool {
        !self.prompt.is_empty()
            && self.choices.as_ref().is_none_or(|c| c.contains(&self.label))
    }
}

/// Train/eval split of one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy { alphabet: usize, length: usize },
    ModularAdd { modulus: usize },
    Parity { bits: usize },
    KeyedLookup { keys: usize, values: usize, pairs: usize },
}

impl TaskKind {
    pub fn copy() -> Self {
        TaskKind::Copy { alphabet: 8, length: 3 }
    }

    pub fn modular_add() -> Self {
        TaskKind::ModularAdd { modulus: 7 }
    }

    pub fn parity() -> Self {
        TaskKind::Parity { bits: 8 }
    }

    pub fn keyed_lookup() -> Self {
        TaskKind::KeyedLookup {
            keys: 8,
            values: 4,
            pairs: 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy { .. } => "copy",
            TaskKind::ModularAdd { .. } => "modular_add",
            TaskKind::Parity { .. } => "parity",
            TaskKind::KeyedLookup { .. } => "keyed_lookup",
        }
    }

    /// Every distinct example of this kind, in a fixed order.
    pub fn universe(&self) -> Vec<Example> {
        match *self {
            TaskKind::Copy { alphabet, length } => {
                let symbols: Vec<u32> = (0..alphabet as u32).map(|i| 'a' as u32 + i).collect();
                let mut out = Vec::new();
                for code in 0..alphabet.pow(length as u32) {
                    let mut s = Vec::with_capacity(length);
                    let mut c = code;
                    for _ in 0..length {
                        s.push(symbols[c % alphabet]);
                        c /= alphabet;
                    }
                    for p in 0..length {
                        let mut prompt = s.clone();
                        prompt.push('>' as u32);
                        prompt.extend_from_slice(&s[..p]);
                        out.push(Example::new(prompt, s[p], Some(symbols.clone())));
                    }
                }
                out
            }
            TaskKind::ModularAdd { modulus } => {
                let digit = |v: usize| '0' as u32 + v as u32;
                let choices: Vec<u32> = (0..modulus).map(digit).collect();
                let mut out = Vec::with_capacity(modulus * modulus);
                for x in 0..modulus {
                    for y in 0..modulus {
                        let prompt = vec![digit(x), '+' as u32, digit(y), '=' as u32];
                        out.push(Example::new(prompt, digit((x + y) % modulus), Some(choices.clone())));
                    }
                }
                out
            }
            TaskKind::Parity { bits } => {
                let (zero, one) = ('0' as u32, '1' as u32);
                (0..1usize << bits)
                    .map(|v| {
                        let mut prompt: Vec<u32> =
                            (0..bits).map(|b| if v >> b & 1 == 1 { one } else { zero }).collect();
                        prompt.push('=' as u32);
                        let label = if v.count_ones() % 2 == 1 { one } else { zero };
                        Example::new(prompt, label, Some(vec![zero, one]))
                    })
                    .collect()
            }
            TaskKind::KeyedLookup { keys, values, pairs } => {
                let key_tok: Vec<u32> = (0..keys as u32).map(|i| 'a' as u32 + i).collect();
                let val_tok: Vec<u32> = (0..values as u32).map(|i| '0' as u32 + i).collect();
                let mut out = Vec::new();
                let mut chosen = Vec::with_capacity(pairs);
                enumerate_keyed(&key_tok, &val_tok, pairs, &mut chosen, &mut out);
                out
            }
        }
    }

    fn universe_size(&self) -> usize {
        match *self {
            TaskKind::Copy { alphabet, length } => alphabet.pow(length as u32) * length,
            TaskKind::ModularAdd { modulus } => modulus * modulus,
            TaskKind::Parity { bits } => 1 << bits,
            TaskKind::KeyedLookup { keys, values, pairs } => {
                let perms: usize = (0..pairs).map(|i| keys - i).product();
                perms * values.pow(pairs as u32) * pairs
            }
        }
    }
}

fn enumerate_keyed(
    keys: &[u32],
    values: &[u32],
    pairs: usize,
    chosen: &mut Vec<(u32, u32)>,
    out: &mut Vec<Example>,
) {
    if chosen.len() == pairs {
        for q in 0..pairs {
            let mut prompt = Vec::with_capacity(2 * pairs + 2);
            for &(k, v) in chosen.iter() {
                prompt.push(k);
                prompt.push(v);
            }
            prompt.push('?' as u32);
            prompt.push(chosen[q].0);
            out.push(Example::new(prompt, chosen[q].1, Some(values.to_vec())));
        }
        return;
    }
    for &k in keys {
        if chosen.iter().any(|&(c, _)| c == k) {
            continue;
        }
        for &v in values {
            chosen.push((k, v));
            enumerate_keyed(keys, values, pairs, chosen, out);
            chosen.pop();
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Copy { alphabet, length } => write!(f, "copy:{alphabet}x{length}"),
            TaskKind::ModularAdd { modulus } => write!(f, "modular_add:{modulus}"),
            TaskKind::Parity { bits } => write!(f, "parity:{bits}"),
            TaskKind::KeyedLookup { keys, values, pairs } => {
                write!(f, "keyed_lookup:{keys}x{values}x{pairs}")
            }
        }
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    /// `copy`, `modular_add[:m]`, `parity[:bits]`, `keyed_lookup`, with the
    /// parameter forms produced by `Display` also accepted.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.trim().split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s.trim(), None),
        };
        let bad = || TaskError::UnknownKind(s.to_string());
        let nums = |p: &str| -> Result<Vec<usize>> {
            p.split('x').map(|v| v.parse::<usize>().map_err(|_| bad())).collect()
        };
        let kind = match (name, param) {
            ("copy", None) => TaskKind::copy(),
            ("copy", Some(p)) => match nums(p)?[..] {
                [alphabet, length] => TaskKind::Copy { alphabet, length },
                _ => return Err(bad()),
            },
            ("modular_add", None) => TaskKind::modular_add(),
            ("modular_add", Some(p)) => match nums(p)?[..] {
                [modulus] => TaskKind::ModularAdd { modulus },
                _ => return Err(bad()),
            },
            ("parity", None) => TaskKind::parity(),
            ("parity", Some(p)) => match nums(p)?[..] {
                [bits] => TaskKind::Parity { bits },
                _ => return Err(bad()),
            },
            ("keyed_lookup", None) => TaskKind::keyed_lookup(),
            ("keyed_lookup", Some(p)) => match nums(p)?[..] {
                [keys, values, pairs] => TaskKind::KeyedLookup { keys, values, pairs },
                _ => return Err(bad()),
            },
            _ => return Err(bad()),
        };
        let valid = match kind {
            TaskKind::Copy { alphabet, length } => (1..=26).contains(&alphabet) && (1..=8).contains(&length),
            TaskKind::ModularAdd { modulus } => (2..=64).contains(&modulus),
            TaskKind::Parity { bits } => (1..=16).contains(&bits),
            TaskKind::KeyedLookup { keys, values, pairs } => {
                (1..=26).contains(&keys) && (1..=10).contains(&values) && (1..=keys.min(5)).contains(&pairs)
            }
        };
        if valid {
            Ok(kind)
        } else {
            Err(bad())
        }
    }
}

/// Draws `size` distinct examples and splits them 80/20 into train/eval.
pub fn gen_task(kind: TaskKind, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(TaskError::EmptySize);
    }
    let universe = kind.universe_size();
    if size > universe {
        return Err(TaskError::SizeExceedsUniverse {
            kind: kind.to_string(),
            size,
            universe,
        });
    }
    let mut all = kind.universe();
    SeedRng::new(seed).split(0x7461_736b).shuffle(&mut all);
    all.truncate(size);
    Ok(split(kind.to_string(), all))
}

fn split(name: String, examples: Vec<Example>) -> Dataset {
    Dataset::split_tail(name, examples)
}

impl Dataset {
    /// Keeps order and moves the last fifth to `eval`.
    pub fn split_tail(name: impl Into<String>, mut examples: Vec<Example>) -> Self {
        let eval_len = examples.len() / 5;
        let eval = examples.split_off(examples.len() - eval_len);
        Dataset {
            name: name.into(),
            train: examples,
            eval,
        }
    }
}

/// Ordered domains for sequential fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSequence {
    pub domains: Vec<Dataset>,
    /// `true` when the domains were generated with disjoint key spaces;
    /// `false` declares that domains may overlap.
    pub disjoint: bool,
}

impl DomainSequence {
    /// A sequence that repeats the given domains verbatim (declared overlap).
    pub fn with_overlap(domains: Vec<Dataset>) -> Self {
        Self {
            domains,
            disjoint: false,
        }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }
}

pub const DOMAIN_KEYS: usize = 8;
pub const DOMAIN_VALUES: usize = 4;
const DOMAIN_NOISE: [u32; 6] = [33, 34, 35, 36, 37, 38];
const MAX_DOMAINS: usize = 24;

/// Domain `d` maps its own 8 key tokens (`64 + 8d ..`) to 4 answer tokens
/// through a seeded balanced table. Prompts are `noise noise key =`, so the
/// rule generalizes to unseen noise and domains never share keys.
pub fn gen_domain_sequence(num_domains: usize, size: usize, seed: u64) -> Result<DomainSequence> {
    if num_domains < 2 {
        return Err(TaskError::TooFewDomains(num_domains));
    }
    if num_domains > MAX_DOMAINS {
        return Err(TaskError::UnknownKind(format!("{num_domains} domains (max {MAX_DOMAINS})")));
    }
    if size == 0 {
        return Err(TaskError::EmptySize);
    }
    let universe = DOMAIN_KEYS * DOMAIN_NOISE.len() * DOMAIN_NOISE.len();
    if size > universe {
        return Err(TaskError::SizeExceedsUniverse {
            kind: "domain".into(),
            size,
            universe,
        });
    }
    let root = SeedRng::new(seed).split(0x646f_6d61);
    let values: Vec<u32> = (0..DOMAIN_VALUES as u32).map(|v| '0' as u32 + v).collect();
    let mut domains = Vec::with_capacity(num_domains);
    for d in 0..num_domains {
        let mut rng = root.split(d as u64);
        let keys: Vec<u32> = (0..DOMAIN_KEYS as u32).map(|k| 64 + 8 * d as u32 + k).collect();
        let mut table: Vec<u32> = (0..DOMAIN_KEYS).map(|k| values[k % DOMAIN_VALUES]).collect();
        rng.shuffle(&mut table);
        let mut all = Vec::with_capacity(universe);
        for (ki, &key) in keys.iter().enumerate() {
            for &n1 in &DOMAIN_NOISE {
                for &n2 in &DOMAIN_NOISE {
                    all.push(Example::new(vec![n1, n2, key, '=' as u32], table[ki], Some(values.clone())));
                }
            }
        }
        rng.shuffle(&mut all);
        all.truncate(size);
        domains.push(split(format!("domain{d}"), all));
    }
    Ok(DomainSequence {
        domains,
        disjoint: true,
    })
}

fn token_value(tokens: &[u32]) -> Value {
    if tokens.iter().all(|&t| (32..127).contains(&t)) {
        Value::String(tokens.iter().map(|&t| char::from(t as u8)).collect())
    } else {
        json!(tokens)
    }
}

fn parse_tokens(v: &Value) -> std::result::Result<Vec<u32>, String> {
    match v {
        Value::String(s) => Ok(s.bytes().map(u32::from).collect()),
        Value::Array(items) => items
            .iter()
            .map(|t| {
                t.as_u64()
                    .filter(|&x| x < 256)
                    .map(|x| x as u32)
                    .ok_or_else(|| format!("token {t} is not a byte"))
            })
            .collect(),
        _ => Err("expected a string or an array of byte tokens".into()),
    }
}

fn parse_single(v: &Value) -> std::result::Result<u32, String> {
    let toks = parse_tokens(&match v {
        Value::Number(_) => json!([v]),
        other => other.clone(),
    })?;
    match toks[..] {
        [t] => Ok(t),
        _ => Err("answers must be a single token".into()),
    }
}

fn parse_line(v: &Value) -> std::result::Result<Example, String> {
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let prompt = parse_tokens(obj.get("prompt").ok_or("missing `prompt`")?)?;
    if prompt.is_empty() {
        return Err("empty prompt".into());
    }
    let choices = match obj.get("choices") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(items.iter().map(parse_single).collect::<std::result::Result<Vec<_>, _>>()?),
        Some(_) => return Err("`choices` must be an array".into()),
    };
    let label_v = obj.get("label").ok_or("missing `label`")?;
    let label = match (label_v, &choices) {
        (Value::Number(n), Some(c)) => {
            let idx = n.as_u64().ok_or("label index must be a non-negative integer")? as usize;
            *c.get(idx).ok_or_else(|| format!("label index {idx} out of range for {} choices", c.len()))?
        }
        (other, _) => parse_single(other)?,
    };
    let ex = Example::new(prompt, label, choices);
    if !ex.is_valid() {
        return Err("label is not one of the choices".into());
    }
    Ok(ex)
}

/// One JSON object per line: `prompt`, `label`, optional `choices`.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| TaskError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        out.push(parse_line(&v).map_err(malformed)?);
    }
    if out.is_empty() {
        return Err(TaskError::EmptyFile(path.to_path_buf()));
    }
    Ok(out)
}

fn label_value(ex: &Example) -> Value {
    let printable = (32..127).contains(&ex.label);
    match (&ex.choices, printable) {
        (_, true) => token_value(&[ex.label]),
        (Some(_), false) => json!(ex.label_index().unwrap_or(0)),
        (None, false) => json!([ex.label]),
    }
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for ex in examples {
        let mut obj = serde_json::Map::new();
        obj.insert("prompt".into(), token_value(&ex.prompt));
        obj.insert("label".into(), label_value(ex));
        if let Some(c) = &ex.choices {
            obj.insert(
                "choices".into(),
                Value::Array(c.iter().map(|&t| token_value(&[t])).collect()),
            );
        }
        writeln!(f, "{}", Value::Object(obj)).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// `true` when no example occurs in both splits.
pub fn splits_disjoint(d: &Dataset) -> bool {
    let train: HashSet<&Example> = d.train.iter().collect();
    d.eval.iter().all(|e| !train.contains(e))
}
