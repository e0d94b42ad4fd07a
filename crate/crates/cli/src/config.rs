//! Run configuration: one flat `key = value` file holding model, optimizer
//! and run keys. `model_config` names a second file whose entries fill any
//! model or optimizer key the run file leaves out.

use std::fs;
use std::path::{Path, PathBuf};

use mola::model::{KvDoc, ToyTransformerConfig, TrainConfig, MODEL_KEYS, OPTIMIZER_KEYS};
use mola::tasks::{gen_domain_sequence, gen_task, load_jsonl, Dataset, DomainSequence, TaskKind};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RUN_KEYS: [&str; 8] = [
    "model_config",
    "dataset",
    "dataset_size",
    "dataset_seed",
    "eval_dataset",
    "out_dir",
    "max_steps",
    "domain_size",
];

const DEFAULT_SIZE: usize = 120;
const DEFAULT_DOMAIN_SIZE: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Where examples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Generated { kind: TaskKind, size: usize, seed: u64 },
    Domains { count: usize, size: usize, seed: u64 },
    Jsonl { paths: Vec<PathBuf>, eval: Option<PathBuf> },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ToyTransformerConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub out_dir: PathBuf,
    pub max_steps: Option<u64>,
    pub precision: Precision,
    /// Resolved configuration in canonical form.
    pub canonical: KvDoc,
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.display()))
}

fn read_doc(path: &Path) -> Result<KvDoc, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(path, e))?;
    KvDoc::parse(&text).map_err(|e| config_err(path, e))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn existing(base: &Path, p: &str, origin: &Path) -> Result<PathBuf, CliError> {
    let full = resolve(base, p);
    if full.exists() {
        Ok(full)
    } else {
        Err(config_err(origin, format!("`{}` does not exist", full.display())))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut doc = read_doc(path)?;
        for key in doc.keys() {
            if !(MODEL_KEYS.contains(&key) || OPTIMIZER_KEYS.contains(&key) || RUN_KEYS.contains(&key)) {
                return Err(config_err(path, format!("unknown key `{key}`")));
            }
        }
        let seed: u64 = doc
            .parsed("seed")
            .map_err(|e| config_err(path, e))?
            .ok_or_else(|| config_err(path, "`seed` is required"))?;
        if let Some(m) = doc.remove("model_config") {
            let mpath = existing(base, &m, path)?;
            let mut defaults = read_doc(&mpath)?;
            for key in defaults.keys().map(str::to_string).collect::<Vec<_>>() {
                if !(MODEL_KEYS.contains(&key.as_str()) || OPTIMIZER_KEYS.contains(&key.as_str())) {
                    return Err(config_err(&mpath, format!("unknown key `{key}`")));
                }
            }
            defaults.remove("seed");
            doc.merge_defaults(&defaults);
        }
        let model = ToyTransformerConfig::from_kv(&doc).map_err(|e| config_err(path, e))?;
        let train = TrainConfig::from_kv(&doc).map_err(|e| config_err(path, e))?;
        let precision = match doc.get("precision").unwrap_or("f64") {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(config_err(path, format!("precision must be f32 or f64, got `{other}`"))),
        };
        let parsed = |key: &str| doc.parsed::<u64>(key).map_err(|e| config_err(path, e));
        let max_steps = parsed("max_steps")?;
        let dataset_seed = parsed("dataset_seed")?.unwrap_or(seed);
        let size = parsed("dataset_size")?.map_or(DEFAULT_SIZE, |v| v as usize);
        let domain_size = parsed("domain_size")?.map_or(DEFAULT_DOMAIN_SIZE, |v| v as usize);
        let spec = doc.get("dataset").ok_or_else(|| config_err(path, "`dataset` is required"))?;
        let dataset = if let Some(n) = spec.strip_prefix("domains:") {
            let count = n
                .trim()
                .parse()
                .map_err(|_| config_err(path, format!("bad domain count in `{spec}`")))?;
            DatasetSpec::Domains {
                count,
                size: domain_size,
                seed: dataset_seed,
            }
        } else if spec.ends_with(".jsonl") || spec.contains(',') {
            let paths = spec
                .split(',')
                .map(|p| existing(base, p.trim(), path))
                .collect::<Result<Vec<_>, _>>()?;
            let eval = doc.get("eval_dataset").map(|e| existing(base, e, path)).transpose()?;
            DatasetSpec::Jsonl { paths, eval }
        } else {
            let kind: TaskKind = spec.parse().map_err(|e| config_err(path, e))?;
            DatasetSpec::Generated {
                kind,
                size,
                seed: dataset_seed,
            }
        };
        let out_dir = resolve(base, doc.get("out_dir").unwrap_or("runs"));

        let mut canonical = model.to_kv();
        let optimizer = train.to_kv();
        for k in optimizer.keys() {
            canonical.insert(k, optimizer.get(k).unwrap_or_default());
        }
        canonical.insert("precision", if precision == Precision::F32 { "f32" } else { "f64" });
        for key in ["dataset", "dataset_size", "dataset_seed", "eval_dataset", "max_steps", "domain_size"] {
            if let Some(v) = doc.get(key) {
                canonical.insert(key, v);
            }
        }
        Ok(Self {
            model,
            train,
            dataset,
            out_dir,
            max_steps,
            precision,
            canonical,
        })
    }

    /// `run-` plus the first 16 hex digits of the SHA-256 of the canonical
    /// configuration.
    pub fn run_name(&self) -> String {
        let digest = Sha256::digest(self.canonical.to_text().as_bytes());
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        format!("run-{hex}")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }
}

impl DatasetSpec {
    pub fn single(&self) -> Result<Dataset, CliError> {
        match self {
            DatasetSpec::Generated { kind, size, seed } => {
                gen_task(*kind, *size, *seed).map_err(|e| CliError::Config(e.to_string()))
            }
            DatasetSpec::Domains { .. } => Err(CliError::Config(
                "a domain sequence needs the `continual` command".into(),
            )),
            DatasetSpec::Jsonl { paths, eval } => {
                if paths.len() != 1 {
                    return Err(CliError::Config("training takes a single JSONL file".into()));
                }
                let train = load_jsonl(&paths[0]).map_err(|e| CliError::Config(e.to_string()))?;
                let eval = match eval {
                    Some(p) => load_jsonl(p).map_err(|e| CliError::Config(e.to_string()))?,
                    None => Vec::new(),
                };
                Ok(Dataset {
                    name: paths[0].display().to_string(),
                    train,
                    eval,
                })
            }
        }
    }

    pub fn sequence(&self) -> Result<DomainSequence, CliError> {
        match self {
            DatasetSpec::Domains { count, size, seed } => {
                gen_domain_sequence(*count, *size, *seed).map_err(|e| CliError::Config(e.to_string()))
            }
            DatasetSpec::Jsonl { paths, .. } if paths.len() >= 2 => {
                let domains = paths
                    .iter()
                    .map(|p| {
                        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        load_jsonl(p)
                            .map(|ex| Dataset::split_tail(name, ex))
                            .map_err(|e| CliError::Config(e.to_string()))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(DomainSequence::with_overlap(domains))
            }
            _ => Err(CliError::Config(
                "continual learning needs `dataset = domains:N` or at least two JSONL files".into(),
            )),
        }
    }
}
