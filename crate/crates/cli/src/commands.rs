use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mola::allocation::{trainable_param_count, AllocationSpec, ModelDims};
use mola::analysis::{
    emit_report, redundancy_report, router_stats, sequential_finetune, AccuracyMatrix, AnalysisReport,
    ContinualSummary, ReportFormat,
};
use mola::model::{evaluate, save, AdaptedModel, CheckpointError, Trainer};
use mola::tasks::{gen_task, load_jsonl, Dataset, Example, TaskKind};
use mola::Scalar;

use crate::config::{Precision, RunConfig};
use crate::{AnalyzeArgs, CliError};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn params(dims: &str, alloc: &str) -> Result<(), CliError> {
    let dims = ModelDims::preset(dims).map_err(|e| CliError::Config(e.to_string()))?;
    let spec: AllocationSpec = alloc.parse().map_err(|e| CliError::Config(format!("{e}")))?;
    let plan = spec
        .to_plan(dims.num_layers, 1)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if plan.num_layers() != dims.num_layers {
        return Err(CliError::Config(format!(
            "allocation lists {} layers but the dims have {}",
            plan.num_layers(),
            dims.num_layers
        )));
    }
    println!("trainable parameters: {}", trainable_param_count(&plan, &dims));
    println!("total experts: {}", plan.total_experts());
    Ok(())
}

/// Rejects examples the model cannot embed before any training starts.
fn check_examples<T: Scalar>(model: &AdaptedModel<T>, data: &[&Example]) -> Result<(), CliError> {
    let vocab = model.config.vocab_size;
    for (i, ex) in data.iter().enumerate() {
        let bad = ex
            .prompt
            .iter()
            .chain(std::iter::once(&ex.label))
            .chain(ex.choices.iter().flatten())
            .find(|&&t| t as usize >= vocab);
        if let Some(t) = bad {
            return Err(CliError::Config(format!(
                "example {i}: token {t} is outside the vocabulary of {vocab}"
            )));
        }
    }
    Ok(())
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("config.kv"), &cfg.canonical.to_text())?;
    Ok(dir)
}

pub fn train(path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(path)?;
    match cfg.precision {
        Precision::F64 => train_with::<f64>(&cfg),
        Precision::F32 => train_with::<f32>(&cfg),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.dataset.single()?;
    let model = AdaptedModel::<T>::build(&cfg.model).map_err(|e| CliError::Config(e.to_string()))?;
    check_examples(&model, &data.train.iter().chain(&data.eval).collect::<Vec<_>>())?;
    if data.train.is_empty() {
        return Err(CliError::Config("the training split is empty".into()));
    }
    let dir = prepare_dir(cfg)?;
    let log_path = dir.join("metrics.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
    let io = |e: std::io::Error| runtime(format!("{}: {e}", log_path.display()));
    writeln!(log, "epoch,steps,loss,ce,aux,train_accuracy,eval_accuracy").map_err(io)?;

    let mut trainer = Trainer::new(model, cfg.train.clone());
    let mut last = None;
    for epoch in 0..cfg.train.epochs {
        if cfg.max_steps.is_some_and(|m| trainer.model.step >= m) {
            break;
        }
        let stats = trainer.run_epoch(&data.train, epoch, cfg.max_steps).map_err(|e| {
            runtime(format!(
                "epoch {epoch}: {e}; metrics so far are in {}",
                log_path.display()
            ))
        })?;
        let eval = if data.eval.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, &data.eval).map_err(runtime)?)
        };
        writeln!(
            log,
            "{},{},{},{},{},{},{}",
            stats.epoch,
            stats.steps,
            stats.loss,
            stats.ce,
            stats.aux,
            stats.train_accuracy,
            eval.map(|v| v.to_string()).unwrap_or_default()
        )
        .and_then(|_| log.flush())
        .map_err(io)?;
        last = Some((stats, eval));
    }
    let ckpt = dir.join("checkpoint.bin");
    save(&trainer.model, &ckpt).map_err(runtime)?;
    println!("run directory: {}", dir.display());
    match last {
        Some((s, eval)) => {
            let eval = eval.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "epochs {} steps {} loss {:.4} train accuracy {:.4} eval accuracy {eval}",
                s.epoch + 1,
                s.steps,
                s.loss,
                s.train_accuracy
            );
        }
        None => println!("no training steps; checkpoint holds the initialization"),
    }
    Ok(())
}

fn echo(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.canonical
        .keys()
        .map(|k| (k.to_string(), cfg.canonical.get(k).unwrap_or_default().to_string()))
        .collect()
}

pub fn continual(path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(path)?;
    match cfg.precision {
        Precision::F64 => continual_with::<f64>(&cfg),
        Precision::F32 => continual_with::<f32>(&cfg),
    }
}

fn continual_with<T: Scalar>(cfg: &RunConfig) -> Result<(), CliError> {
    let seq = cfg.dataset.sequence()?;
    let model = AdaptedModel::<T>::build(&cfg.model).map_err(|e| CliError::Config(e.to_string()))?;
    let all: Vec<&Example> = seq.domains.iter().flat_map(|d| d.train.iter().chain(&d.eval)).collect();
    check_examples(&model, &all)?;
    if let Some(d) = seq.domains.iter().find(|d| d.eval.is_empty() || d.train.is_empty()) {
        return Err(CliError::Config(format!("domain `{}` has an empty split", d.name)));
    }
    let dir = prepare_dir(cfg)?;
    let matrix_path = dir.join("matrix.csv");
    let mut persist_err = None;
    let mut trainer = Trainer::new(model, cfg.train.clone());
    let result = sequential_finetune(&mut trainer, &seq, |k, r| {
        if let Err(e) = fs::write(&matrix_path, r.to_csv()) {
            persist_err.get_or_insert(format!("{}: {e}", matrix_path.display()));
        }
        eprintln!("stage {}/{} ({}) done", k + 1, seq.len(), seq.domains[k].name);
    });
    if let Some(e) = persist_err {
        return Err(CliError::Runtime(e));
    }
    let matrix = result.map_err(|e| {
        runtime(format!("{e}; completed stages are in {}", matrix_path.display()))
    })?;
    let summary = ContinualSummary::from_matrix(matrix).map_err(runtime)?;
    let report = AnalysisReport {
        config: echo(cfg),
        continual: Some(summary.clone()),
        ..Default::default()
    };
    write_file(&dir.join("continual.csv"), &report.continual_csv().unwrap_or_default())?;
    save(&trainer.model, dir.join("checkpoint.bin")).map_err(runtime)?;
    println!("run directory: {}", dir.display());
    println!("OP {:.2}%", summary.op * 100.0);
    println!("PD {:.2}%", summary.pd * 100.0);
    Ok(())
}

fn analysis_data(spec: &str, size: usize, seed: u64) -> Result<Vec<Example>, CliError> {
    if spec.ends_with(".jsonl") {
        return load_jsonl(spec).map_err(|e| CliError::Config(e.to_string()));
    }
    let kind: TaskKind = spec.parse().map_err(|e| CliError::Config(format!("{e}")))?;
    let Dataset { train, eval, .. } = gen_task(kind, size, seed).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(train.into_iter().chain(eval).collect())
}

fn output(report: &AnalysisReport, args: &AnalyzeArgs) -> Result<(), CliError> {
    match &args.out {
        Some(out) => {
            for p in emit_report(report, args.format, out).map_err(runtime)? {
                println!("wrote {}", p.display());
            }
        }
        None => match args.format {
            ReportFormat::Json => print!("{}", report.to_json()),
            ReportFormat::Csv => {
                let mut parts = Vec::new();
                if report.redundancy.is_some() {
                    parts.push(report.redundancy_csv());
                }
                if report.router_stats.is_some() {
                    parts.push(report.router_csv());
                }
                parts.extend(report.continual_csv());
                print!("{}", parts.join("\n"));
            }
        },
    }
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let mut config = BTreeMap::new();
    if let Some(m) = &args.matrix {
        let matrix = AccuracyMatrix::from_csv_path(m).map_err(|e| CliError::Config(e.to_string()))?;
        let summary = ContinualSummary::from_matrix(matrix).map_err(|e| CliError::Config(e.to_string()))?;
        println!("OP {:.2}%", summary.op * 100.0);
        println!("PD {:.2}%", summary.pd * 100.0);
        config.insert("matrix".into(), m.display().to_string());
        let report = AnalysisReport {
            config,
            continual: Some(summary),
            ..Default::default()
        };
        return match args.out {
            Some(_) => output(&report, args),
            None => Ok(()),
        };
    }
    let path = args.checkpoint.as_ref().expect("clap requires a checkpoint without a matrix");
    let model: AdaptedModel<f64> = match mola::model::load(path) {
        Ok(m) => m,
        Err(CheckpointError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::Config(format!("{}: no such checkpoint", path.display())));
        }
        Err(e) => return Err(runtime(format!("{}: {e}", path.display()))),
    };
    config.insert("checkpoint".into(), path.display().to_string());
    config.insert("allocation".into(), model.config.allocation.code());
    config.insert("top_k".into(), model.config.top_k().to_string());
    config.insert("step".into(), model.step.to_string());
    config.insert("comparand".into(), format!("{:?}", args.comparand).to_lowercase());
    let stats = match &args.dataset {
        Some(spec) => {
            let data = analysis_data(spec, args.dataset_size, args.dataset_seed)?;
            check_examples(&model, &data.iter().collect::<Vec<_>>())?;
            config.insert("dataset".into(), spec.clone());
            Some(router_stats(&model, &data).map_err(runtime)?)
        }
        None => None,
    };
    let report = AnalysisReport {
        config,
        redundancy: Some(redundancy_report(&model, args.comparand)),
        router_stats: stats,
        continual: None,
    };
    output(&report, args)
}
