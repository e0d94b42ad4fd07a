use std::collections::BTreeMap;
use std::path::PathBuf;

use mola::adapters::MatrixTag;
use mola::allocation::AllocationPlan;
use mola::analysis::{
    emit_report, op_metric, pd_metric, redundancy, redundancy_report, router_stats, AccuracyMatrix, AnalysisError,
    AnalysisReport, Comparand, ContinualSummary, ReportFormat,
};
use mola::model::{evaluate, AdaptedModel, ToyTransformerConfig, TrainConfig, Trainer};
use mola::tasks::gen_domain_sequence;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn toy(counts: Vec<usize>, k: usize) -> ToyTransformerConfig {
    let mut c = ToyTransformerConfig::desk(AllocationPlan::new(counts, k));
    c.d_model = 16;
    c.d_ffn = 24;
    c.num_heads = 2;
    c.vocab_size = 128;
    c.max_seq_len = 8;
    c.rank = 4;
    c
}

fn nudged(counts: Vec<usize>, k: usize) -> AdaptedModel<f64> {
    let mut m = AdaptedModel::build(&toy(counts, k)).unwrap();
    for (i, t) in m.trainable_mut().into_iter().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.2 * ((i * 7 + j) as f64 * 0.13).sin();
        }
    }
    m
}

#[test]
fn published_matrices_load_as_percent() {
    let r = AccuracyMatrix::from_csv_path(data("continual_2468.csv")).unwrap();
    assert_eq!(r.len(), 5);
    assert_eq!(r.names[0], "biology");
    assert!((r.get(0, 0).unwrap() - 0.9496).abs() < 1e-12);
    assert!((op_metric(&r).unwrap() * 100.0 - 89.822).abs() < 1e-9);
    assert!((pd_metric(&r).unwrap() * 100.0 + 0.464).abs() < 1e-9);
}

#[test]
fn pd_ignores_entries_above_the_diagonal() {
    let mut r = AccuracyMatrix::from_csv_path(data("continual_lora.csv")).unwrap();
    let pd = pd_metric(&r).unwrap();
    for k in 0..r.len() {
        for i in (k + 1)..r.len() {
            r.rows[k][i] = None;
        }
    }
    assert_eq!(pd_metric(&r).unwrap(), pd);
}

#[test]
fn missing_lower_entry_is_reported() {
    let mut r = AccuracyMatrix::from_dense(vec!["a".into(), "b".into()], vec![vec![0.5, 0.0], vec![0.4, 0.9]]).unwrap();
    r.rows[1][0] = None;
    assert!(matches!(pd_metric(&r), Err(AnalysisError::Missing { row: 1, col: 0 })));
}

#[test]
fn single_expert_layers_are_absent() {
    let m = nudged(vec![1, 2, 3], 1);
    assert!(matches!(
        redundancy(&m, 0, Comparand::Product),
        Err(AnalysisError::InsufficientExperts { layer: 0, experts: 1 })
    ));
    let report = redundancy_report(&m, Comparand::Product);
    assert!(report.layers[0].is_absent());
    assert!(report.series()[1..].iter().all(|v| v.is_some_and(|x| x > 0.0)));
    let raw = redundancy_report(&m, Comparand::RawFactors);
    assert_ne!(raw.series(), report.series());
}

#[test]
fn routers_with_k_equal_n_select_everything() {
    let m = nudged(vec![2, 2], 2);
    let seq = gen_domain_sequence(2, 20, 1).unwrap();
    let stats = router_stats(&m, &seq.domains[0].train).unwrap();
    assert_eq!(stats.routers.len(), 2 * MatrixTag::ALL.len());
    for r in &stats.routers {
        assert!(r.experts.iter().all(|e| e.selections == r.tokens));
        let total: f64 = r.experts.iter().map(|e| e.mean_weight.unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn selections_account_for_every_token() {
    let m = nudged(vec![3, 4], 1);
    let seq = gen_domain_sequence(2, 30, 2).unwrap();
    let stats = router_stats(&m, &seq.domains[1].train).unwrap();
    let tokens: u64 = seq.domains[1].train.iter().map(|e| e.prompt.len() as u64).sum();
    for r in &stats.routers {
        assert_eq!(r.tokens, tokens);
        assert_eq!(r.experts.iter().map(|e| e.selections).sum::<u64>(), tokens * r.top_k as u64);
    }
}

#[test]
fn learning_one_domain_does_not_transfer_to_another() {
    let mut c = ToyTransformerConfig::desk(AllocationPlan::new(vec![2, 2, 2, 2], 1));
    c.seed = 3;
    let seq = gen_domain_sequence(2, 120, 6).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(AdaptedModel::<f64>::build(&c).unwrap(), tc);
    for epoch in 0..12 {
        t.run_epoch(&seq.domains[0].train, epoch, None).unwrap();
    }
    let own = evaluate(&t.model, &seq.domains[0].eval).unwrap();
    let other = evaluate(&t.model, &seq.domains[1].eval).unwrap();
    assert!(own >= 0.9, "own domain {own}");
    // Four balanced answers; unseen keys should not beat chance by much.
    assert!(other <= 0.5, "other domain {other}");
}

fn sample_report() -> AnalysisReport {
    let m = nudged(vec![1, 3], 1);
    let seq = gen_domain_sequence(2, 20, 1).unwrap();
    let matrix =
        AccuracyMatrix::new(vec!["a".into(), "b".into()], vec![vec![Some(0.75), None], vec![Some(0.5), Some(1.0)]])
            .unwrap();
    let mut config = BTreeMap::new();
    config.insert("allocation".into(), "1,3".into());
    config.insert("seed".into(), "0".into());
    AnalysisReport {
        config,
        redundancy: Some(redundancy_report(&m, Comparand::Product)),
        router_stats: Some(router_stats(&m, &seq.domains[0].train).unwrap()),
        continual: Some(ContinualSummary::from_matrix(matrix).unwrap()),
    }
}

#[test]
fn json_report_round_trips_byte_for_byte() {
    let report = sample_report();
    let text = report.to_json();
    let back = AnalysisReport::from_json(&text).unwrap();
    assert_eq!(back.to_json(), text);
    assert_eq!(back.redundancy, report.redundancy);
    assert_eq!(back.continual, report.continual);
}

#[test]
fn csv_report_writes_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let written = emit_report(&sample_report(), ReportFormat::Csv, &path).unwrap();
    assert_eq!(written.len(), 3);
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows[0].starts_with("layer,experts,redundancy,q"));
    assert!(rows[1].starts_with("0,1,absent"));
    assert!(text.starts_with("# allocation = 1,3\n# seed = 0\n"));

    let continual = dir.path().join("report.continual.csv");
    let back = AccuracyMatrix::from_csv_path(&continual).unwrap();
    assert_eq!(back.rows[1][0], Some(0.5));
    assert_eq!(back.rows[0][1], None);
}

#[test]
fn csv_parse_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "a,b\n0.5,zz\n0.1,0.2\n").unwrap();
    let err = AccuracyMatrix::from_csv_path(&path).unwrap_err();
    assert!(err.to_string().contains("bad.csv"), "{err}");
    std::fs::write(&path, "a,b\n0.5,0.1\n").unwrap();
    assert!(matches!(AccuracyMatrix::from_csv_path(&path), Err(AnalysisError::RowCount { .. })));
}
