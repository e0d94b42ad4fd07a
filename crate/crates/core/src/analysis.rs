//! Expert redundancy, router usage and continual-learning metrics, plus
//! report serialization.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{LoraExpert, MatrixTag};
use crate::model::{evaluate, AdaptedModel, ModelError, RouterRecord, Trainer};
use crate::numerics::Tensor;
use crate::tasks::{DomainSequence, Example};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("accuracy matrix is empty")]
    Empty,
    #[error("accuracy matrix must be square: {names} domains but row {row} has {len} entries")]
    NotSquare { names: usize, row: usize, len: usize },
    #[error("accuracy matrix has {rows} rows for {names} domains")]
    RowCount { rows: usize, names: usize },
    #[error("accuracy R[{row}][{col}] = {value} is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("at least two domains are needed, got {0}")]
    TooFewDomains(usize),
    #[error("accuracy R[{row}][{col}] is absent")]
    Missing { row: usize, col: usize },
    #[error("layer {layer} has {experts} expert(s); redundancy needs at least 2")]
    InsufficientExperts { layer: usize, experts: usize },
    #[error("layer {0} does not exist")]
    NoSuchLayer(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// What is compared between two experts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparand {
    /// The unscaled product `A B`.
    #[default]
    Product,
    /// `sqrt(|A - A'|^2 + |B - B'|^2)` on the raw factors.
    RawFactors,
}

pub fn frobenius_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "frobenius_distance shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean of `dist(i, j)` over unordered pairs `i < j`; `None` below two items.
pub fn mean_pairwise<X>(items: &[X], dist: impl Fn(&X, &X) -> f64) -> Option<f64> {
    if items.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            sum += dist(&items[i], &items[j]);
            pairs += 1;
        }
    }
    Some(sum / pairs as f64)
}

/// Mean pairwise Frobenius distance between matrices.
pub fn mean_pairwise_frobenius<T: Scalar>(mats: &[Tensor<T>]) -> Option<f64> {
    mean_pairwise(mats, |a, b| frobenius_distance(a, b))
}

fn expert_distance<T: Scalar>(x: &LoraExpert<T>, y: &LoraExpert<T>, c: Comparand) -> f64 {
    match c {
        Comparand::Product => frobenius_distance(&x.effective_delta(), &y.effective_delta()),
        Comparand::RawFactors => {
            let (da, db) = (frobenius_distance(&x.a, &y.a), frobenius_distance(&x.b, &y.b));
            (da * da + db * db).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRedundancy {
    pub tag: MatrixTag,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRedundancy {
    pub layer: usize,
    pub experts: usize,
    /// Mean over q, k, v, o; `None` when the layer has fewer than 2 experts.
    pub value: Option<f64>,
    /// Every adapted matrix, attention tags first.
    pub breakdown: Vec<MatrixRedundancy>,
}

impl LayerRedundancy {
    pub fn is_absent(&self) -> bool {
        self.value.is_none()
    }

    pub fn tag_value(&self, tag: MatrixTag) -> Option<f64> {
        self.breakdown.iter().find(|m| m.tag == tag).map(|m| m.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub comparand: Comparand,
    pub layers: Vec<LayerRedundancy>,
}

impl RedundancyReport {
    /// Headline value per layer, absent layers as `None`.
    pub fn series(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(|l| l.value).collect()
    }
}

/// Redundancy of one layer. Layers with fewer than two experts yield
/// [`AnalysisError::InsufficientExperts`].
pub fn redundancy<T: Scalar>(model: &AdaptedModel<T>, layer: usize, comparand: Comparand) -> Result<LayerRedundancy> {
    let block = model.blocks.get(layer).ok_or(AnalysisError::NoSuchLayer(layer))?;
    let experts = block.linear(MatrixTag::Q).experts.len();
    if experts < 2 {
        return Err(AnalysisError::InsufficientExperts { layer, experts });
    }
    let breakdown: Vec<MatrixRedundancy> = MatrixTag::ALL
        .iter()
        .map(|&tag| MatrixRedundancy {
            tag,
            value: mean_pairwise(&block.linear(tag).experts, |x, y| expert_distance(x, y, comparand))
                .expect("at least two experts"),
        })
        .collect();
    let attn: Vec<f64> = breakdown.iter().filter(|m| m.tag.is_attention()).map(|m| m.value).collect();
    Ok(LayerRedundancy {
        layer,
        experts,
        value: Some(attn.iter().sum::<f64>() / attn.len() as f64),
        breakdown,
    })
}

/// Every layer, with under-populated layers marked absent.
pub fn redundancy_report<T: Scalar>(model: &AdaptedModel<T>, comparand: Comparand) -> RedundancyReport {
    let layers = (0..model.blocks.len())
        .map(|j| match redundancy(model, j, comparand) {
            Ok(r) => r,
            Err(_) => LayerRedundancy {
                layer: j,
                experts: model.blocks[j].linear(MatrixTag::Q).experts.len(),
                value: None,
                breakdown: Vec::new(),
            },
        })
        .collect();
    RedundancyReport { comparand, layers }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsage {
    pub expert: usize,
    pub selections: u64,
    /// Mean fusion weight over the tokens that selected this expert.
    pub mean_weight: Option<f64>,
    #[serde(skip)]
    weight_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterUsage {
    pub layer: usize,
    pub tag: MatrixTag,
    pub tokens: u64,
    pub top_k: usize,
    pub experts: Vec<ExpertUsage>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub routers: Vec<RouterUsage>,
}

impl RouterStats {
    /// Adds routing decisions; records are matched by `(layer, tag)`.
    pub fn absorb<T: Scalar>(&mut self, records: &[RouterRecord<T>]) {
        for rec in records {
            let Some(first) = rec.outcomes.first() else { continue };
            let n = first.full_softmax.len();
            let pos = match self.routers.iter().position(|r| r.layer == rec.layer && r.tag == rec.tag) {
                Some(p) => p,
                None => {
                    self.routers.push(RouterUsage {
                        layer: rec.layer,
                        tag: rec.tag,
                        tokens: 0,
                        top_k: first.selected.len(),
                        experts: (0..n)
                            .map(|expert| ExpertUsage {
                                expert,
                                selections: 0,
                                mean_weight: None,
                                weight_sum: 0.0,
                            })
                            .collect(),
                    });
                    self.routers.len() - 1
                }
            };
            let usage = &mut self.routers[pos];
            for o in &rec.outcomes {
                usage.tokens += 1;
                for (&i, &w) in o.selected.iter().zip(&o.weights) {
                    let e = &mut usage.experts[i];
                    e.selections += 1;
                    e.weight_sum += w.to_f64_lossy();
                    e.mean_weight = Some(e.weight_sum / e.selections as f64);
                }
            }
        }
    }

    pub fn from_records<T: Scalar>(records: &[RouterRecord<T>]) -> Self {
        let mut s = Self::default();
        s.absorb(records);
        s
    }

    pub fn get(&self, layer: usize, tag: MatrixTag) -> Option<&RouterUsage> {
        self.routers.iter().find(|r| r.layer == layer && r.tag == tag)
    }
}

/// Routes every token of every prompt in eval mode and tallies selections.
pub fn router_stats<T: Scalar>(model: &AdaptedModel<T>, data: &[Example]) -> Result<RouterStats> {
    if data.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let mut stats = RouterStats::default();
    let limit = model.config.max_seq_len;
    for chunk in data.chunks(64) {
        let prompts: Vec<&[u32]> = chunk
            .iter()
            .map(|e| crate::model::truncate_prompt(&e.prompt, limit))
            .collect();
        stats.absorb(&model.route_tokens(&prompts)?);
    }
    Ok(stats)
}

/// `R[k][i]`: accuracy on domain `i` after training through domain `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(names: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if names.is_empty() {
            return Err(AnalysisError::Empty);
        }
        if rows.len() != names.len() {
            return Err(AnalysisError::RowCount {
                rows: rows.len(),
                names: names.len(),
            });
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != names.len() {
                return Err(AnalysisError::NotSquare {
                    names: names.len(),
                    row: r,
                    len: row.len(),
                });
            }
            for (c, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(AnalysisError::OutOfRange { row: r, col: c, value: v });
                    }
                }
            }
        }
        Ok(Self { names, rows })
    }

    /// Fully populated matrix from plain rows.
    pub fn from_dense(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(names, rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect())
    }

    /// Empty `t x t` matrix to be filled stage by stage.
    pub fn empty(names: Vec<String>) -> Result<Self> {
        let t = names.len();
        Self::new(names, vec![vec![None; t]; t])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Result<f64> {
        self.rows
            .get(row)
            .and_then(|r| r.get(col))
            .copied()
            .flatten()
            .ok_or(AnalysisError::Missing { row, col })
    }

    /// Every entry `R[k][i]` with `i <= k` is present.
    pub fn is_lower_triangular_complete(&self) -> bool {
        (0..self.len()).all(|k| (0..=k).all(|i| self.rows[k][i].is_some()))
    }

    /// CSV with a header of domain names and one row per stage. Empty
    /// cells, `NA` and `-` are absent; `#` lines are comments. When any
    /// value exceeds 1 the whole matrix is read as percent.
    pub fn from_csv_reader(reader: impl Read, origin: &Path) -> Result<Self> {
        let parse = |reason: String| AnalysisError::Parse {
            path: origin.to_path_buf(),
            reason,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| parse(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| parse(e.to_string()))?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(c, cell)| match cell {
                    "" | "NA" | "-" => Ok(None),
                    s => s
                        .trim_end_matches('%')
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| parse(format!("row {}, column {}: `{s}` is not a number", r + 1, c + 1))),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let percent = rows.iter().flatten().flatten().any(|&v| v > 1.0);
        if percent {
            log::warn!("{}: values above 1 found, reading the matrix as percent", origin.display());
            for v in rows.iter_mut().flatten().flatten() {
                *v /= 100.0;
            }
        }
        Self::new(names, rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|source| AnalysisError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_reader(f, path)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Mean of the final row.
pub fn op_metric(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.len();
    if t == 0 {
        return Err(AnalysisError::Empty);
    }
    let mut sum = 0.0;
    for i in 0..t {
        sum += r.get(t - 1, i)?;
    }
    Ok(sum / t as f64)
}

/// `2 / (t (t - 1)) * sum_{k=2..t} sum_{i<k} (R[k][i] - R[k-1][i])`.
pub fn pd_metric(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.len();
    if t < 2 {
        return Err(AnalysisError::TooFewDomains(t));
    }
    let mut sum = 0.0;
    for k in 1..t {
        for i in 0..k {
            sum += r.get(k, i)? - r.get(k - 1, i)?;
        }
    }
    Ok(sum / (t * (t - 1) / 2) as f64)
}

/// Fine-tunes on each domain in turn for `trainer.config.epochs` epochs and
/// evaluates every domain seen so far on its eval split, filling row `k`
/// after stage `k`. `on_stage` sees the matrix after every row, so callers
/// can persist progress before a later stage fails.
pub fn sequential_finetune<T: Scalar>(
    trainer: &mut Trainer<T>,
    seq: &DomainSequence,
    mut on_stage: impl FnMut(usize, &AccuracyMatrix),
) -> Result<AccuracyMatrix> {
    if seq.len() < 2 {
        return Err(AnalysisError::TooFewDomains(seq.len()));
    }
    let mut r = AccuracyMatrix::empty(seq.names())?;
    let mut epoch = 0;
    for k in 0..seq.len() {
        for _ in 0..trainer.config.epochs {
            trainer.run_epoch(&seq.domains[k].train, epoch, None)?;
            epoch += 1;
        }
        for i in 0..=k {
            r.rows[k][i] = Some(evaluate(&trainer.model, &seq.domains[i].eval)?);
        }
        on_stage(k, &r);
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualSummary {
    pub matrix: AccuracyMatrix,
    pub op: f64,
    pub pd: f64,
}

impl ContinualSummary {
    pub fn from_matrix(matrix: AccuracyMatrix) -> Result<Self> {
        Ok(Self {
            op: op_metric(&matrix)?,
            pd: pd_metric(&matrix)?,
            matrix,
        })
    }
}

/// Everything an analysis run produces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    /// Configuration echo.
    pub config: BTreeMap<String, String>,
    pub redundancy: Option<RedundancyReport>,
    pub router_stats: Option<RouterStats>,
    pub continual: Option<ContinualSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}` (csv or json)")),
        }
    }
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn config_comment(&self) -> String {
        self.config.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
    }

    /// Per-layer redundancy rows; absent values are written as `absent`.
    pub fn redundancy_csv(&self) -> String {
        let mut out = self.config_comment();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string(), "experts".into(), "redundancy".into()];
        header.extend(MatrixTag::ALL.iter().map(|t| t.name().to_string()));
        w.write_record(&header).expect("in-memory write");
        if let Some(r) = &self.redundancy {
            for l in &r.layers {
                let mut row = vec![l.layer.to_string(), l.experts.to_string(), fmt_opt(l.value)];
                row.extend(MatrixTag::ALL.iter().map(|&t| fmt_opt(l.tag_value(t))));
                w.write_record(&row).expect("in-memory write");
            }
        }
        out.push_str(std::str::from_utf8(&w.into_inner().expect("flush")).expect("utf-8"));
        out
    }

    pub fn router_csv(&self) -> String {
        let mut out = self.config_comment();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "tag", "expert", "tokens", "top_k", "selections", "mean_weight"])
            .expect("in-memory write");
        if let Some(s) = &self.router_stats {
            for r in &s.routers {
                for e in &r.experts {
                    w.write_record([
                        r.layer.to_string(),
                        r.tag.to_string(),
                        e.expert.to_string(),
                        r.tokens.to_string(),
                        r.top_k.to_string(),
                        e.selections.to_string(),
                        fmt_opt(e.mean_weight),
                    ])
                    .expect("in-memory write");
                }
            }
        }
        out.push_str(std::str::from_utf8(&w.into_inner().expect("flush")).expect("utf-8"));
        out
    }

    /// Matrix CSV (readable by [`AccuracyMatrix::from_csv_path`]) with OP
    /// and PD as comments.
    pub fn continual_csv(&self) -> Option<String> {
        let c = self.continual.as_ref()?;
        let mut out = self.config_comment();
        out.push_str(&format!("# op = {}\n# pd = {}\n", c.op, c.pd));
        out.push_str(&c.matrix.to_csv());
        Some(out)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "absent".into())
}

fn companion(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.csv"))
}

/// Writes `report` to `path`. JSON is one file; CSV writes the redundancy
/// table at `path` plus `<stem>.router.csv` and `<stem>.continual.csv`
/// when those sections are present. Returns every file written.
pub fn emit_report(report: &AnalysisReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let write = |p: &Path, text: &str| {
        fs::write(p, text).map_err(|source| AnalysisError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let mut written = vec![path.to_path_buf()];
    match format {
        ReportFormat::Json => write(path, &report.to_json())?,
        ReportFormat::Csv => {
            write(path, &report.redundancy_csv())?;
            if report.router_stats.is_some() {
                let p = companion(path, "router");
                write(&p, &report.router_csv())?;
                written.push(p);
            }
            if let Some(text) = report.continual_csv() {
                let p = companion(path, "continual");
                write(&p, &text)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::RoutingOutcome;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn hand_computed_distances() {
        let a = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = m(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(mean_pairwise_frobenius(&[a.clone(), b]).unwrap(), 2f64.sqrt());
        assert_eq!(mean_pairwise_frobenius(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        assert!(mean_pairwise_frobenius(&[a]).is_none());
    }

    #[test]
    fn metrics_on_small_matrices() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let same = AccuracyMatrix::from_dense(names.clone(), vec![vec![0.5; 3]; 3]).unwrap();
        assert_eq!(op_metric(&same).unwrap(), 0.5);
        assert_eq!(pd_metric(&same).unwrap(), 0.0);
        let r = AccuracyMatrix::from_dense(
            names.clone(),
            vec![vec![0.9, 0.1, 0.1], vec![0.8, 0.9, 0.1], vec![0.7, 0.6, 0.9]],
        )
        .unwrap();
        let expected = ((0.8 - 0.9) + (0.7 - 0.8) + (0.6 - 0.9)) / 3.0;
        assert!((pd_metric(&r).unwrap() - expected).abs() < 1e-15);
        assert!((op_metric(&r).unwrap() - 2.2 / 3.0).abs() < 1e-15);
        let one = AccuracyMatrix::from_dense(vec!["x".into()], vec![vec![0.3]]).unwrap();
        assert!(matches!(pd_metric(&one), Err(AnalysisError::TooFewDomains(1))));
        assert!(AccuracyMatrix::from_dense(names, vec![vec![0.5; 3]; 2]).is_err());
    }

    #[test]
    fn csv_ingestion_percent_and_absent() {
        let text = "# stage rows\nx,y\n90,\n80,70\n";
        let r = AccuracyMatrix::from_csv_reader(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(r.rows[0], vec![Some(0.9), None]);
        assert!(r.is_lower_triangular_complete());
        let back = AccuracyMatrix::from_csv_reader(r.to_csv().as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, r);
        assert!(AccuracyMatrix::from_csv_reader("x,y\n1,oops\n0,0\n".as_bytes(), Path::new("mem")).is_err());
    }

    #[test]
    fn router_tally_manual_trace() {
        let o = |sel: Vec<usize>, w: Vec<f64>| RoutingOutcome {
            selected: sel,
            weights: w,
            full_softmax: vec![0.0; 3],
        };
        let rec = RouterRecord {
            layer: 0,
            tag: MatrixTag::Q,
            outcomes: vec![o(vec![0, 1], vec![0.6, 0.4]), o(vec![2, 0], vec![0.7, 0.3]), o(vec![1, 2], vec![0.5, 0.5])],
        };
        let s = RouterStats::from_records(&[rec]);
        let u = s.get(0, MatrixTag::Q).unwrap();
        assert_eq!(u.tokens, 3);
        let counts: Vec<u64> = u.experts.iter().map(|e| e.selections).collect();
        assert_eq!(counts, vec![2, 2, 2]);
        assert_eq!(counts.iter().sum::<u64>(), 3 * 2);
        assert!((u.experts[0].mean_weight.unwrap() - 0.45).abs() < 1e-15);
        assert!((u.experts[2].mean_weight.unwrap() - 0.6).abs() < 1e-15);
    }
}
