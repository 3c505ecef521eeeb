//! Scoring extraction runs against ground truth, aggregation over the
//! protein x iteration grid, Mann-Whitney U, distance-distribution analysis
//! and hyperparameter sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::GroundTruthDataset;
use crate::embedding::{EmbedRole, Embedder};
use crate::mutation::Mutation;
use crate::pipeline::{run_experiment, ExtractionResult, Method, Pipeline, Responder, RetrievalConfig, RunManifest, Templates};
use crate::vectorstore::{cosine_distance_slices, VectorStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Metrics {
    /// Precision, recall and F1 from counts. Undefined ratios are 0, except
    /// that an empty retrieval against an empty truth scores 1 throughout.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                tp,
                fp,
                fn_,
            };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

pub fn set_metrics<T: Ord>(retrieved: &BTreeSet<T>, truth: &BTreeSet<T>) -> Metrics {
    let tp = retrieved.intersection(truth).count();
    Metrics::from_counts(tp, retrieved.len() - tp, truth.len() - tp)
}

/// Quality of the retrieved publications.
pub fn context_metrics(result: &ExtractionResult, gt_pub_ids: &BTreeSet<String>) -> Metrics {
    set_metrics(&result.context_pub_ids, gt_pub_ids)
}

/// Truth mutations of `protein` reported by at least one of `pub_ids`.
pub fn context_restricted_truth(gt: &GroundTruthDataset, protein: &str, pub_ids: &BTreeSet<String>) -> BTreeSet<Mutation> {
    let Some(truth) = gt.protein(protein) else {
        return BTreeSet::new();
    };
    truth
        .attributions
        .iter()
        .filter(|(_, pubs)| !pubs.is_disjoint(pub_ids))
        .map(|(m, _)| *m)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub overall: Metrics,
    pub wrt_context: Metrics,
    pub context: Metrics,
}

pub fn score_run(result: &ExtractionResult, gt: &GroundTruthDataset, protein: &str) -> Result<RunScore> {
    let truth = gt
        .protein(protein)
        .ok_or_else(|| Error::UnknownProtein(protein.to_string()))?;
    let ctx_truth = context_restricted_truth(gt, protein, &result.context_pub_ids);
    Ok(RunScore {
        overall: set_metrics(&result.mutations, &truth.mutations),
        wrt_context: set_metrics(&result.mutations, &ctx_truth),
        context: context_metrics(result, &truth.pub_ids),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Overall,
    WrtContext,
    Context,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Overall, Scope::WrtContext, Scope::Context];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Overall => "overall",
            Scope::WrtContext => "wrt_context",
            Scope::Context => "context",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One scored (method, protein, iteration, scope) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub responder: String,
    pub datastore: String,
    pub protein: String,
    pub iteration: u32,
    pub scope: Scope,
    pub metrics: Metrics,
}

fn datastore_label(method: Method) -> &'static str {
    match method {
        Method::ZeroShot => "none",
        Method::RagAbstracts => "abstracts",
        Method::RagFulltext => "fulltext",
        Method::Villa => "abstracts+fulltext",
    }
}

/// Score every record of a run manifest.
pub fn score_manifest(manifest: &RunManifest, gt: &GroundTruthDataset) -> Result<Vec<Cell>> {
    let mut cells = Vec::with_capacity(manifest.records.len() * 3);
    for rec in &manifest.records {
        let score = score_run(&rec.result, gt, &rec.protein)?;
        for (scope, metrics) in [
            (Scope::Overall, score.overall),
            (Scope::WrtContext, score.wrt_context),
            (Scope::Context, score.context),
        ] {
            // Zero-shot has no context to evaluate.
            if manifest.method == Method::ZeroShot && scope != Scope::Overall {
                continue;
            }
            cells.push(Cell {
                method: manifest.method,
                responder: manifest.responder.name.clone(),
                datastore: datastore_label(manifest.method).to_string(),
                protein: rec.protein.clone(),
                iteration: rec.iteration,
                scope,
                metrics,
            });
        }
    }
    Ok(cells)
}

/// Long-form results CSV:
/// `method,protein,iteration,metric_scope,precision,recall,f1,tp,fp,fn`.
pub fn write_results_csv(cells: &[Cell], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "protein",
        "iteration",
        "metric_scope",
        "precision",
        "recall",
        "f1",
        "tp",
        "fp",
        "fn",
    ])?;
    for c in cells {
        let m = &c.metrics;
        w.write_record([
            c.method.as_str().to_string(),
            c.protein.clone(),
            c.iteration.to_string(),
            c.scope.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.tp.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
        ])?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<results csv>".into(),
        source,
    })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n - 1.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64], kind: StdKind) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        let denom = match kind {
            StdKind::Population => n,
            StdKind::Sample => (n - 1.0).max(1.0),
        };
        let std = if values.iter().all(|v| *v == values[0]) {
            0.0
        } else {
            (ss / denom).sqrt()
        };
        Self {
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

/// Mean and spread of one (method, responder, datastore, scope) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: Method,
    pub responder: String,
    pub datastore: String,
    pub scope: Scope,
    pub cells: usize,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub std_kind: StdKind,
    pub groups: Vec<GroupSummary>,
}

impl ExperimentSummary {
    pub fn group(&self, method: Method, scope: Scope) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.method == method && g.scope == scope)
    }
}

pub fn aggregate(cells: &[Cell], std_kind: StdKind) -> Result<ExperimentSummary> {
    if cells.is_empty() {
        return Err(Error::Empty { what: "cell list" });
    }
    let mut groups: BTreeMap<(Method, &str, &str, Scope), Vec<&Metrics>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((c.method, &c.responder, &c.datastore, c.scope))
            .or_default()
            .push(&c.metrics);
    }
    let groups = groups
        .into_iter()
        .map(|((method, responder, datastore, scope), ms)| {
            let col = |f: fn(&Metrics) -> f64| Stat::of(&ms.iter().map(|m| f(m)).collect::<Vec<_>>(), std_kind);
            GroupSummary {
                method,
                responder: responder.to_string(),
                datastore: datastore.to_string(),
                scope,
                cells: ms.len(),
                precision: col(|m| m.precision),
                recall: col(|m| m.recall),
                f1: col(|m| m.f1),
            }
        })
        .collect();
    Ok(ExperimentSummary { std_kind, groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Number of (a, b) pairs with a > b, ties counting one half.
    pub u_a: f64,
    pub u_b: f64,
    pub p_two_sided: f64,
    pub method: PValueMethod,
    pub n_a: usize,
    pub n_b: usize,
}

/// Largest per-sample size for which the exact null distribution is used.
pub const EXACT_MAX: usize = 8;

/// Midranks (1-based) of `values`.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

fn u_statistics(a: &[f64], b: &[f64]) -> (f64, f64, Vec<usize>) {
    let joined: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&joined);
    let n_a = a.len() as f64;
    let rank_sum: f64 = ranks[..a.len()].iter().sum();
    let u_a = rank_sum - n_a * (n_a + 1.0) / 2.0;
    (u_a, n_a * b.len() as f64 - u_a, ties)
}

/// Null distribution of U for sample sizes (m, n) without ties: entry `u`
/// counts the rank assignments giving U = u. Uses the recurrence
/// f(m, n, u) = f(m - 1, n, u - n) + f(m, n - 1, u).
pub fn exact_u_counts(m: usize, n: usize) -> Vec<u64> {
    // table[i][j] is the distribution for sizes (i, j).
    let mut table: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); n + 1]; m + 1];
    for i in 0..=m {
        for j in 0..=n {
            table[i][j] = if i == 0 || j == 0 {
                vec![1]
            } else {
                let mut d = vec![0u64; i * j + 1];
                // Largest of the i+j values belongs to sample A: it beats all j.
                for (u, c) in table[i - 1][j].iter().enumerate() {
                    d[u + j] += c;
                }
                // ...or to sample B: it beats nobody in A.
                for (u, c) in table[i][j - 1].iter().enumerate() {
                    d[u] += c;
                }
                d
            };
        }
    }
    std::mem::take(&mut table[m][n])
}

fn exact_p(u_a: f64, m: usize, n: usize) -> f64 {
    let counts = exact_u_counts(m, n);
    let total: u64 = counts.iter().sum();
    let u = u_a.round() as usize;
    let lower: u64 = counts[..=u].iter().sum();
    let upper: u64 = counts[u..].iter().sum();
    (2.0 * lower.min(upper) as f64 / total as f64).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
pub fn mann_whitney_u_normal(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check_samples(a, b)?;
    let (u_a, u_b, ties) = u_statistics(a, b);
    Ok(normal_from(u_a, u_b, &ties, a.len(), b.len()))
}

fn normal_from(u_a: f64, u_b: f64, ties: &[usize], n_a: usize, n_b: usize) -> MannWhitney {
    let (m, n) = (n_a as f64, n_b as f64);
    let total = m + n;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = m * n / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    let (p, method) = if var <= 0.0 {
        (1.0, PValueMethod::Degenerate)
    } else {
        let mu = m * n / 2.0;
        let z = ((u_a - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * normal.sf(z)).min(1.0), PValueMethod::Normal)
    };
    MannWhitney {
        u_a,
        u_b,
        p_two_sided: p,
        method,
        n_a,
        n_b,
    }
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameters("Mann-Whitney U needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameters("Mann-Whitney U samples must be finite".into()));
    }
    Ok(())
}

/// Two-sided Mann-Whitney U test. Exact p-value when both samples have at
/// most [`EXACT_MAX`] values and there are no ties; normal approximation
/// otherwise. Identical values across both samples give p = 1.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check_samples(a, b)?;
    let (u_a, u_b, ties) = u_statistics(a, b);
    let first = a[0];
    if a.iter().chain(b).all(|v| *v == first) {
        return Ok(MannWhitney {
            u_a,
            u_b,
            p_two_sided: 1.0,
            method: PValueMethod::Degenerate,
            n_a: a.len(),
            n_b: b.len(),
        });
    }
    if ties.is_empty() && a.len() <= EXACT_MAX && b.len() <= EXACT_MAX {
        return Ok(MannWhitney {
            u_a,
            u_b,
            p_two_sided: exact_p(u_a, a.len(), b.len()),
            method: PValueMethod::Exact,
            n_a: a.len(),
            n_b: b.len(),
        });
    }
    Ok(normal_from(u_a, u_b, &ties, a.len(), b.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProteinDistances {
    pub protein: String,
    pub relevant: Vec<f64>,
    pub non_relevant: Vec<f64>,
    pub mean_relevant: f64,
    pub mean_non_relevant: f64,
    pub test: Option<MannWhitney>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceAnalysis {
    pub proteins: Vec<ProteinDistances>,
    /// Proteins left out, with the reason.
    pub skipped: Vec<String>,
}

/// For each protein, distances from its prompt embedding to the abstracts
/// of its ground-truth publications and to all other abstracts, with a
/// Mann-Whitney U test between the two samples.
pub fn abstract_distance_analysis(
    embedder: &dyn Embedder,
    gt: &GroundTruthDataset,
    abstracts: &VectorStore,
    prompts: &BTreeMap<String, String>,
) -> Result<DistanceAnalysis> {
    let entries: Vec<_> = abstracts.entries().collect();
    let mut out = DistanceAnalysis {
        proteins: Vec::new(),
        skipped: Vec::new(),
    };
    for (protein, prompt) in prompts {
        let relevant_ids = gt.protein(protein).map(|t| t.pub_ids.clone()).unwrap_or_default();
        let query = embedder.embed_as(prompt, EmbedRole::Query)?;
        let mut relevant = Vec::new();
        let mut non_relevant = Vec::new();
        for e in &entries {
            let d = cosine_distance_slices(query.as_slice(), e.vector.as_slice())?;
            if relevant_ids.contains(&e.pub_id) {
                relevant.push(d);
            } else {
                non_relevant.push(d);
            }
        }
        if relevant.is_empty() {
            let msg = format!("{protein}: no relevant abstracts in the datastore");
            tracing::warn!("{msg}");
            out.skipped.push(msg);
            continue;
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let test = if non_relevant.is_empty() {
            None
        } else {
            Some(mann_whitney_u(&relevant, &non_relevant)?)
        };
        out.proteins.push(ProteinDistances {
            protein: protein.clone(),
            mean_relevant: mean(&relevant),
            mean_non_relevant: mean(&non_relevant),
            relevant,
            non_relevant,
            test,
        });
    }
    Ok(out)
}

/// Fixed inputs for a grid of two-stage runs.
pub struct SweepSetup<'a> {
    pub embedder: &'a dyn Embedder,
    pub responder: &'a dyn Responder,
    pub abstracts: &'a VectorStore,
    pub fulltext: &'a VectorStore,
    pub templates: Templates,
    pub base: RetrievalConfig,
    pub virus: String,
    pub proteins: Vec<String>,
    pub iterations: u32,
    pub ground_truth: &'a GroundTruthDataset,
    pub std_kind: StdKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_a: usize,
    pub k_c: usize,
    pub summary: Option<ExperimentSummary>,
    pub error: Option<String>,
}

/// Run the two-stage method for every (k_a, k_c) pair. A failing cell is
/// recorded and the sweep continues.
pub fn sweep(setup: &SweepSetup<'_>, k_a_values: &[usize], k_c_values: &[usize]) -> Result<Vec<SweepRow>> {
    if k_a_values.is_empty() || k_c_values.is_empty() {
        return Err(Error::Empty { what: "sweep grid" });
    }
    let mut rows = Vec::new();
    for &k_a in k_a_values {
        for &k_c in k_c_values {
            let pipeline = Pipeline {
                embedder: setup.embedder,
                responder: setup.responder,
                abstracts: Some(setup.abstracts),
                fulltext: Some(setup.fulltext),
                config: RetrievalConfig {
                    k_a,
                    k_c,
                    ..setup.base
                },
                templates: setup.templates.clone(),
            };
            let outcome = run_experiment(
                &pipeline,
                Method::Villa,
                &setup.virus,
                &setup.proteins,
                setup.iterations,
                &String::new,
            )
            .and_then(|m| score_manifest(&m, setup.ground_truth))
            .and_then(|cells| aggregate(&cells, setup.std_kind));
            rows.push(match outcome {
                Ok(summary) => SweepRow {
                    k_a,
                    k_c,
                    summary: Some(summary),
                    error: None,
                },
                Err(e) => SweepRow {
                    k_a,
                    k_c,
                    summary: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    Ok(rows)
}

/// Long-form sweep CSV, one line per (k_a, k_c, scope).
pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "k_a",
        "k_c",
        "metric_scope",
        "precision_mean",
        "precision_std",
        "recall_mean",
        "recall_std",
        "f1_mean",
        "f1_std",
        "error",
    ])?;
    for r in rows {
        match &r.summary {
            Some(s) => {
                for g in &s.groups {
                    w.write_record([
                        r.k_a.to_string(),
                        r.k_c.to_string(),
                        g.scope.to_string(),
                        g.precision.mean.to_string(),
                        g.precision.std.to_string(),
                        g.recall.mean.to_string(),
                        g.recall.std.to_string(),
                        g.f1.mean.to_string(),
                        g.f1.std.to_string(),
                        String::new(),
                    ])?;
                }
            }
            None => {
                let mut rec = vec![r.k_a.to_string(), r.k_c.to_string()];
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(r.error.clone().unwrap_or_default());
                w.write_record(rec)?;
            }
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: "<sweep csv>".into(),
        source,
    })?;
    Ok(())
}
