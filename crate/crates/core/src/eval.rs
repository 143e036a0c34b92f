//! Accuracy, attention AUC and seed aggregation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Task};
use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, SplitName};
use crate::model::Model;
use crate::pooling::PoolMode;
use crate::scalar::Scalar;
use crate::training::{occlusion_attention, parallel_map};

/// Rounds a regression output to the nearest class inside `range`.
pub fn decode(pred: f64, range: [i64; 2]) -> i64 {
    if pred.is_nan() {
        return range[0];
    }
    (pred.round().clamp(range[0] as f64, range[1] as f64)) as i64
}

/// Percentage of graphs whose decoded prediction equals the label.
pub fn accuracy<T: Scalar>(model: &Model<T>, split: &DatasetSplit, range: [i64; 2]) -> Result<f64> {
    let preds = predictions(model, split)?;
    Ok(accuracy_of(&preds, split, range))
}

pub fn predictions<T: Scalar>(model: &Model<T>, split: &DatasetSplit) -> Result<Vec<f64>> {
    check_width(model, split)?;
    split.graphs.iter().map(|g| model.predict(g).map(|(p, _)| p)).collect()
}

fn check_width<T: Scalar>(model: &Model<T>, split: &DatasetSplit) -> Result<()> {
    if split.feature_dim != model.config.in_dim {
        return Err(Error::Eval(format!(
            "model expects {} features, split {} has {}",
            model.config.in_dim, split.name, split.feature_dim
        )));
    }
    Ok(())
}

pub fn accuracy_of(preds: &[f64], split: &DatasetSplit, range: [i64; 2]) -> f64 {
    if split.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(&split.graphs).filter(|(&p, g)| decode(p, range) == g.label()).count();
    100.0 * hits as f64 / split.len() as f64
}

/// Rank-sum AUC in percent; ties count one half. `None` unless both classes occur.
pub fn auc_percent(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(100.0 * u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AucMode {
    /// All nodes of all graphs ranked together.
    #[default]
    Pooled,
    /// Mean of per-graph AUCs over graphs holding both classes.
    PerGraph,
}

/// Attention AUC of predicted coefficients against `gt > 0` relevance.
pub fn attention_auc(pred: &[Vec<f64>], gt: &[Vec<f64>], mode: AucMode) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Eval(format!("{} predicted vectors for {} graphs", pred.len(), gt.len())));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Eval(format!("graph {i}: {} scores for {} nodes", p.len(), g.len())));
        }
    }
    match mode {
        AucMode::Pooled => {
            let scores: Vec<f64> = pred.iter().flatten().copied().collect();
            let labels: Vec<bool> = gt.iter().flatten().map(|&v| v > 0.0).collect();
            Ok(auc_percent(&scores, &labels))
        }
        AucMode::PerGraph => {
            let per: Vec<f64> = pred
                .iter()
                .zip(gt)
                .filter_map(|(p, g)| auc_percent(p, &g.iter().map(|&v| v > 0.0).collect::<Vec<_>>()))
                .collect();
            Ok((!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AucSource {
    Attention,
    Occlusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub model: String,
    pub seed: u64,
    pub accuracy: BTreeMap<SplitName, f64>,
    /// Accuracy over the union of all test splits.
    pub combined_accuracy: f64,
    pub attn_auc: Option<f64>,
    pub auc_source: Option<AucSource>,
    pub runtime_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub auc_mode: AucMode,
    /// Graphs per test split scored by occlusion for global-pool models; `None` scores all.
    pub occlusion_limit: Option<usize>,
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { auc_mode: AucMode::Pooled, occlusion_limit: None, jobs: 1 }
    }
}

/// Accuracy on every test split and attention AUC on the combined test set.
///
/// Pooling models are scored on first-stage coefficients; global-pool models
/// on occlusion coefficients.
pub fn evaluate_run<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    tag: &str,
    seed: u64,
    opts: &EvalOptions,
) -> Result<RunReport> {
    let start = Instant::now();
    let range = data.info.label_range;
    let mut accuracy = BTreeMap::new();
    let (mut hits, mut total) = (0.0, 0usize);
    let mut pred_alpha = Vec::new();
    let mut gt_alpha = Vec::new();
    let pooling = model.config.pool.mode != PoolMode::None;
    for split in data.test_splits() {
        check_width(model, split)?;
        let outs = parallel_map(&split.graphs, opts.jobs, |g| model.predict(g))?;
        let preds: Vec<f64> = outs.iter().map(|(p, _)| *p).collect();
        let acc = accuracy_of(&preds, split, range);
        accuracy.insert(split.name, acc);
        hits += acc / 100.0 * split.len() as f64;
        total += split.len();

        let limit = if pooling { split.len() } else { opts.occlusion_limit.unwrap_or(split.len()) };
        let scored = &split.graphs[..limit.min(split.len())];
        let alphas: Vec<Vec<f64>> = if pooling {
            outs.into_iter().map(|(_, stages)| stages[0].alpha.clone()).collect()
        } else {
            parallel_map(scored, opts.jobs, |g| occlusion_attention(model, g))?
        };
        for (g, a) in scored.iter().zip(alphas) {
            if let Some(gt) = g.gt_attention() {
                gt_alpha.push(gt.to_vec());
                pred_alpha.push(a);
            }
        }
    }
    let attn_auc = attention_auc(&pred_alpha, &gt_alpha, opts.auc_mode)?;
    Ok(RunReport {
        task: data.info.task,
        model: tag.to_string(),
        seed,
        accuracy,
        combined_accuracy: if total > 0 { 100.0 * hits / total as f64 } else { 0.0 },
        attn_auc,
        auc_source: attn_auc.map(|_| if pooling { AucSource::Attention } else { AucSource::Occlusion }),
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: Task,
    pub model: String,
    pub subset: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub task: Task,
    pub rows: Vec<AggregateRow>,
}

/// Mean and unbiased standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per (model, subset, metric) mean and std over reports.
pub fn aggregate(reports: &[RunReport]) -> Result<AggregateReport> {
    let task = reports.first().ok_or_else(|| Error::Eval("no reports to aggregate".into()))?.task;
    if let Some(r) = reports.iter().find(|r| r.task != task) {
        return Err(Error::Eval(format!("cannot aggregate {} with {}", task, r.task)));
    }
    let mut cells: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        let mut put = |subset: &str, metric: &str, v: f64| {
            cells.entry((r.model.clone(), subset.to_string(), metric.to_string())).or_default().push(v);
        };
        for (split, acc) in &r.accuracy {
            put(split.as_str(), "accuracy", *acc);
        }
        put("test-combined", "accuracy", r.combined_accuracy);
        if let Some(auc) = r.attn_auc {
            put("test-combined", "attn_auc", auc);
        }
    }
    let rows = cells
        .into_iter()
        .map(|((model, subset, metric), values)| {
            let (mean, std) = mean_std(&values);
            AggregateRow { task, model, subset, metric, mean, std, n_seeds: values.len() }
        })
        .collect();
    Ok(AggregateReport { task, rows })
}

pub fn write_csv(report: &AggregateReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<AggregateRow>, _>>()?;
    Ok(rows)
}

/// One CSV row per subset metric of a single run.
pub fn write_run_csv(report: &RunReport, path: &Path) -> Result<()> {
    write_csv(&aggregate(std::slice::from_ref(report))?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::pairwise_auc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_examples() {
        let gt = vec![vec![0.5, 0.5, 0.0, 0.0]];
        assert_eq!(attention_auc(&gt, &gt, AucMode::Pooled).unwrap(), Some(100.0));
        let rev = vec![vec![0.0, 0.0, 0.5, 0.5]];
        assert_eq!(attention_auc(&rev, &gt, AucMode::Pooled).unwrap(), Some(0.0));
        let flat = vec![vec![0.25; 4]];
        assert_eq!(attention_auc(&flat, &gt, AucMode::Pooled).unwrap(), Some(50.0));
        let one_class = vec![vec![0.0; 4]];
        assert_eq!(attention_auc(&flat, &one_class, AucMode::Pooled).unwrap(), None);
        assert!(attention_auc(&[vec![1.0]], &gt, AucMode::Pooled).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            // Coarse scores force ties.
            let scores: Vec<f64> = (0..200).map(|_| (rng.random_range(0..20) as f64) / 7.0).collect();
            let pos: Vec<bool> = (0..200).map(|_| rng.random_bool(0.3)).collect();
            let a = auc_percent(&scores, &pos).unwrap();
            let b = pairwise_auc(&scores, &pos).unwrap();
            assert!((a - b).abs() < 1e-9);
            let mono: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            assert!((auc_percent(&mono, &pos).unwrap() - a).abs() < 1e-9);
            let distinct: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
            let d = auc_percent(&distinct, &pos).unwrap();
            let dn = auc_percent(&distinct.iter().map(|s| -s).collect::<Vec<_>>(), &pos).unwrap();
            assert!((d + dn - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn per_graph_mode_skips_single_class_graphs() {
        let gt = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.5, 0.5]];
        let pred = vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.3, 0.7]];
        assert_eq!(attention_auc(&pred, &gt, AucMode::PerGraph).unwrap(), Some(100.0));
        // Pooled: positives 0.9, 0.3, 0.7 against negatives 0.1, 0.5, 0.5.
        let pooled = attention_auc(&pred, &gt, AucMode::Pooled).unwrap().unwrap();
        assert!((pooled - 100.0 * 7.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn decode_rounds_and_clamps() {
        assert_eq!(decode(3.49, [0, 10]), 3);
        assert_eq!(decode(3.5, [0, 10]), 4);
        assert_eq!(decode(-2.0, [0, 10]), 0);
        assert_eq!(decode(40.0, [1, 10]), 10);
        assert_eq!(decode(f64::NAN, [1, 10]), 1);
    }

    fn report(model: &str, seed: u64, acc: f64) -> RunReport {
        RunReport {
            task: Task::Colors,
            model: model.into(),
            seed,
            accuracy: [(SplitName::TestOrig, acc)].into_iter().collect(),
            combined_accuracy: acc,
            attn_auc: Some(acc),
            auc_source: Some(AucSource::Attention),
            runtime_secs: 0.0,
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[report("a", 0, 90.0)]).unwrap();
        assert!(one.rows.iter().all(|r| r.std == 0.0 && r.mean == 90.0 && r.n_seeds == 1));
        let two = aggregate(&[report("a", 0, 90.0), report("a", 1, 100.0)]).unwrap();
        let r = &two.rows[0];
        assert_eq!(r.mean, 95.0);
        assert!((r.std - 7.0710678118654755).abs() < 1e-12);
        let swapped = aggregate(&[report("a", 1, 100.0), report("a", 0, 90.0)]).unwrap();
        assert_eq!(two, swapped);
        let mut mixed = report("a", 2, 50.0);
        mixed.task = Task::Triangles;
        assert!(aggregate(&[report("a", 0, 90.0), mixed]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let agg = aggregate(&[report("m", 0, 1.0 / 3.0), report("m", 1, 2.0 / 7.0), report("n", 0, 0.1)]).unwrap();
        write_csv(&agg, &path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "task,model,subset,metric,mean,std,n_seeds");
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), agg.rows.len());
        for (a, b) in back.iter().zip(&agg.rows) {
            assert!((a.mean - b.mean).abs() < 1e-9 && (a.std - b.std).abs() < 1e-9);
        }
    }
}
