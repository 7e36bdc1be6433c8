//! Classification metrics and cross-model agreement analyses.
//!
//! A sample is predicted "crossing" when its score is at least the threshold (0.5
//! unless stated otherwise), so ties at the threshold count as positive.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cropper::CropMode;
use crate::error::{Error, Result};
use crate::trackdata::write_atomic;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::invalid(format!("score {s} outside [0, 1]")));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::invalid(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties counting one half.
/// Computed from average ranks in O(n log n).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
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
        // 1-based ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mean_rank;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

pub fn metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Metrics {
        samples: scores.len(),
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        auc: auc(scores, labels).ok(),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    })
}

/// `(false positive rate, true positive rate)` at every distinct score, highest first,
/// starting at (0, 0) and ending at (1, 1).
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Vec<[f64; 2]> {
    let pos = labels.iter().filter(|l| **l == 1).count().max(1) as f64;
    let neg = labels.iter().filter(|l| **l == 0).count().max(1) as f64;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![[0.0, 0.0]];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (n, &i) in idx.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if n + 1 == idx.len() || scores[idx[n + 1]] != scores[i] {
            pts.push([fp / neg, tp / pos]);
        }
    }
    pts
}

/// Scores of one model in one crop mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelColumn {
    pub model: String,
    pub mode: CropMode,
    pub scores: Vec<f64>,
}

/// Per-sample labels with one score column per model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub sample_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub columns: Vec<ModelColumn>,
}

impl PredictionTable {
    pub fn validate(&self) -> Result<()> {
        let n = self.sample_ids.len();
        if self.labels.len() != n {
            return Err(Error::invalid("label column length differs from sample ids"));
        }
        for c in &self.columns {
            if c.scores.len() != n {
                return Err(Error::invalid(format!("model {} has {} scores for {n} samples", c.model, c.scores.len())));
            }
            if let Some(s) = c.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::invalid(format!("model {} score {s} outside [0, 1]", c.model)));
            }
        }
        if self.labels.iter().any(|l| *l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    fn column(&self, model: &str) -> Result<&ModelColumn> {
        self.columns
            .iter()
            .find(|c| c.model == model)
            .ok_or_else(|| Error::invalid(format!("no predictions for model {model}")))
    }

    /// `correct[m][i]`: whether model `m` classifies sample `i` correctly.
    pub fn correctness(&self, threshold: f64) -> Vec<Vec<bool>> {
        self.columns
            .iter()
            .map(|c| {
                c.scores
                    .iter()
                    .zip(&self.labels)
                    .map(|(s, l)| (*s >= threshold) == (*l == 1))
                    .collect()
            })
            .collect()
    }

    fn analysable(&self) -> Result<()> {
        self.validate()?;
        if self.is_empty() {
            return Err(Error::invalid("prediction table is empty"));
        }
        if self.columns.len() < 2 {
            return Err(Error::invalid("analysis needs at least two models"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllWrong {
    pub samples: usize,
    pub all_wrong: usize,
    pub fraction_all_wrong: f64,
    pub non_crossing: usize,
    pub crossing: usize,
    /// Share of the all-wrong subset labelled non-crossing; `None` if the subset is empty.
    pub non_crossing_fraction: Option<f64>,
}

/// Samples every model gets wrong, with their label breakdown.
pub fn all_wrong_analysis(table: &PredictionTable, threshold: f64) -> Result<AllWrong> {
    table.analysable()?;
    let correct = table.correctness(threshold);
    let (mut crossing, mut non_crossing) = (0, 0);
    for i in 0..table.len() {
        if correct.iter().all(|c| !c[i]) {
            if table.labels[i] == 1 {
                crossing += 1;
            } else {
                non_crossing += 1;
            }
        }
    }
    let all_wrong = crossing + non_crossing;
    Ok(AllWrong {
        samples: table.len(),
        all_wrong,
        fraction_all_wrong: all_wrong as f64 / table.len() as f64,
        non_crossing,
        crossing,
        non_crossing_fraction: (all_wrong > 0).then(|| non_crossing as f64 / all_wrong as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusiveCorrect {
    pub model: String,
    /// Samples on which every other model is wrong.
    pub others_wrong: usize,
    pub model_correct: usize,
    /// `None` (undefined) when no sample has all other models wrong.
    pub ratio: Option<f64>,
}

/// Among samples where every model except `model` is wrong, the fraction `model` gets right.
pub fn exclusive_correct_ratio(table: &PredictionTable, model: &str, threshold: f64) -> Result<ExclusiveCorrect> {
    table.analysable()?;
    let m = table
        .columns
        .iter()
        .position(|c| c.model == model)
        .ok_or_else(|| Error::invalid(format!("no predictions for model {model}")))?;
    let correct = table.correctness(threshold);
    let (mut others_wrong, mut model_correct) = (0, 0);
    for i in 0..table.len() {
        let others = correct.iter().enumerate().filter(|(k, _)| *k != m).all(|(_, c)| !c[i]);
        if others {
            others_wrong += 1;
            model_correct += correct[m][i] as usize;
        }
    }
    Ok(ExclusiveCorrect {
        model: model.to_string(),
        others_wrong,
        model_correct,
        ratio: (others_wrong > 0).then(|| model_correct as f64 / others_wrong as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeComplement {
    pub model: String,
    pub samples: usize,
    pub dyn_only_correct_pct: f64,
    pub stat_only_correct_pct: f64,
}

/// How often `model` is right in exactly one crop mode, as percentages of the shared samples.
pub fn mode_complement(
    dynamic: &PredictionTable,
    stat: &PredictionTable,
    model: &str,
    threshold: f64,
) -> Result<ModeComplement> {
    dynamic.validate()?;
    stat.validate()?;
    if dynamic.is_empty() {
        return Err(Error::invalid("prediction table is empty"));
    }
    let d_ids: BTreeSet<&String> = dynamic.sample_ids.iter().collect();
    let s_ids: BTreeSet<&String> = stat.sample_ids.iter().collect();
    if d_ids != s_ids || d_ids.len() != dynamic.len() || s_ids.len() != stat.len() {
        return Err(Error::invalid("dynamic and static predictions cover different samples"));
    }
    let dc = dynamic.column(model)?;
    let sc = stat.column(model)?;
    let s_pos: BTreeMap<&String, usize> = stat.sample_ids.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let (mut dyn_only, mut stat_only) = (0, 0);
    for (i, id) in dynamic.sample_ids.iter().enumerate() {
        let j = s_pos[id];
        if stat.labels[j] != dynamic.labels[i] {
            return Err(Error::invalid(format!("sample {id} has different labels in the two tables")));
        }
        let label = dynamic.labels[i] == 1;
        let d_ok = (dc.scores[i] >= threshold) == label;
        let s_ok = (sc.scores[j] >= threshold) == label;
        dyn_only += (d_ok && !s_ok) as usize;
        stat_only += (s_ok && !d_ok) as usize;
    }
    let n = dynamic.len() as f64;
    Ok(ModeComplement {
        model: model.to_string(),
        samples: dynamic.len(),
        dyn_only_correct_pct: 100.0 * dyn_only as f64 / n,
        stat_only_correct_pct: 100.0 * stat_only as f64 / n,
    })
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub label: u8,
    pub model: String,
    pub mode: CropMode,
    pub score: f64,
}

pub fn write_predictions(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path.as_ref(), &buf)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Groups rows into one table per crop mode. Within a mode every model must score
/// exactly the same samples, with consistent labels. Sample order follows the first
/// model seen; columns are sorted by model name.
pub fn tables_by_mode(rows: &[PredictionRow]) -> Result<BTreeMap<CropMode, PredictionTable>> {
    let mut grouped: BTreeMap<CropMode, BTreeMap<String, Vec<&PredictionRow>>> = BTreeMap::new();
    for r in rows {
        grouped.entry(r.mode).or_default().entry(r.model.clone()).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (mode, models) in grouped {
        let first = models.values().next().expect("non-empty group");
        let sample_ids: Vec<String> = first.iter().map(|r| r.sample_id.clone()).collect();
        let labels: Vec<u8> = first.iter().map(|r| r.label).collect();
        let pos: BTreeMap<&str, usize> = sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if pos.len() != sample_ids.len() {
            return Err(Error::invalid(format!("duplicate sample ids in {} predictions", mode.as_str())));
        }
        let mut columns = Vec::new();
        for (model, rs) in &models {
            if rs.len() != sample_ids.len() {
                return Err(Error::invalid(format!(
                    "{model} ({}) scores {} samples, expected {}",
                    mode.as_str(),
                    rs.len(),
                    sample_ids.len()
                )));
            }
            let mut scores = vec![f64::NAN; sample_ids.len()];
            for r in rs {
                let i = *pos.get(r.sample_id.as_str()).ok_or_else(|| {
                    Error::invalid(format!("{model} scores unknown sample {}", r.sample_id))
                })?;
                if labels[i] != r.label {
                    return Err(Error::invalid(format!("sample {} has conflicting labels", r.sample_id)));
                }
                if !scores[i].is_nan() {
                    return Err(Error::invalid(format!("{model} scores {} twice", r.sample_id)));
                }
                scores[i] = r.score;
            }
            columns.push(ModelColumn {
                model: model.clone(),
                mode,
                scores,
            });
        }
        let table = PredictionTable {
            sample_ids,
            labels,
            columns,
        };
        table.validate()?;
        out.insert(mode, table);
    }
    Ok(out)
}

/// Output of `eval`: one model in one crop mode on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mode: CropMode,
    pub split: String,
    pub threshold: f64,
    pub metrics: Metrics,
    pub roc: Vec<[f64; 2]>,
    /// File name of the prediction rows, relative to the report.
    pub predictions: String,
    /// Effective configuration, echoed for provenance.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAnalysis {
    pub models: BTreeMap<String, Metrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub all_wrong: Option<AllWrong>,
    pub exclusive_correct: Vec<ExclusiveCorrect>,
}

/// Output of `compare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub threshold: f64,
    pub modes: BTreeMap<String, ModeAnalysis>,
    pub mode_complement: Vec<ModeComplement>,
}

/// Every analysis that the available predictions support.
pub fn compare(rows: &[PredictionRow], threshold: f64) -> Result<ComparisonReport> {
    if rows.is_empty() {
        return Err(Error::invalid("no predictions to compare"));
    }
    let tables = tables_by_mode(rows)?;
    let mut modes = BTreeMap::new();
    for (mode, t) in &tables {
        let mut models = BTreeMap::new();
        for c in &t.columns {
            models.insert(c.model.clone(), metrics(&c.scores, &t.labels, threshold)?);
        }
        let (all_wrong, exclusive_correct) = if t.columns.len() >= 2 {
            let ex = t
                .columns
                .iter()
                .map(|c| exclusive_correct_ratio(t, &c.model, threshold))
                .collect::<Result<Vec<_>>>()?;
            (Some(all_wrong_analysis(t, threshold)?), ex)
        } else {
            (None, Vec::new())
        };
        modes.insert(
            mode.as_str().to_string(),
            ModeAnalysis {
                models,
                all_wrong,
                exclusive_correct,
            },
        );
    }
    let mut mode_complement = Vec::new();
    if let (Some(d), Some(s)) = (tables.get(&CropMode::Dynamic), tables.get(&CropMode::Static)) {
        for c in &d.columns {
            if s.columns.iter().any(|o| o.model == c.model) {
                mode_complement.push(self::mode_complement(d, s, &c.model, threshold)?);
            }
        }
    }
    Ok(ComparisonReport {
        threshold,
        modes,
        mode_complement,
    })
}

/// Pretty JSON with a trailing newline; key order follows struct declaration order.
pub fn write_report<T: Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(report)?;
    buf.push(b'\n');
    write_atomic(path.as_ref(), &buf)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn table(labels: &[u8], cols: &[&[f64]]) -> PredictionTable {
        PredictionTable {
            sample_ids: (0..labels.len()).map(|i| format!("s{i}")).collect(),
            labels: labels.to_vec(),
            columns: cols
                .iter()
                .enumerate()
                .map(|(k, s)| ModelColumn {
                    model: format!("m{k}"),
                    mode: CropMode::Dynamic,
                    scores: s.to_vec(),
                })
                .collect(),
        }
    }

    /// Coarse scores so ties and threshold hits are common.
    fn random_table(rng: &mut ChaCha8Rng, n: usize, models: usize) -> PredictionTable {
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let cols: Vec<Vec<f64>> = (0..models)
            .map(|_| (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect())
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        table(&labels, &refs)
    }

    #[test]
    fn perfect_separation() {
        let m = metrics(&[0.9, 0.8, 0.4, 0.3], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((m.accuracy, m.auc, m.f1), (1.0, Some(1.0), Some(1.0)));
    }

    #[test]
    fn three_of_four_pairs_ordered() {
        assert_eq!(auc(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn hand_computed_f1() {
        let m = metrics(&[1.0, 1.0, 0.0], &[1, 0, 0], 0.5).unwrap();
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, Some(1.0));
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_makes_auc_undefined_but_keeps_accuracy() {
        assert!(matches!(auc(&[0.2, 0.7], &[1, 1]), Err(Error::Undefined(_))));
        let m = metrics(&[0.2, 0.7], &[1, 1], 0.5).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.auc, None);
    }

    #[test]
    fn threshold_ties_are_positive() {
        let m = metrics(&[0.5, 0.49], &[1, 0], 0.5).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(metrics(&[1.2], &[1], 0.5).is_err());
        assert!(metrics(&[0.2], &[2], 0.5).is_err());
        assert!(metrics(&[], &[], 0.5).is_err());
        assert!(metrics(&[0.1, 0.2], &[1], 0.5).is_err());
    }

    #[test]
    fn all_correct_means_nobody_all_wrong() {
        let col: &[f64] = &[0.9, 0.1, 0.8];
        let t = table(&[1, 0, 1], &[col; 4]);
        let a = all_wrong_analysis(&t, 0.5).unwrap();
        assert_eq!(a.fraction_all_wrong, 0.0);
        assert_eq!(a.non_crossing_fraction, None);
    }

    #[test]
    fn constructed_seven_percent_all_wrong() {
        let mut labels = vec![0u8; 100];
        let mut a = vec![0.0; 100];
        let mut b = vec![0.0; 100];
        for i in 0..100 {
            labels[i] = (i % 2) as u8;
        }
        // samples 0..7 are wrong for both models: 5 non-crossing, 2 crossing
        for (i, l) in labels.iter_mut().enumerate().take(7) {
            *l = if i < 5 { 0 } else { 1 };
        }
        for i in 0..100 {
            let right = if labels[i] == 1 { 0.9 } else { 0.1 };
            let wrong = 1.0 - right;
            a[i] = if i < 7 { wrong } else { right };
            // model b is wrong on a different set too, but never alone on 0..7
            b[i] = if i < 7 || i % 10 == 9 { wrong } else { right };
        }
        let t = table(&labels, &[&a, &b]);
        let r = all_wrong_analysis(&t, 0.5).unwrap();
        assert_eq!(r.all_wrong, 7);
        assert_eq!(r.fraction_all_wrong, 0.07);
        assert_eq!((r.non_crossing, r.crossing), (5, 2));
        assert_eq!(r.non_crossing_fraction, Some(5.0 / 7.0));
    }

    #[test]
    fn exclusive_ratio_extremes() {
        let labels = [1, 0, 1, 0];
        let right = [0.9, 0.1, 0.9, 0.1];
        let wrong = [0.1, 0.9, 0.1, 0.9];
        let t = table(&labels, &[&right, &wrong, &wrong]);
        assert_eq!(exclusive_correct_ratio(&t, "m0", 0.5).unwrap().ratio, Some(1.0));
        let t = table(&labels, &[&right, &right, &right]);
        let r = exclusive_correct_ratio(&t, "m0", 0.5).unwrap();
        assert_eq!((r.others_wrong, r.ratio), (0, None));
        assert!(exclusive_correct_ratio(&t, "missing", 0.5).is_err());
    }

    #[test]
    fn analyses_need_two_models_and_samples() {
        let one = table(&[1], &[&[0.9]]);
        assert!(all_wrong_analysis(&one, 0.5).is_err());
        assert!(exclusive_correct_ratio(&one, "m0", 0.5).is_err());
        let empty = table(&[], &[&[], &[]]);
        assert!(all_wrong_analysis(&empty, 0.5).is_err());
    }

    fn with_mode(mut t: PredictionTable, mode: CropMode) -> PredictionTable {
        for c in &mut t.columns {
            c.mode = mode;
        }
        t
    }

    #[test]
    fn mode_complement_extremes() {
        let labels = [1, 0, 1];
        let right = [0.9, 0.1, 0.7];
        let wrong = [0.1, 0.9, 0.3];
        let d = with_mode(table(&labels, &[&right]), CropMode::Dynamic);
        let s = with_mode(table(&labels, &[&right]), CropMode::Static);
        let r = mode_complement(&d, &s, "m0", 0.5).unwrap();
        assert_eq!((r.dyn_only_correct_pct, r.stat_only_correct_pct), (0.0, 0.0));
        let s = with_mode(table(&labels, &[&wrong]), CropMode::Static);
        let r = mode_complement(&d, &s, "m0", 0.5).unwrap();
        assert_eq!((r.dyn_only_correct_pct, r.stat_only_correct_pct), (100.0, 0.0));
    }

    #[test]
    fn mode_complement_rejects_id_mismatch() {
        let d = table(&[1, 0], &[&[0.9, 0.1]]);
        let mut s = d.clone();
        s.sample_ids[1] = "other".into();
        assert!(mode_complement(&d, &s, "m0", 0.5).is_err());
    }

    #[test]
    fn mode_complement_matches_samples_by_id() {
        let d = table(&[1, 0], &[&[0.9, 0.1]]);
        let s = PredictionTable {
            sample_ids: vec!["s1".into(), "s0".into()],
            labels: vec![0, 1],
            columns: vec![ModelColumn {
                model: "m0".into(),
                mode: CropMode::Static,
                scores: vec![0.1, 0.2],
            }],
        };
        let r = mode_complement(&d, &s, "m0", 0.5).unwrap();
        assert_eq!((r.dyn_only_correct_pct, r.stat_only_correct_pct), (50.0, 0.0));
    }

    #[test]
    fn random_tables_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.gen_range(2..60);
            let models = rng.gen_range(2..5);
            let t = random_table(&mut rng, n, models);
            let correct = |m: usize, i: usize| (t.columns[m].scores[i] >= 0.5) == (t.labels[i] == 1);

            for c in &t.columns {
                let m = metrics(&c.scores, &t.labels, 0.5).unwrap();
                let hits = (0..n).filter(|&i| (c.scores[i] >= 0.5) == (t.labels[i] == 1)).count();
                assert_eq!(m.accuracy, hits as f64 / n as f64);
                let both = t.labels.contains(&0) && t.labels.contains(&1);
                match m.auc {
                    Some(a) => assert!((a - brute_auc(&c.scores, &t.labels)).abs() < 1e-9),
                    None => assert!(!both),
                }
                let tp = (0..n).filter(|&i| c.scores[i] >= 0.5 && t.labels[i] == 1).count() as f64;
                let pp = (0..n).filter(|&i| c.scores[i] >= 0.5).count() as f64;
                let ap = (0..n).filter(|&i| t.labels[i] == 1).count() as f64;
                if pp > 0.0 && ap > 0.0 && tp > 0.0 {
                    let (p, r) = (tp / pp, tp / ap);
                    assert!((m.f1.unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-12);
                }
            }

            let mut aw = 0;
            let mut aw_neg = 0;
            for i in 0..n {
                if (0..models).all(|m| !correct(m, i)) {
                    aw += 1;
                    aw_neg += (t.labels[i] == 0) as usize;
                }
            }
            let r = all_wrong_analysis(&t, 0.5).unwrap();
            assert_eq!((r.all_wrong, r.non_crossing), (aw, aw_neg));
            assert_eq!(r.fraction_all_wrong, aw as f64 / n as f64);

            for m in 0..models {
                let mut den = 0;
                let mut num = 0;
                for i in 0..n {
                    if (0..models).filter(|&k| k != m).all(|k| !correct(k, i)) {
                        den += 1;
                        num += correct(m, i) as usize;
                    }
                }
                let r = exclusive_correct_ratio(&t, &format!("m{m}"), 0.5).unwrap();
                assert_eq!((r.others_wrong, r.model_correct), (den, num));
                assert_eq!(r.ratio, (den > 0).then(|| num as f64 / den as f64));
            }

            let d = with_mode(table(&t.labels, &[&t.columns[0].scores]), CropMode::Dynamic);
            let s = with_mode(table(&t.labels, &[&t.columns[1].scores]), CropMode::Static);
            let r = mode_complement(&d, &s, "m0", 0.5).unwrap();
            let dyn_only = (0..n).filter(|&i| correct(0, i) && !correct(1, i)).count();
            let stat_only = (0..n).filter(|&i| correct(1, i) && !correct(0, i)).count();
            assert_eq!(r.dyn_only_correct_pct, 100.0 * dyn_only as f64 / n as f64);
            assert_eq!(r.stat_only_correct_pct, 100.0 * stat_only as f64 / n as f64);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            data in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| s.powi(3) * 0.5 + 0.1).collect();
            prop_assert!((a - auc(&warped, &labels).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn accuracy_and_f1_in_range(
            data in prop::collection::vec((0.0f64..=1.0, 0u8..2), 1..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            let m = metrics(&scores, &labels, 0.5).unwrap();
            let errors = scores.iter().zip(&labels).filter(|(s, l)| (**s >= 0.5) != (**l == 1)).count();
            prop_assert!((m.accuracy + errors as f64 / scores.len() as f64 - 1.0).abs() < 1e-12);
            if let Some(f) = m.f1 { prop_assert!((0.0..=1.0).contains(&f)); }
        }
    }

    #[test]
    fn roc_runs_from_origin_to_corner() {
        let pts = roc_points(&[0.9, 0.8, 0.8, 0.3], &[1, 0, 1, 0]);
        assert_eq!(pts, vec![[0.0, 0.0], [0.0, 0.5], [0.5, 1.0], [1.0, 1.0]]);
    }

    fn rows(model: &str, mode: CropMode, scores: &[(&str, u8, f64)]) -> Vec<PredictionRow> {
        scores
            .iter()
            .map(|(id, l, s)| PredictionRow {
                sample_id: id.to_string(),
                label: *l,
                model: model.into(),
                mode,
                score: *s,
            })
            .collect()
    }

    #[test]
    fn prediction_file_round_trip_and_grouping() {
        let mut all = rows("vivit", CropMode::Dynamic, &[("a", 1, 0.9), ("b", 0, 0.2)]);
        all.extend(rows("i3d", CropMode::Dynamic, &[("b", 0, 0.7), ("a", 1, 0.6)]));
        all.extend(rows("vivit", CropMode::Static, &[("a", 1, 0.1), ("b", 0, 0.1)]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        write_predictions(&all, &p).unwrap();
        let back = read_predictions(&p).unwrap();
        assert_eq!(back, all);
        let tables = tables_by_mode(&back).unwrap();
        let d = &tables[&CropMode::Dynamic];
        assert_eq!(d.columns.iter().map(|c| c.model.as_str()).collect::<Vec<_>>(), ["i3d", "vivit"]);
        // i3d rows arrived as b, a but are aligned to the first model's order
        assert_eq!(d.sample_ids, ["b", "a"]);
        assert_eq!(d.columns[0].scores, [0.7, 0.6]);
        assert_eq!(d.columns[1].scores, [0.2, 0.9]);
    }

    #[test]
    fn inconsistent_predictions_rejected() {
        let mut all = rows("x", CropMode::Dynamic, &[("a", 1, 0.9), ("b", 0, 0.2)]);
        all.extend(rows("y", CropMode::Dynamic, &[("a", 0, 0.9), ("b", 0, 0.2)]));
        assert!(tables_by_mode(&all).is_err());
        let mut all = rows("x", CropMode::Dynamic, &[("a", 1, 0.9), ("b", 0, 0.2)]);
        all.extend(rows("y", CropMode::Dynamic, &[("a", 1, 0.9)]));
        assert!(tables_by_mode(&all).is_err());
    }

    #[test]
    fn compare_reproduces_hand_numbers() {
        // labels a=1 b=0 c=1 d=0
        let mut all = rows("p", CropMode::Dynamic, &[("a", 1, 0.9), ("b", 0, 0.8), ("c", 1, 0.2), ("d", 0, 0.1)]);
        all.extend(rows("q", CropMode::Dynamic, &[("a", 1, 0.1), ("b", 0, 0.9), ("c", 1, 0.3), ("d", 0, 0.6)]));
        all.extend(rows("p", CropMode::Static, &[("a", 1, 0.1), ("b", 0, 0.1), ("c", 1, 0.9), ("d", 0, 0.1)]));
        let r = compare(&all, 0.5).unwrap();
        let d = &r.modes["dynamic"];
        // p right on a,d; q right on none. all-wrong: b and c
        assert_eq!(d.models["p"].accuracy, 0.5);
        assert_eq!(d.models["q"].accuracy, 0.0);
        let aw = d.all_wrong.as_ref().unwrap();
        assert_eq!((aw.all_wrong, aw.non_crossing, aw.crossing), (2, 1, 1));
        // q wrong everywhere -> p exclusive ratio over all 4 samples = 2/4
        assert_eq!(d.exclusive_correct[0].ratio, Some(0.5));
        // p is wrong on b and c, and q gets neither right
        assert_eq!(d.exclusive_correct[1].ratio, Some(0.0));
        assert!(r.modes["static"].all_wrong.is_none());
        // p dynamic right {a,d}, static right {b,c,d}: dyn-only a, stat-only b,c
        let mc = &r.mode_complement[0];
        assert_eq!((mc.dyn_only_correct_pct, mc.stat_only_correct_pct), (25.0, 50.0));
    }

    #[test]
    fn reports_are_byte_stable() {
        let all = rows("p", CropMode::Dynamic, &[("a", 1, 0.9), ("b", 0, 0.4)]);
        let r = compare(&all, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.json"), dir.path().join("2.json"));
        write_report(&r, &p1).unwrap();
        write_report(&compare(&all, 0.5).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.find("\"threshold\"").unwrap() < text.find("\"modes\"").unwrap());
    }
}
