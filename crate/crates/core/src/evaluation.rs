//! Metrics, per-stratum reports, seed aggregation and attention export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, RegionMask};
use crate::data::io::{encode_pgm, encode_ppm, write_file};
use crate::data::{Sample, YES};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Prediction, Variant, VqaModel};
use crate::tensor::Tensor;

/// Fraction of exact matches.
pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "accuracy: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_scores(scores: &[f64], labels: &[bool], op: &str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{op}: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid(format!("{op}: NaN score")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels, "roc_auc")?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// `sum_k (R_k - R_{k-1}) P_k` over the descending-score sweep; equal scores
/// keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels, "average_precision")?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::invalid("average_precision needs a positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub count: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
}

impl StratumMetrics {
    pub fn compute(scores: &[f64], labels: &[bool], predicted_yes: &[bool]) -> Result<Self> {
        Ok(Self {
            count: labels.len(),
            accuracy: accuracy(predicted_yes, labels)?,
            auc: roc_auc(scores, labels).ok(),
            ap: average_precision(scores, labels).ok(),
        })
    }

    fn cells(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("accuracy", self.accuracy)];
        if let Some(v) = self.auc {
            out.push(("auc", v));
        }
        if let Some(v) = self.ap {
            out.push(("ap", v));
        }
        out
    }
}

pub const OVERALL: &str = "overall";
pub const CONTEXT: &str = "context";

/// Metrics of one trained model on one split, by stratum. Strata are
/// `overall`, one per class, and `context` (ambiguous bar questions).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strata: BTreeMap<String, StratumMetrics>,
}

/// Yes-probability and prediction for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
    pub predicted_yes: bool,
    pub class: String,
    pub context: bool,
}

impl EvalReport {
    pub fn from_scored(samples: &[ScoredSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("evaluation of an empty set"));
        }
        let mut groups: BTreeMap<String, Vec<&ScoredSample>> = BTreeMap::new();
        for s in samples {
            groups.entry(OVERALL.into()).or_default().push(s);
            groups.entry(s.class.clone()).or_default().push(s);
            if s.context {
                groups.entry(CONTEXT.into()).or_default().push(s);
            }
        }
        let mut strata = BTreeMap::new();
        for (name, g) in groups {
            let scores: Vec<f64> = g.iter().map(|s| s.score).collect();
            let labels: Vec<bool> = g.iter().map(|s| s.label).collect();
            let preds: Vec<bool> = g.iter().map(|s| s.predicted_yes).collect();
            strata.insert(name, StratumMetrics::compute(&scores, &labels, &preds)?);
        }
        Ok(Self { strata })
    }

    pub fn get(&self, stratum: &str) -> Option<&StratumMetrics> {
        self.strata.get(stratum)
    }

    pub fn auc(&self, stratum: &str) -> Option<f64> {
        self.get(stratum).and_then(|m| m.auc)
    }
}

/// Eval-mode predictions, in batches.
pub fn predict_samples(model: &VqaModel, vocab: &Vocabulary, samples: &[Sample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let inputs = chunk
            .iter()
            .map(|s| model.prepare(vocab, &s.image, &s.record.question, &s.mask))
            .collect::<Result<Vec<_>>>()?;
        out.extend(model.predict_prepared(&inputs)?);
    }
    Ok(out)
}

/// Scores every sample and builds the stratified report.
pub fn evaluate(model: &VqaModel, vocab: &Vocabulary, samples: &[Sample]) -> Result<(EvalReport, Vec<ScoredSample>)> {
    let yes = vocab
        .answer_id(YES)
        .ok_or_else(|| Error::Config("answer set lacks `yes`".into()))?;
    let preds = predict_samples(model, vocab, samples)?;
    let scored: Vec<ScoredSample> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| ScoredSample {
            score: p.distribution.probs[yes],
            label: s.record.answer == YES,
            predicted_yes: p.distribution.predicted == yes,
            class: s.record.class.clone(),
            context: s.record.context,
        })
        .collect();
    Ok((EvalReport::from_scored(&scored)?, scored))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Per stratum, per metric mean and std over seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub cells: BTreeMap<String, BTreeMap<String, MeanStd>>,
    pub counts: BTreeMap<String, usize>,
}

impl SeedAggregate {
    pub fn cell(&self, stratum: &str, metric: &str) -> Option<MeanStd> {
        self.cells.get(stratum).and_then(|m| m.get(metric)).copied()
    }
}

/// Aggregates reports that share the same strata and metrics.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedAggregate> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("aggregate_seeds needs at least one report"))?;
    let layout = |r: &EvalReport| -> Vec<(String, Vec<&'static str>, usize)> {
        r.strata
            .iter()
            .map(|(k, m)| (k.clone(), m.cells().iter().map(|c| c.0).collect(), m.count))
            .collect()
    };
    let expected = layout(first);
    for r in &reports[1..] {
        if layout(r) != expected {
            return Err(Error::invalid("aggregate_seeds: reports have different strata"));
        }
    }
    let mut agg = SeedAggregate::default();
    for (stratum, m) in &first.strata {
        let mut row = BTreeMap::new();
        for (i, (metric, _)) in m.cells().iter().enumerate() {
            let values: Vec<f64> = reports.iter().map(|r| r.strata[stratum].cells()[i].1).collect();
            row.insert((*metric).to_owned(), MeanStd::of(&values));
        }
        agg.cells.insert(stratum.clone(), row);
        agg.counts.insert(stratum.clone(), m.count);
    }
    Ok(agg)
}

/// Main comparison table, rows in [`Variant::ALL`] order.
pub fn comparison_markdown(rows: &BTreeMap<Variant, SeedAggregate>) -> String {
    let mut out = String::from("| Method | Accuracy | AUC | AP |\n|---|---|---|---|\n");
    for v in Variant::ALL {
        let Some(agg) = rows.get(&v) else { continue };
        let cell = |m: &str| agg.cell(OVERALL, m).map_or("n/a".to_string(), |c| c.to_string());
        out.push_str(&format!(
            "| {v} | {} | {} | {} |\n",
            cell("accuracy"),
            cell("auc"),
            cell("ap")
        ));
    }
    out
}

/// Per-object AUC table: one column per class stratum plus `context`.
pub fn per_object_markdown(rows: &BTreeMap<Variant, SeedAggregate>) -> String {
    let mut strata: Vec<String> = rows
        .values()
        .flat_map(|a| a.cells.keys().cloned())
        .filter(|s| s != OVERALL)
        .collect();
    strata.sort();
    strata.dedup();
    let mut out = format!("| Method | {} |\n|---|", strata.join(" | "));
    out.push_str(&"---|".repeat(strata.len()));
    out.push('\n');
    for v in Variant::ALL {
        let Some(agg) = rows.get(&v) else { continue };
        let cells: Vec<String> = strata
            .iter()
            .map(|s| agg.cell(s, "auc").map_or("n/a".to_string(), |c| c.to_string()))
            .collect();
        out.push_str(&format!("| {v} | {} |\n", cells.join(" | ")));
    }
    out
}

/// `variant,stratum,metric,mean,std,n` rows.
pub fn comparison_csv(rows: &BTreeMap<Variant, SeedAggregate>) -> String {
    let mut out = String::from("variant,stratum,metric,mean,std,n\n");
    for v in Variant::ALL {
        let Some(agg) = rows.get(&v) else { continue };
        for (stratum, metrics) in &agg.cells {
            for (metric, c) in metrics {
                out.push_str(&format!("{v},{stratum},{metric},{},{},{}\n", c.mean, c.std, c.n));
            }
        }
    }
    out
}

/// Single-run report as markdown.
pub fn report_markdown(report: &EvalReport) -> String {
    let mut out = String::from("| Stratum | N | Accuracy | AUC | AP |\n|---|---|---|---|---|\n");
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    for (name, m) in &report.strata {
        out.push_str(&format!(
            "| {name} | {} | {:.3} | {} | {} |\n",
            m.count,
            m.accuracy,
            fmt(m.auc),
            fmt(m.ap)
        ));
    }
    out
}

/// Nearest-neighbour upsampling of an `h x w` map to `size x size`.
pub fn upsample_nearest(values: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            out.push(values[(r * h / size) * w + c * w / size]);
        }
    }
    out
}

/// Min-max normalization to `[0, 1]`; constant inputs map to zero.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Writes `<stem>_g<k>.pgm` (normalized glimpse) and `<stem>_g<k>_overlay.ppm`
/// (image blended with a red heat layer, region outlined in yellow) per
/// glimpse. Returns the written paths.
pub fn export_attention(
    map: &AttentionMap,
    image: &Tensor,
    mask: &RegionMask,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let s = mask.size();
    if image.shape() != [3, s, s] {
        return Err(Error::ShapeMismatch {
            op: "export_attention",
            lhs: image.shape().to_vec(),
            rhs: vec![3, s, s],
        });
    }
    let shape = map.tensor().shape();
    let (h, w) = (shape[1], shape[2]);
    if s % h != 0 || s % w != 0 {
        return Err(Error::invalid(format!("map {h}x{w} does not tile a {s} px image")));
    }
    let outline = RegionMask::from_fn(s, |r, c| {
        mask.get(r, c)
            && [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dr, dc)| {
                let (y, x) = (r as isize + dr, c as isize + dc);
                y < 0 || x < 0 || y >= s as isize || x >= s as isize || !mask.get(y as usize, x as usize)
            })
    });
    let mut paths = Vec::new();
    for k in 0..map.glimpses() {
        let heat = min_max(&upsample_nearest(map.glimpse(k), h, w, s));
        let pgm = dir.join(format!("{stem}_g{k}.pgm"));
        write_file(&pgm, &encode_pgm(&heat, s, s)?)?;
        let mut overlay = image.clone();
        let d = overlay.data_mut();
        for p in 0..s * s {
            let layer = [heat[p], 0.0, 0.0];
            for ch in 0..3 {
                d[ch * s * s + p] = 0.5 * d[ch * s * s + p] + 0.5 * layer[ch];
            }
            if outline.bits()[p] != 0 {
                d[p] = 1.0;
                d[s * s + p] = 1.0;
                d[2 * s * s + p] = 0.0;
            }
        }
        let ppm = dir.join(format!("{stem}_g{k}_overlay.ppm"));
        write_file(&ppm, &encode_ppm(&overlay)?)?;
        paths.push(pgm);
        paths.push(ppm);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(accuracy(&[1, 1, 1, 0], &[1, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        let labels = [true, false, true, false];
        assert_eq!(roc_auc(&[0.9, 0.1, 0.8, 0.2], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.4, 0.1], &labels).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.2, 0.9], &[true, false]).unwrap(), 0.5);
        assert!(average_precision(&[0.2], &[false]).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let report = |v: f64| EvalReport {
            strata: [(
                OVERALL.to_string(),
                StratumMetrics {
                    count: 4,
                    accuracy: v,
                    auc: Some(v),
                    ap: None,
                },
            )]
            .into(),
        };
        let agg = aggregate_seeds(&[report(0.8), report(0.9)]).unwrap();
        let c = agg.cell(OVERALL, "auc").unwrap();
        assert_eq!(c.to_string(), "0.850 ± 0.050");
        let same = aggregate_seeds(&[report(0.7), report(0.7)]).unwrap();
        assert_eq!(same.cell(OVERALL, "accuracy").unwrap().std, 0.0);
        let mut other = report(0.7);
        other.strata.get_mut(OVERALL).unwrap().ap = Some(0.5);
        assert!(aggregate_seeds(&[report(0.7), other]).is_err());
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn constant_and_one_hot_maps() {
        assert_eq!(min_max(&[0.25; 4]), vec![0.0; 4]);
        let up = upsample_nearest(&[0.0, 1.0, 0.0, 0.0], 2, 2, 4);
        assert_eq!(up.iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(up[2], 1.0);
        assert_eq!(up[7], 1.0);
    }
}
