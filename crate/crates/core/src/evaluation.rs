//! Anomaly scores from difference maps, detection metrics and lesion overlap.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tapegrad::Tensor;

use crate::batch::ImageBatch;
use crate::composition::{compose_healthy, difference_map, write_heatmap};
use crate::datasets::{load_mask, load_split, ImageSet, Label, SampleRecord, Split};
use crate::error::{Error, IoContext, Result};
use crate::networks::GeneratorParams;

/// Mean absolute difference between an image and its translation.
pub fn anomaly_score(x: &ImageBatch, translated: &ImageBatch) -> Result<f64> {
    let d = difference_map(x, translated)?;
    if d.numel() == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(d.data().iter().map(|&v| v as f64).sum::<f64>() / d.numel() as f64)
}

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

fn check_two_classes(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score is not finite".into()));
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::Degenerate(format!(
            "need both classes, got {p} anomalous and {n} healthy"
        )));
    }
    Ok((p, n))
}

/// Pair counts behind the Mann–Whitney statistic: positives scoring above a
/// negative, and tied pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    pub wins: u64,
    pub ties: u64,
    pub pairs: u64,
}

impl PairCounts {
    /// `(2·wins + ties) / (2·pairs)`.
    pub fn auc(&self) -> f64 {
        (2 * self.wins + self.ties) as f64 / (2 * self.pairs) as f64
    }
}

/// Pair counts in `O(n log n)` from tie groups of the sorted scores.
pub fn pair_counts(scores: &[f64], labels: &[bool]) -> Result<PairCounts> {
    let (p, n) = check_two_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let (mut wins, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        wins += gp * neg_below;
        ties += gp * gn;
        neg_below += gn;
        i = j;
    }
    Ok(PairCounts {
        wins,
        ties,
        pairs: p * n,
    })
}

/// Area under the ROC curve, equal to `P(pos > neg) + ½·P(tie)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(pair_counts(scores, labels)?.auc())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Predicts anomalous iff `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Thresholded detection metrics. Undefined ratios are reported as 0 and
/// named in `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub undefined: Vec<String>,
}

impl ClassificationMetrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let mut undefined = Vec::new();
        let mut get = |name: &str, v: Option<f64>| {
            v.unwrap_or_else(|| {
                undefined.push(name.to_string());
                0.0
            })
        };
        let precision = get("precision", ratio(c.tp, c.tp + c.fp));
        let recall = get("recall", ratio(c.tp, c.tp + c.fn_));
        let specificity = get("specificity", ratio(c.tn, c.tn + c.fp));
        let f1 = get(
            "f1",
            (precision + recall > 0.0).then(|| 2.0 * precision * recall / (precision + recall)),
        );
        Self {
            precision,
            recall,
            specificity,
            f1,
            confusion: c,
            undefined,
        }
    }
}

pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationMetrics> {
    check_two_classes(scores, labels)?;
    Ok(ClassificationMetrics::from_confusion(Confusion::at(scores, labels, threshold)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    /// Maximise F1, ties toward higher specificity.
    #[default]
    F1,
    /// Maximise sensitivity + specificity − 1, ties toward higher specificity.
    Youden,
}

impl std::str::FromStr for ThresholdRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Self::F1),
            "youden" => Ok(Self::Youden),
            _ => Err(Error::Config(format!("unknown threshold rule {s:?} (f1 or youden)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// No two distinct scores, so no midpoint candidate exists.
    pub degenerate: bool,
}

/// Midpoints between adjacent distinct sorted scores.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect()
}

/// Chooses a decision threshold over the midpoint candidates.
pub fn select_threshold(scores: &[f64], labels: &[bool], rule: ThresholdRule) -> Result<ThresholdChoice> {
    check_two_classes(scores, labels)?;
    let candidates = threshold_candidates(scores);
    if candidates.is_empty() {
        return Ok(ThresholdChoice {
            threshold: scores[0],
            degenerate: true,
        });
    }
    let (pos, neg) = class_counts(labels);
    // objectives as exact fractions so mathematically equal values tie
    let objective = |c: &Confusion| -> (u128, u128) {
        match rule {
            ThresholdRule::F1 => {
                let den = 2 * c.tp + c.fp + c.fn_;
                if c.tp == 0 {
                    (0, 1)
                } else {
                    (2 * c.tp as u128, den as u128)
                }
            }
            ThresholdRule::Youden => ((c.tp * neg + c.tn * pos) as u128, (pos * neg) as u128),
        }
    };
    let mut best: Option<(f64, (u128, u128), u64)> = None;
    for t in candidates {
        let c = Confusion::at(scores, labels, t);
        let (num, den) = objective(&c);
        // specificity has the fixed denominator `neg`, so `tn` orders it
        let better = match best {
            None => true,
            Some((_, (bn, bd), btn)) => {
                let (lhs, rhs) = (num * bd, bn * den);
                lhs > rhs || (lhs == rhs && c.tn > btn)
            }
        };
        if better {
            best = Some((t, (num, den), c.tn));
        }
    }
    Ok(ThresholdChoice {
        threshold: best.unwrap().0,
        degenerate: false,
    })
}

/// Dice overlap of `{map >= pixel_threshold}` with `gt`; two empty sets give 1.
pub fn localization_dice(diff_map: &[f64], gt: &[bool], pixel_threshold: f64) -> Result<f64> {
    if diff_map.len() != gt.len() {
        return Err(Error::Shape(format!(
            "difference map of {} pixels vs mask of {}",
            diff_map.len(),
            gt.len()
        )));
    }
    let (mut inter, mut pred, mut truth) = (0u64, 0u64, 0u64);
    for (&d, &g) in diff_map.iter().zip(gt) {
        let p = d >= pixel_threshold;
        pred += p as u64;
        truth += g as u64;
        inter += (p && g) as u64;
    }
    if pred + truth == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (pred + truth) as f64)
}

/// Channel-mean of one `(C, H, W)` difference map.
pub fn channel_mean(map: &Tensor<f32>) -> Vec<f64> {
    let s = map.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    (0..plane)
        .map(|i| (0..c).map(|k| map.data()[k * plane + i] as f64).sum::<f64>() / c as f64)
        .collect()
}

/// Candidate pixel thresholds for localisation, scanned on validation data.
pub fn pixel_threshold_grid() -> Vec<f64> {
    (1..=60).map(|i| i as f64 * 0.01).collect()
}

/// Per-sample translation result.
#[derive(Clone, Debug)]
pub struct ScoredSample {
    pub record: SampleRecord,
    pub score: f64,
    /// `(C, H, W)` absolute difference to the translated image.
    pub diff_map: Tensor<f32>,
}

/// Translates `set` with `generator` and scores every image.
pub fn score_set(generator: &GeneratorParams<f32>, set: &ImageSet, batch_size: usize) -> Result<Vec<ScoredSample>> {
    let mut out = Vec::with_capacity(set.len());
    let mut k = 0;
    for chunk in set.chunks(batch_size.max(1)) {
        let x = chunk?;
        let g = generator.forward(&x)?;
        let translated = compose_healthy(&x, &g.intermediate, &g.mask)?;
        for i in 0..x.len() {
            let (xi, ti) = (x.sample(i), translated.sample(i));
            let score = anomaly_score(&xi, &ti)?;
            let d = difference_map(&xi, &ti)?;
            let s = d.shape()[1..].to_vec();
            out.push(ScoredSample {
                record: set.records()[k].clone(),
                score,
                diff_map: d.reshape(&s)?,
            });
            k += 1;
        }
    }
    Ok(out)
}

fn labels_of(samples: &[ScoredSample], split: Split) -> Result<Vec<bool>> {
    samples
        .iter()
        .map(|s| {
            s.record.label().map(Label::is_anomalous).ok_or_else(|| Error::Dataset {
                path: s.record.path().to_path_buf(),
                msg: format!("{split} sample has no label"),
            })
        })
        .collect()
}

/// Evaluation output written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: Option<PathBuf>,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub threshold: f64,
    pub threshold_rule: ThresholdRule,
    pub degenerate_threshold: bool,
    pub undefined_metrics: Vec<String>,
    pub confusion: Confusion,
    pub n_pos: u64,
    pub n_neg: u64,
    pub val_auc: f64,
    pub pixel_threshold: f64,
    /// Mean Dice over lesioned test samples that were detected.
    pub mean_dice: Option<f64>,
    pub n_dice: usize,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub rule: ThresholdRule,
    pub batch_size: usize,
    /// Directory for difference-map heatmaps of the test split.
    pub heatmap_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rule: ThresholdRule::F1,
            batch_size: 16,
            heatmap_dir: None,
        }
    }
}

fn masks_for(samples: &[ScoredSample], size: usize) -> Result<Vec<Option<Vec<bool>>>> {
    samples
        .iter()
        .map(|s| s.record.gt_mask_path().map(|p| load_mask(p, size)).transpose())
        .collect()
}

/// Pixel threshold maximising mean Dice over lesioned validation samples.
fn choose_pixel_threshold(samples: &[ScoredSample], masks: &[Option<Vec<bool>>]) -> Result<f64> {
    let maps: Vec<(Vec<f64>, &Vec<bool>)> = samples
        .iter()
        .zip(masks)
        .filter(|(s, m)| s.record.label() == Some(Label::Anomalous) && m.is_some())
        .map(|(s, m)| (channel_mean(&s.diff_map), m.as_ref().unwrap()))
        .collect();
    let grid = pixel_threshold_grid();
    if maps.is_empty() {
        return Ok(grid[grid.len() / 2]);
    }
    let mut best = (grid[0], f64::NEG_INFINITY);
    for t in grid {
        let mut total = 0.0;
        for (d, m) in &maps {
            total += localization_dice(d, m, t)?;
        }
        let mean = total / maps.len() as f64;
        if mean > best.1 {
            best = (t, mean);
        }
    }
    Ok(best.0)
}

/// Scores the validation and test splits, chooses both thresholds on
/// validation, and reports test metrics.
pub fn evaluate_generator(
    generator: &GeneratorParams<f32>,
    data_root: &Path,
    image_size: usize,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<ScoredSample>)> {
    let channels = generator.channels();
    let val = ImageSet::load(load_split(data_root, Split::Val)?, image_size, channels)?;
    let test = ImageSet::load(load_split(data_root, Split::Test)?, image_size, channels)?;
    let val_scored = score_set(generator, &val, opts.batch_size)?;
    let test_scored = score_set(generator, &test, opts.batch_size)?;
    let val_labels = labels_of(&val_scored, Split::Val)?;
    let test_labels = labels_of(&test_scored, Split::Test)?;
    let val_scores: Vec<f64> = val_scored.iter().map(|s| s.score).collect();
    let test_scores: Vec<f64> = test_scored.iter().map(|s| s.score).collect();

    let choice = select_threshold(&val_scores, &val_labels, opts.rule)?;
    let m = classification_metrics(&test_scores, &test_labels, choice.threshold)?;
    let auc = roc_auc(&test_scores, &test_labels)?;
    let val_auc = roc_auc(&val_scores, &val_labels)?;

    let pixel_threshold = choose_pixel_threshold(&val_scored, &masks_for(&val_scored, image_size)?)?;
    let test_masks = masks_for(&test_scored, image_size)?;
    let mut dice = Vec::new();
    for ((s, m), &l) in test_scored.iter().zip(&test_masks).zip(&test_labels) {
        if let (true, Some(m)) = (l && s.score >= choice.threshold, m) {
            dice.push(localization_dice(&channel_mean(&s.diff_map), m, pixel_threshold)?);
        }
    }
    if let Some(dir) = &opts.heatmap_dir {
        std::fs::create_dir_all(dir).at(dir)?;
        for s in &test_scored {
            let stem = s.record.path().file_stem().unwrap_or_default().to_string_lossy().into_owned();
            write_heatmap(&s.diff_map, &dir.join(format!("{stem}.png")))?;
        }
    }
    let (n_pos, n_neg) = class_counts(&test_labels);
    let report = EvalReport {
        checkpoint: None,
        auc,
        precision: m.precision,
        recall: m.recall,
        specificity: m.specificity,
        f1: m.f1,
        threshold: choice.threshold,
        threshold_rule: opts.rule,
        degenerate_threshold: choice.degenerate,
        undefined_metrics: m.undefined,
        confusion: m.confusion,
        n_pos,
        n_neg,
        val_auc,
        pixel_threshold,
        mean_dice: (!dice.is_empty()).then(|| dice.iter().sum::<f64>() / dice.len() as f64),
        n_dice: dice.len(),
    };
    Ok((report, test_scored))
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, json).at(path)
}

/// Writes `path,label,score` rows.
pub fn write_scores_csv(samples: &[ScoredSample], path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["path", "label", "score"]).map_err(err)?;
    for s in samples {
        w.write_record([
            s.record.path().display().to_string(),
            s.record.label().map(|l| l.as_str().to_string()).unwrap_or_default(),
            format!("{}", s.score),
        ])
        .map_err(err)?;
    }
    w.flush().at(path)
}
