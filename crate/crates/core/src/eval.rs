//! Task metrics, the evaluation harness, and the ablation tables.
//!
//! Detection is scored as a set: predictions are matched greedily to truth
//! at IoU >= 0.5, so the order objects are emitted in never matters.
//! Aggregates are means of per-instance scores, summed in sorted order so the
//! report does not depend on instance order.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::decode::{decode_ar, decode_diffusion, DecodeError, DecoderSettings, RemaskStrategy};
use crate::net::{project, NetError, Params};
use crate::scenegen::{box_iou, derive_seed, render_features, SceneError, Task, TaskInstance};
use crate::vocab::{BBox, TokenId, TokenKind, Vocabulary, PAD_ID};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model and dataset are incompatible: {0}")]
    Compatibility(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub const IOU_MATCH: f64 = 0.5;
pub const IOU_DUPLICATE: f64 = 0.9;

/// Intersection over union; 0 when both boxes have zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    box_iou(a, b)
}

fn strip_pad(ids: &[TokenId]) -> Vec<TokenId> {
    ids.iter().copied().filter(|&id| id != PAD_ID).collect()
}

fn ngram_counts(ids: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU-4 with uniform weights and brevity penalty, `[PAD]` stripped.
///
/// Smoothing: once the candidate has at least one unigram match, an order
/// with no matches (or no n-grams at all) uses `(matches + 1) / (total + 1)`.
/// Orders that do match keep their plain modified precision.
pub fn bleu4(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    let cand = strip_pad(candidate);
    let refr = strip_pad(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let c = ngram_counts(&cand, n);
        let r = ngram_counts(&refr, n);
        let total: usize = c.values().sum();
        let matches: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        let p = if n == 1 {
            if matches == 0 {
                return 0.0;
            }
            matches as f64 / total as f64
        } else if matches == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matches as f64 / total as f64
        };
        log_sum += 0.25 * p.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub predicted: Vec<(usize, BBox)>,
    pub malformed_spans: usize,
}

/// Scans for `[class, c, c, c, c]` spans. `[PAD]` ends the scan; any other
/// token sequence counts as one malformed span and the scan resumes at the
/// next class token.
pub fn parse_detection(tokens: &[TokenId], vocab: &Vocabulary) -> DetectionResult {
    let mut out = DetectionResult::default();
    let is_class = |id: TokenId| vocab.class_of(id).is_some();
    let is_coord = |id: TokenId| vocab.kind(id) == Some(TokenKind::Coord);
    let mut i = 0;
    while i < tokens.len() && tokens[i] != PAD_ID {
        if let Some(class) = vocab.class_of(tokens[i]) {
            let span = tokens.get(i + 1..i + 5);
            if let Some(coords) = span.filter(|s| s.iter().all(|&id| is_coord(id))) {
                if let Ok(b) = vocab.decode_box(coords) {
                    out.predicted.push((class, b));
                    i += 5;
                    continue;
                }
            }
        }
        out.malformed_spans += 1;
        i += 1;
        while i < tokens.len() && tokens[i] != PAD_ID && !is_class(tokens[i]) {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub set_f1_at_05: f64,
    pub precision: f64,
    pub recall: f64,
    pub duplicate_rate: f64,
}

pub fn detection_scores(pred: &DetectionResult, truth: &[(usize, BBox)]) -> DetectionScores {
    let p = &pred.predicted;
    let mut used = vec![false; truth.len()];
    let mut matches = 0usize;
    for (class, b) in p {
        let mut best: Option<(usize, f64)> = None;
        for (j, (tc, tb)) in truth.iter().enumerate() {
            if used[j] || tc != class {
                continue;
            }
            let v = iou(b, tb);
            if v >= IOU_MATCH && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            matches += 1;
        }
    }
    let precision = if p.is_empty() {
        if truth.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        matches as f64 / p.len() as f64
    };
    let recall = if truth.is_empty() { 1.0 } else { matches as f64 / truth.len() as f64 };
    let set_f1_at_05 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let dups =
        (0..p.len()).filter(|&i| (0..i).any(|j| p[j].0 == p[i].0 && iou(&p[j].1, &p[i].1) >= IOU_DUPLICATE)).count();
    let duplicate_rate = if p.is_empty() { 0.0 } else { dups as f64 / p.len() as f64 };
    DetectionScores { set_f1_at_05, precision, recall, duplicate_rate }
}

/// 1 when the first four coordinate tokens form a box with IoU >= 0.5 to
/// the truth, else 0.
pub fn grounding_acc(pred: &[TokenId], truth: &BBox, vocab: &Vocabulary) -> f64 {
    let coords: Vec<TokenId> =
        pred.iter().copied().filter(|&id| vocab.kind(id) == Some(TokenKind::Coord)).take(4).collect();
    if coords.len() < 4 {
        return 0.0;
    }
    match vocab.decode_box(&coords) {
        Ok(b) if iou(&b, truth) >= IOU_MATCH => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    pub count: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub bleu4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundMetrics {
    pub count: usize,
    pub acc_at_05: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectMetrics {
    pub count: usize,
    pub set_f1_at_05: f64,
    pub precision: f64,
    pub recall: f64,
    pub duplicate_rate: f64,
    /// Fraction of outputs with at least one malformed span.
    pub malformed_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyMetrics {
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "paradigm")]
pub enum Decoder {
    Diffusion(DecoderSettings),
    Autoregressive,
    /// Predictions supplied directly, no model involved.
    Given,
}

impl std::fmt::Display for Decoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decoder::Diffusion(s) => write!(f, "diffusion N={} {}", s.timesteps, s.strategy.name()),
            Decoder::Autoregressive => f.write_str("autoregressive greedy"),
            Decoder::Given => f.write_str("given"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub decoder: Decoder,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<CaptionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground: Option<GroundMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detect: Option<DetectMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classify: Option<ClassifyMetrics>,
}

impl MetricsReport {
    /// `(task, metric, value)` for every reported score.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, f64)> {
        let mut r = Vec::new();
        if let Some(c) = &self.caption {
            r.extend([
                ("caption", "exact_match", c.exact_match),
                ("caption", "token_accuracy", c.token_accuracy),
                ("caption", "bleu4", c.bleu4),
            ]);
        }
        if let Some(g) = &self.ground {
            r.push(("ground", "acc_at_05", g.acc_at_05));
        }
        if let Some(d) = &self.detect {
            r.extend([
                ("detect", "set_f1_at_05", d.set_f1_at_05),
                ("detect", "precision", d.precision),
                ("detect", "recall", d.recall),
                ("detect", "duplicate_rate", d.duplicate_rate),
                ("detect", "malformed_rate", d.malformed_rate),
            ]);
        }
        if let Some(c) = &self.classify {
            r.push(("classify", "accuracy", c.accuracy));
        }
        r
    }

    pub fn all_in_range(&self) -> bool {
        self.rows().iter().all(|&(_, _, v)| (0.0..=1.0).contains(&v))
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,value\n");
        for (task, metric, v) in self.rows() {
            let _ = writeln!(s, "{task},{metric},{v:.6}");
        }
        s
    }
}

/// Order-free mean: values are sorted before summation.
fn mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores model outputs (full fixed-length templates) against the instances.
pub fn evaluate_predictions(
    instances: &[TaskInstance],
    predictions: &[Vec<TokenId>],
    vocab: &Vocabulary,
    decoder: Decoder,
) -> Result<MetricsReport, EvalError> {
    if instances.len() != predictions.len() {
        return Err(EvalError::Config(format!("{} predictions for {} instances", predictions.len(), instances.len())));
    }
    let mut cap: [Vec<f64>; 3] = Default::default();
    let mut ground = Vec::new();
    let mut det: [Vec<f64>; 5] = Default::default();
    let mut cls = Vec::new();
    for (inst, pred) in instances.iter().zip(predictions) {
        let target = &inst.target_ids;
        match inst.task {
            Task::Caption => {
                cap[0].push(f64::from(u8::from(pred == target)));
                let same = target.iter().zip(pred).filter(|(a, b)| a == b).count();
                cap[1].push(same as f64 / target.len().max(1) as f64);
                cap[2].push(bleu4(pred, target));
            }
            Task::Ground => {
                let truth = inst
                    .ref_object
                    .and_then(|i| inst.scene.objects.get(i))
                    .ok_or_else(|| EvalError::Config("grounding instance without a referent".into()))?;
                ground.push(grounding_acc(pred, &truth.bbox, vocab));
            }
            Task::Detect => {
                let parsed = parse_detection(pred, vocab);
                let s = detection_scores(&parsed, &inst.truth_objects());
                det[0].push(s.set_f1_at_05);
                det[1].push(s.precision);
                det[2].push(s.recall);
                det[3].push(s.duplicate_rate);
                det[4].push(f64::from(u8::from(parsed.malformed_spans > 0)));
            }
            Task::Classify => cls.push(f64::from(u8::from(strip_pad(pred) == strip_pad(target)))),
        }
    }
    let [c0, c1, c2] = cap;
    let [d0, d1, d2, d3, d4] = det;
    Ok(MetricsReport {
        instances: instances.len(),
        decoder,
        caption: (!c0.is_empty()).then(|| CaptionMetrics {
            count: c0.len(),
            exact_match: mean(c0),
            token_accuracy: mean(c1),
            bleu4: mean(c2),
        }),
        ground: (!ground.is_empty()).then(|| GroundMetrics { count: ground.len(), acc_at_05: mean(ground) }),
        detect: (!d0.is_empty()).then(|| DetectMetrics {
            count: d0.len(),
            set_f1_at_05: mean(d0),
            precision: mean(d1),
            recall: mean(d2),
            duplicate_rate: mean(d3),
            malformed_rate: mean(d4),
        }),
        classify: (!cls.is_empty()).then(|| ClassifyMetrics { count: cls.len(), accuracy: mean(cls) }),
    })
}

fn check_compat(params: &Params<f32>, dataset: &Dataset) -> Result<(), EvalError> {
    if let Some(h) = &params.config.vocab_hash {
        if *h != dataset.manifest.vocab_hash {
            return Err(EvalError::Compatibility(format!(
                "model vocabulary hash {h} differs from dataset vocabulary hash {}",
                dataset.manifest.vocab_hash
            )));
        }
    }
    if params.config.vocab_size != dataset.vocab.len() {
        return Err(EvalError::Compatibility(format!(
            "model vocabulary size {} differs from dataset vocabulary size {}",
            params.config.vocab_size,
            dataset.vocab.len()
        )));
    }
    Ok(())
}

/// Decodes one instance. Diffusion uses `min(N, L_task)` steps; random
/// remasking seeds are derived from the scene seed so results do not depend
/// on where the instance sits in the dataset.
pub fn decode_instance(
    params: &Params<f32>,
    dataset: &Dataset,
    inst: &TaskInstance,
    decoder: Decoder,
) -> Result<Vec<TokenId>, EvalError> {
    let grid = render_features(&inst.scene, dataset.spec(), params.config.d_v)?;
    let cv = project(params, &grid)?;
    let len = inst.task.target_len();
    match decoder {
        Decoder::Diffusion(s) => {
            let strategy = match s.strategy {
                RemaskStrategy::Random { seed } => RemaskStrategy::Random {
                    seed: derive_seed(seed, inst.scene.seed ^ (u64::from(inst.task.code()) << 56)),
                },
                other => other,
            };
            let (out, _) = decode_diffusion(params, Some(&cv), &inst.prompt_ids, len, s.timesteps.min(len), strategy)?;
            Ok(out)
        }
        Decoder::Autoregressive => Ok(decode_ar(params, Some(&cv), &inst.prompt_ids, len)?),
        Decoder::Given => Err(EvalError::Config("the given-predictions decoder cannot decode".into())),
    }
}

/// Decodes every instance of `dataset` and scores the outputs.
pub fn evaluate(params: &Params<f32>, dataset: &Dataset, decoder: Decoder) -> Result<MetricsReport, EvalError> {
    check_compat(params, dataset)?;
    if let Decoder::Diffusion(s) = decoder {
        if s.timesteps == 0 {
            return Err(EvalError::Config("timesteps must be at least 1".into()));
        }
    }
    let preds: Vec<Vec<TokenId>> = dataset
        .instances
        .par_iter()
        .map(|inst| decode_instance(params, dataset, inst, decoder))
        .collect::<Result<_, _>>()?;
    evaluate_predictions(&dataset.instances, &preds, &dataset.vocab, decoder)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    RemaskStrategy,
    Timesteps,
    Paradigm,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::RemaskStrategy => "remask_strategy",
            AblationKind::Timesteps => "timesteps",
            AblationKind::Paradigm => "paradigm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "remask_strategy" => Some(AblationKind::RemaskStrategy),
            "timesteps" => Some(AblationKind::Timesteps),
            "paradigm" => Some(AblationKind::Paradigm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    /// Fixed N for the strategy and paradigm comparisons.
    pub timesteps: usize,
    pub timestep_grid: Vec<usize>,
    pub random_runs: usize,
    pub seed: u64,
    /// Minimum object count for the paradigm comparison.
    pub min_objects: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { timesteps: 8, timestep_grid: vec![1, 2, 4, 8, 16], random_runs: 5, seed: 0, min_objects: 3 }
    }
}

pub const ABLATION_COLUMNS: [&str; 5] = ["set_f1_at_05", "precision", "recall", "duplicate_rate", "malformed_rate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub instances: usize,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn value(&self, setting: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.setting == setting).map(|r| r.values[c])
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("setting,{}\n", self.columns.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{},{}", r.setting, vals.join(","));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let w0 = self.rows.iter().map(|r| r.setting.len()).chain([7]).max().unwrap_or(7);
        let widths: Vec<usize> = self.columns.iter().map(|c| c.len().max(8)).collect();
        let mut s = format!("{:<w0$}", "setting");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<w0$}", r.setting);
            for (v, w) in r.values.iter().zip(&widths) {
                let _ = write!(s, "  {v:>w$.4}");
            }
            s.push('\n');
        }
        s
    }
}

fn detect_row(report: &MetricsReport) -> Vec<f64> {
    match &report.detect {
        Some(d) => vec![d.set_f1_at_05, d.precision, d.recall, d.duplicate_rate, d.malformed_rate],
        None => vec![0.0; ABLATION_COLUMNS.len()],
    }
}

/// Builds a comparison table on the detection instances of `dataset`.
pub fn run_ablation(
    kind: AblationKind,
    diffusion: Option<&Params<f32>>,
    ar: Option<&Params<f32>>,
    dataset: &Dataset,
    settings: &AblationSettings,
) -> Result<AblationTable, EvalError> {
    let diff = diffusion.ok_or_else(|| EvalError::Config("a diffusion checkpoint is required".into()))?;
    let min_objects = if kind == AblationKind::Paradigm { settings.min_objects } else { 0 };
    let split = dataset.filtered(|i| i.task == Task::Detect && i.scene.objects.len() >= min_objects);
    let lc = |n| Decoder::Diffusion(DecoderSettings { timesteps: n, strategy: RemaskStrategy::LowConfidence });
    let mut rows = Vec::new();
    match kind {
        AblationKind::RemaskStrategy => {
            rows.push(AblationRow {
                setting: "low-confidence".into(),
                values: detect_row(&evaluate(diff, &split, lc(settings.timesteps))?),
            });
            if settings.random_runs == 0 {
                return Err(EvalError::Config("random strategy needs at least one run".into()));
            }
            let mut per_run = Vec::new();
            for r in 0..settings.random_runs {
                let strategy = RemaskStrategy::Random { seed: derive_seed(settings.seed, r as u64) };
                let rep = evaluate(
                    diff,
                    &split,
                    Decoder::Diffusion(DecoderSettings { timesteps: settings.timesteps, strategy }),
                )?;
                per_run.push(detect_row(&rep));
            }
            let values = (0..ABLATION_COLUMNS.len()).map(|c| mean(per_run.iter().map(|r| r[c]).collect())).collect();
            rows.push(AblationRow { setting: "random".into(), values });
        }
        AblationKind::Timesteps => {
            for &n in &settings.timestep_grid {
                rows.push(AblationRow {
                    setting: format!("N={n}"),
                    values: detect_row(&evaluate(diff, &split, lc(n))?),
                });
            }
        }
        AblationKind::Paradigm => {
            let ar = ar.ok_or_else(|| EvalError::Config("an autoregressive checkpoint is required".into()))?;
            rows.push(AblationRow {
                setting: "diffusion".into(),
                values: detect_row(&evaluate(diff, &split, lc(settings.timesteps))?),
            });
            rows.push(AblationRow {
                setting: "autoregressive".into(),
                values: detect_row(&evaluate(ar, &split, Decoder::Autoregressive)?),
            });
        }
    }
    Ok(AblationTable {
        kind,
        instances: split.instances.len(),
        columns: ABLATION_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn vocab() -> Vocabulary {
        crate::scenegen::GenSpec::default().vocabulary(100).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(0.6, 0.6, 0.9, 0.9)), 0.0);
        assert_relative_eq!(iou(&a, &b(0.25, 0.0, 0.75, 0.5)), 1.0 / 3.0, epsilon = 1e-12);
        let z = b(0.2, 0.2, 0.2, 0.2);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn bleu_cases() {
        let r: Vec<TokenId> = vec![10, 11, 12, 13, 14];
        assert_relative_eq!(bleu4(&r, &r), 1.0, epsilon = 1e-12);
        assert_eq!(bleu4(&[], &r), 0.0);
        assert_eq!(bleu4(&[PAD_ID, PAD_ID], &r), 0.0);
        let c: Vec<TokenId> = vec![10, 11, 12, 13, 15];
        let expect = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert_relative_eq!(bleu4(&c, &r), expect, epsilon = 1e-12);
        assert_relative_eq!(expect, 0.6687, epsilon = 1e-4);
        // PAD is stripped from both sides.
        assert_relative_eq!(bleu4(&[10, 11, 12, 13, 14, 0, 0], &[10, 11, 12, 13, 14, 0]), 1.0, epsilon = 1e-12);
        assert_eq!(bleu4(&[20, 21], &r), 0.0);
    }

    #[test]
    fn parse_examples() {
        let v = vocab();
        let c = v.class_token(1);
        let mut toks = vec![c];
        toks.extend(v.encode_box(&b(0.1, 0.1, 0.3, 0.3)).unwrap());
        toks.push(v.class_token(2));
        toks.extend(v.encode_box(&b(0.5, 0.5, 0.7, 0.9)).unwrap());
        toks.resize(32, PAD_ID);
        let r = parse_detection(&toks, &v);
        assert_eq!(r.predicted.len(), 2);
        assert_eq!(r.malformed_spans, 0);
        assert!(parse_detection(&[PAD_ID; 32], &v).predicted.is_empty());

        let short = [c, v.coord_id(1), v.coord_id(2), v.coord_id(3), PAD_ID];
        let r = parse_detection(&short, &v);
        assert_eq!((r.predicted.len(), r.malformed_spans), (0, 1));

        // Junk then a valid span: one malformed span, one object.
        let mut junk = vec![v.lookup("detect").unwrap(), v.coord_id(4)];
        junk.extend_from_slice(&toks[..5]);
        let r = parse_detection(&junk, &v);
        assert_eq!((r.predicted.len(), r.malformed_spans), (1, 1));
    }

    #[test]
    fn detection_score_cases() {
        let t = vec![(0, b(0.0, 0.0, 0.2, 0.2)), (1, b(0.5, 0.5, 0.7, 0.7)), (0, b(0.6, 0.0, 0.9, 0.3))];
        let exact = DetectionResult { predicted: t.clone(), malformed_spans: 0 };
        let s = detection_scores(&exact, &t);
        assert_eq!((s.precision, s.recall, s.set_f1_at_05, s.duplicate_rate), (1.0, 1.0, 1.0, 0.0));

        let rep = DetectionResult { predicted: vec![t[0]; 3], malformed_spans: 0 };
        let s = detection_scores(&rep, &t);
        assert_relative_eq!(s.precision, 1.0 / 3.0);
        assert_relative_eq!(s.recall, 1.0 / 3.0);
        assert_relative_eq!(s.duplicate_rate, 2.0 / 3.0);

        let s = detection_scores(&DetectionResult::default(), &[]);
        assert_eq!(s.set_f1_at_05, 1.0);
        let s = detection_scores(&DetectionResult::default(), &t);
        assert_eq!((s.precision, s.recall, s.set_f1_at_05), (0.0, 0.0, 0.0));
        // Wrong class never matches.
        let wrong = DetectionResult { predicted: vec![(3, t[0].1)], malformed_spans: 0 };
        assert_eq!(detection_scores(&wrong, &t).precision, 0.0);
    }

    #[test]
    fn grounding_cases() {
        let v = vocab();
        let truth = b(0.2, 0.2, 0.3, 0.3);
        let mut exact = v.encode_box(&truth).unwrap().to_vec();
        exact.resize(8, PAD_ID);
        assert_eq!(grounding_acc(&exact, &truth, &v), 1.0);
        assert_eq!(grounding_acc(&[PAD_ID; 8], &truth, &v), 0.0);
        // Shift by one bin in every coordinate on a 10-bin box: overlap 9x9 over 2*100-81.
        let shifted: Vec<TokenId> = [21, 21, 31, 31].iter().map(|&k| v.coord_id(k)).collect();
        let expect = 81.0 / 119.0;
        let got = iou(&v.decode_box(&shifted).unwrap(), &v.decode_box(&v.encode_box(&truth).unwrap()).unwrap());
        assert_relative_eq!(got, expect, epsilon = 1e-9);
        assert_eq!(grounding_acc(&shifted, &v.decode_box(&v.encode_box(&truth).unwrap()).unwrap(), &v), 1.0);
    }

    #[test]
    fn table_rendering() {
        let t = AblationTable {
            kind: AblationKind::Timesteps,
            instances: 3,
            columns: vec!["a".into(), "b".into()],
            rows: vec![AblationRow { setting: "N=1".into(), values: vec![0.5, 0.25] }],
        };
        assert_eq!(t.to_csv(), "setting,a,b\nN=1,0.500000,0.250000\n");
        assert!(t.to_text().lines().count() == 2);
        assert_eq!(t.value("N=1", "b"), Some(0.25));
        assert_eq!(AblationKind::parse("remask-strategy"), Some(AblationKind::RemaskStrategy));
    }
}
