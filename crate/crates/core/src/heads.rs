//! Fine-tuning heads, the fine-tuning loop and evaluation metrics.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelValue, LabeledWindows, Labels, TaskKind};
use crate::encoder::LatentSequence;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PimtModel};
use crate::nn::{normal_mat, train_step, AdamW, CosineSchedule, Mat, ParamId, ParamSet, Tape, Var};
use crate::seed::derive_seed;

pub const GAZE_BATCH_SIZE: usize = 10;
pub const CLASSIFICATION_BATCH_SIZE: usize = 8;

/// Linear map from a pooled latent to `K` class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Linear map from each token latent to a 2D angle in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorHead {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

pub fn pool_mean(z: &LatentSequence) -> Array1<f64> {
    let n = z.latents.nrows().max(1) as f64;
    z.latents.sum_axis(ndarray::Axis(0)) / n
}

fn check_head(z: &LatentSequence, weights: &Array2<f64>, bias: &Array1<f64>) -> Result<()> {
    if weights.nrows() != z.latents.ncols() || bias.len() != weights.ncols() {
        return Err(Error::Shape(format!(
            "head {:?} (+{}) does not fit latents of width {}",
            weights.dim(),
            bias.len(),
            z.latents.ncols()
        )));
    }
    Ok(())
}

pub fn classify(z: &LatentSequence, head: &ClassifierHead) -> Result<Array1<f64>> {
    check_head(z, &head.weights, &head.bias)?;
    Ok(pool_mean(z).dot(&head.weights) + &head.bias)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean over tokens of the per-token prediction.
pub fn regress(z: &LatentSequence, head: &RegressorHead) -> Result<[f64; 2]> {
    check_head(z, &head.weights, &head.bias)?;
    if head.weights.ncols() != 2 {
        return Err(Error::Shape("gaze head must have two outputs".into()));
    }
    let per_token = z.latents.dot(&head.weights) + &head.bias;
    let n = per_token.nrows().max(1) as f64;
    let m = per_token.sum_axis(ndarray::Axis(0)) / n;
    Ok([m[0], m[1]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class precision, recall and F1; undefined ratios count as 0.
pub fn per_class_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<ClassMetrics>> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no samples".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..n_classes)
        .map(|k| {
            let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == k && l == k).count();
            let predicted = preds.iter().filter(|&&p| p == k).count();
            let support = labels.iter().filter(|&&l| l == k).count();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect())
}

/// Unweighted mean of per-class F1 over the classes present in
/// `labels` or `preds`.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let n_classes = preds.iter().chain(labels).copied().max().map_or(0, |m| m + 1);
    let per_class = per_class_metrics(preds, labels, n_classes)?;
    let present: Vec<f64> = per_class
        .iter()
        .enumerate()
        .filter(|(k, _)| labels.contains(k) || preds.contains(k))
        .map(|(_, m)| m.f1)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Euclidean distance in the (horizontal, vertical) angle plane.
pub fn angular_error(pred: [f64; 2], gt: [f64; 2]) -> f64 {
    (pred[0] - gt[0]).hypot(pred[1] - gt[1])
}

pub fn mean_angular_error(preds: &[[f64; 2]], gts: &[[f64; 2]]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} predictions for {} targets",
            preds.len(),
            gts.len()
        )));
    }
    Ok(preds.iter().zip(gts).map(|(&p, &g)| angular_error(p, g)).sum::<f64>() / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub macro_f1: Option<f64>,
    pub angular_error_deg: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub n_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    /// Macro-F1 for classification, mean angular error for gaze.
    pub fn primary(&self) -> f64 {
        self.macro_f1.or(self.angular_error_deg).unwrap_or(f64::NAN)
    }

    pub fn from_predictions(preds: &[LabelValue], labels: &Labels, seed: u64) -> Result<Self> {
        match labels {
            Labels::Classes { values, n_classes } => {
                let p: Vec<usize> = preds
                    .iter()
                    .map(|v| match v {
                        LabelValue::Class(k) => Ok(*k),
                        _ => Err(Error::Config("class label expected".into())),
                    })
                    .collect::<Result<_>>()?;
                Ok(Self {
                    task: TaskKind::Classification,
                    macro_f1: Some(macro_f1(&p, values)?),
                    angular_error_deg: None,
                    per_class: per_class_metrics(&p, values, *n_classes)?,
                    n_samples: p.len(),
                    seed,
                    config_hash: String::new(),
                })
            }
            Labels::Gaze(gts) => {
                let p: Vec<[f64; 2]> = preds
                    .iter()
                    .map(|v| match v {
                        LabelValue::Gaze(a) => Ok(*a),
                        _ => Err(Error::Config("gaze label expected".into())),
                    })
                    .collect::<Result<_>>()?;
                Ok(Self {
                    task: TaskKind::Gaze,
                    macro_f1: None,
                    angular_error_deg: Some(mean_angular_error(&p, gts)?),
                    per_class: Vec::new(),
                    n_samples: p.len(),
                    seed,
                    config_hash: String::new(),
                })
            }
        }
    }
}

/// Mean and population standard deviation of the primary metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricsReport>,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn new(reports: Vec<MetricsReport>) -> Self {
        let values: Vec<f64> = reports.iter().map(MetricsReport::primary).collect();
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            seeds: reports.iter().map(|r| r.seed).collect(),
            reports,
            mean,
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Defaults to 10 for gaze and 8 otherwise.
    pub batch_size: Option<usize>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Train only the head.
    pub freeze_encoder: bool,
    /// Number of repetitions with consecutive seeds starting at `seed`.
    pub seeds: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: None,
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.01,
            epochs: 10,
            seed: 0,
            freeze_encoder: false,
            seeds: 3,
        }
    }
}

impl FinetuneConfig {
    pub fn batch_size_for(&self, kind: TaskKind) -> usize {
        self.batch_size.unwrap_or(match kind {
            TaskKind::Gaze => GAZE_BATCH_SIZE,
            TaskKind::Classification => CLASSIFICATION_BATCH_SIZE,
        })
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.seeds == 0 || self.batch_size == Some(0) {
            return Err(Error::Config(
                "finetune epochs, seeds and batch size must be positive".into(),
            ));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("finetune learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Task head registered under `head.`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: TaskKind,
    pub outputs: usize,
}

impl HeadSpec {
    pub fn for_labels(labels: &Labels) -> Self {
        match labels {
            Labels::Classes { n_classes, .. } => Self {
                kind: TaskKind::Classification,
                outputs: *n_classes,
            },
            Labels::Gaze(_) => Self {
                kind: TaskKind::Gaze,
                outputs: 2,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub model: PimtModel,
    pub head: HeadSpec,
    /// Gaze targets are divided by this during training.
    pub label_scale: f64,
    w: ParamId,
    b: ParamId,
}

impl FinetuneModel {
    pub fn new(cfg: ModelConfig, head: HeadSpec, label_scale: f64) -> Result<Self> {
        if head.kind == TaskKind::Classification && head.outputs < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        let mut model = PimtModel::new(cfg)?;
        let d = model.cfg.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.encoder.seed);
        rng.set_stream(3);
        let w = model.params.add(
            "head.w",
            normal_mat(&mut rng, d, head.outputs, 1.0 / (d as f64).sqrt()),
            true,
        );
        let b = model.params.add("head.b", Mat::zeros((1, head.outputs)), false);
        Ok(Self {
            model,
            head,
            label_scale,
            w,
            b,
        })
    }

    /// Copy tokenizer and encoder weights from a pre-trained parameter set.
    pub fn load_backbone(&mut self, pretrained: &ParamSet) -> Result<()> {
        self.model.params.load_matching(pretrained, "tokenizer.")?;
        self.model.params.load_matching(pretrained, "encoder.")?;
        Ok(())
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.model.params.set_trainable_prefix("tokenizer.", !frozen);
        self.model.params.set_trainable_prefix("encoder.", !frozen);
    }

    /// Output before the task loss: `1×K` logits or the `1×2` scaled angle.
    /// Returns `(embeddings, output)`.
    pub fn record_output(&self, tape: &mut Tape, tokens: &Mat) -> Result<(Var, Var)> {
        self.model.cfg.check_tokens(tokens)?;
        let x = tape.constant(tokens.clone());
        let (e, z) = self.model.forward(tape, x, None);
        let out = match self.head.kind {
            TaskKind::Classification => {
                let pooled = tape.mean_rows(z);
                tape.linear(pooled, self.w, Some(self.b))
            }
            TaskKind::Gaze => {
                let per_token = tape.linear(z, self.w, Some(self.b));
                tape.mean_rows(per_token)
            }
        };
        Ok((e, out))
    }

    /// Variant of [`record_output`](Self::record_output) whose embeddings are
    /// a differentiable input, for attribution.
    pub fn record_output_from_embeddings(&self, tape: &mut Tape, embeddings: Var) -> Var {
        let z = self.model.encoder.forward(tape, embeddings);
        match self.head.kind {
            TaskKind::Classification => {
                let pooled = tape.mean_rows(z);
                tape.linear(pooled, self.w, Some(self.b))
            }
            TaskKind::Gaze => {
                let per_token = tape.linear(z, self.w, Some(self.b));
                tape.mean_rows(per_token)
            }
        }
    }

    fn record_loss(&self, tape: &mut Tape, tokens: &Mat, label: &LabelValue) -> Result<Var> {
        let (_, out) = self.record_output(tape, tokens)?;
        match (self.head.kind, label) {
            (TaskKind::Classification, LabelValue::Class(k)) => Ok(tape.cross_entropy(out, *k)),
            (TaskKind::Gaze, LabelValue::Gaze(a)) => {
                let target =
                    Mat::from_shape_vec((1, 2), vec![a[0] / self.label_scale, a[1] / self.label_scale]).expect("1×2");
                Ok(tape.mse(out, &target))
            }
            _ => Err(Error::Config(format!(
                "label {label:?} does not match a {:?} head",
                self.head.kind
            ))),
        }
    }

    pub fn predict(&self, tokens: &Mat) -> Result<LabelValue> {
        let mut tape = Tape::new(&self.model.params);
        let (_, out) = self.record_output(&mut tape, tokens)?;
        let row = tape.value(out).row(0).to_owned();
        Ok(match self.head.kind {
            TaskKind::Classification => LabelValue::Class(argmax(&row)),
            TaskKind::Gaze => LabelValue::Gaze([row[0] * self.label_scale, row[1] * self.label_scale]),
        })
    }

    pub fn classifier(&self) -> ClassifierHead {
        ClassifierHead {
            weights: self.model.params.get(self.w).clone(),
            bias: self.model.params.get(self.b).row(0).to_owned(),
        }
    }

    pub fn evaluate(
        &self,
        data: &LabeledWindows,
        idx: &[usize],
        seed: u64,
    ) -> Result<(MetricsReport, Vec<LabelValue>)> {
        let preds = idx
            .iter()
            .map(|&i| self.predict(&data.windows.tokens(i, self.model.cfg.patch_len)?))
            .collect::<Result<Vec<_>>>()?;
        let report = MetricsReport::from_predictions(&preds, &data.labels.subset(idx), seed)?;
        Ok((report, preds))
    }
}

fn label_at(labels: &Labels, i: usize) -> LabelValue {
    match labels {
        Labels::Classes { values, .. } => LabelValue::Class(values[i]),
        Labels::Gaze(v) => LabelValue::Gaze(v[i]),
    }
}

fn gaze_scale(labels: &Labels, idx: &[usize]) -> f64 {
    match labels {
        Labels::Gaze(v) => {
            let n = idx.len().max(1) as f64;
            let ms = idx.iter().map(|&i| v[i][0].powi(2) + v[i][1].powi(2)).sum::<f64>() / (2.0 * n);
            ms.sqrt().max(1e-6)
        }
        Labels::Classes { .. } => 1.0,
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: FinetuneModel,
    pub report: MetricsReport,
    pub predictions: Vec<LabelValue>,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
}

/// Train a head (and, unless frozen, the backbone) on `train`, then
/// evaluate on `test`. `pretrained` supplies backbone weights; without it
/// the backbone starts from random initialization with the run seed.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune(
    pretrained: Option<&ParamSet>,
    model_cfg: &ModelConfig,
    data: &LabeledWindows,
    kind: TaskKind,
    train: &[usize],
    test: &[usize],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.labels.kind() != kind {
        return Err(Error::Config(format!(
            "labels are {:?} but the task is {kind:?}",
            data.labels.kind()
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::SplitInfeasible(
            "fine-tuning needs train and test windows".into(),
        ));
    }
    let mut mcfg = model_cfg.clone();
    mcfg.encoder.seed = derive_seed(seed, &[model_cfg.encoder.seed]);
    let mut model = FinetuneModel::new(
        mcfg,
        HeadSpec::for_labels(&data.labels),
        gaze_scale(&data.labels, train),
    )?;
    if let Some(p) = pretrained {
        model.load_backbone(p)?;
    }
    model.freeze_backbone(cfg.freeze_encoder);

    let batch_size = cfg.batch_size_for(kind);
    let steps = train.len().div_ceil(batch_size) * cfg.epochs;
    let schedule = CosineSchedule {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        total_steps: steps,
    };
    let mut opt = AdamW::new(model.model.params.len(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mut order = train.to_vec();
    let mut step = 0;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let patch_len = model.model.cfg.patch_len;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let mut params = std::mem::take(&mut model.model.params);
            let frozen = &model;
            let result = train_step(&mut params, &mut opt, schedule.lr(step), batch, |tape, i| {
                frozen.record_loss(tape, &data.windows.tokens(i, patch_len)?, &label_at(&data.labels, i))
            });
            model.model.params = params;
            total += result? * batch.len() as f64;
            step += 1;
        }
        train_loss.push(total / order.len() as f64);
    }
    let (report, predictions) = model.evaluate(data, test, seed)?;
    Ok(FinetuneOutcome {
        model,
        report,
        predictions,
        train_loss,
    })
}

/// [`run_finetune`] once per seed in `cfg.seed_list()`.
pub fn run_finetune_seeds(
    pretrained: Option<&ParamSet>,
    model_cfg: &ModelConfig,
    data: &LabeledWindows,
    kind: TaskKind,
    train: &[usize],
    test: &[usize],
    cfg: &FinetuneConfig,
) -> Result<(SeedSummary, Vec<FinetuneOutcome>)> {
    let outcomes = cfg
        .seed_list()
        .into_iter()
        .map(|s| run_finetune(pretrained, model_cfg, data, kind, train, test, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let summary = SeedSummary::new(outcomes.iter().map(|o| o.report.clone()).collect());
    Ok((summary, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenization::TokenIndex;
    use ndarray::array;

    fn latents(rows: Array2<f64>) -> LatentSequence {
        let n = rows.nrows();
        LatentSequence {
            latents: rows,
            index: TokenIndex::new(1, 1, n),
        }
    }

    #[test]
    fn pooling_examples() {
        let v = array![1.0, -2.0, 0.5];
        let z = latents(Array2::from_shape_fn((4, 3), |(_, j)| v[j]));
        assert_eq!(pool_mean(&z), v);
        let z = latents(array![[1.0, 2.0], [-1.0, -2.0]]);
        assert_eq!(pool_mean(&z), array![0.0, 0.0]);
    }

    #[test]
    fn classify_and_tie_break() {
        let z = latents(array![[1.0, 2.0], [3.0, 4.0]]);
        let head = ClassifierHead {
            weights: Array2::zeros((2, 3)),
            bias: Array1::zeros(3),
        };
        let logits = classify(&z, &head).unwrap();
        assert_eq!(logits, Array1::<f64>::zeros(3));
        assert_eq!(argmax(&logits), 0);
        assert_eq!(argmax(&array![0.1, 0.9]), 1);
        assert_eq!(argmax(&(array![0.1, 0.9, 0.3] + 7.0)), 1);
        let bad = ClassifierHead {
            weights: Array2::zeros((3, 2)),
            bias: Array1::zeros(2),
        };
        assert!(classify(&z, &bad).is_err());
    }

    #[test]
    fn regression_examples() {
        let z = latents(array![[1.0, 0.0], [0.0, 1.0]]);
        let constant = RegressorHead {
            weights: Array2::zeros((2, 2)),
            bias: array![3.0, -2.0],
        };
        assert_eq!(regress(&z, &constant).unwrap(), [3.0, -2.0]);
        let zero = RegressorHead {
            weights: Array2::zeros((2, 2)),
            bias: Array1::zeros(2),
        };
        assert_eq!(regress(&z, &zero).unwrap(), [0.0, 0.0]);
        let two_point = RegressorHead {
            weights: array![[0.0, 0.0], [2.0, 2.0]],
            bias: Array1::zeros(2),
        };
        let z = latents(array![[0.0, 0.0], [0.0, 1.0]]);
        assert_eq!(regress(&z, &two_point).unwrap(), [1.0, 1.0]);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        let always_zero = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert!((always_zero - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert!(matches!(macro_f1(&[], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn angular_examples() {
        assert_eq!(angular_error([1.0, 2.0], [1.0, 2.0]), 0.0);
        assert_eq!(angular_error([3.0, 4.0], [0.0, 0.0]), 5.0);
        let m = mean_angular_error(&[[0.0, 0.0], [10.0, 0.0]], &[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(m, 5.0);
    }

    #[test]
    fn seed_summary_population_std() {
        let report = |f1: f64, seed| MetricsReport {
            task: TaskKind::Classification,
            macro_f1: Some(f1),
            angular_error_deg: None,
            per_class: Vec::new(),
            n_samples: 1,
            seed,
            config_hash: String::new(),
        };
        let s = SeedSummary::new(vec![report(0.8, 0), report(1.0, 1)]);
        assert!((s.mean - 0.9).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
        assert_eq!(s.seeds, vec![0, 1]);
    }
}
