//! Self-supervised pre-training: six reconstruction objectives decoded from
//! a shared encoder and combined in a weighted MAE.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowSet;
use crate::encoder::LatentSequence;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PimtModel};
use crate::nn::{loss, normal_mat, train_step, AdamW, CosineSchedule, Mat, ParamId, ParamSet, Tape, Var};
use crate::seed::derive_seed;
use crate::sigproc::{augment_noise, BandStack};
use crate::tokenization::{sample_mask, MaskMode, MaskSpec, PatchGrid, DEFAULT_MASK_RATIO};

/// Amplitudes below this carry no meaningful phase.
pub const PHASE_AMPLITUDE_FLOOR: f64 = 1e-8;
pub const DECODER_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Objective {
    AE,
    MR,
    A,
    P,
    MA,
    MP,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::AE,
        Objective::MR,
        Objective::A,
        Objective::P,
        Objective::MA,
        Objective::MP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::AE => "AE",
            Objective::MR => "MR",
            Objective::A => "A",
            Objective::P => "P",
            Objective::MA => "MA",
            Objective::MP => "MP",
        }
    }

    /// Decoded from the latents of the corrupted sequence.
    pub fn is_masked(self) -> bool {
        matches!(self, Objective::MR | Objective::MA | Objective::MP)
    }

    pub fn is_spectral(self) -> bool {
        !matches!(self, Objective::AE | Objective::MR)
    }

    pub fn is_phase(self) -> bool {
        matches!(self, Objective::P | Objective::MP)
    }

    /// Values per token in the decoder output.
    pub fn output_width(self, patch_len: usize) -> usize {
        if self.is_spectral() {
            patch_len / 2 + 1
        } else {
            patch_len
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Objective>", into = "Vec<Objective>")]
pub struct ObjectiveSet(BTreeSet<Objective>);

impl ObjectiveSet {
    pub fn new(objectives: impl IntoIterator<Item = Objective>) -> Result<Self> {
        let set: BTreeSet<_> = objectives.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("at least one pre-training objective is required".into()));
        }
        Ok(Self(set))
    }

    pub fn all() -> Self {
        Self(Objective::ALL.into_iter().collect())
    }

    pub fn without(&self, o: Objective) -> Result<Self> {
        Self::new(self.0.iter().copied().filter(|&x| x != o))
    }

    pub fn contains(&self, o: Objective) -> bool {
        self.0.contains(&o)
    }

    pub fn iter(&self) -> impl Iterator<Item = Objective> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn needs_mask(&self) -> bool {
        self.iter().any(Objective::is_masked)
    }
}

impl Default for ObjectiveSet {
    fn default() -> Self {
        Self::all()
    }
}

impl TryFrom<Vec<Objective>> for ObjectiveSet {
    type Error = Error;

    fn try_from(v: Vec<Objective>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ObjectiveSet> for Vec<Objective> {
    fn from(s: ObjectiveSet) -> Self {
        s.0.into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<Objective, f64>", into = "BTreeMap<Objective, f64>")]
pub struct LossWeights(BTreeMap<Objective, f64>);

impl LossWeights {
    pub fn get(&self, o: Objective) -> f64 {
        self.0[&o]
    }

    pub fn set(&mut self, o: Objective, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("loss weight for {o} must be finite and ≥ 0")));
        }
        self.0.insert(o, lambda);
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self(
            Objective::ALL
                .into_iter()
                .map(|o| {
                    (
                        o,
                        if matches!(o, Objective::AE | Objective::MR) {
                            2.0
                        } else {
                            1.0
                        },
                    )
                })
                .collect(),
        )
    }
}

impl TryFrom<BTreeMap<Objective, f64>> for LossWeights {
    type Error = Error;

    /// Missing objectives keep their default weight.
    fn try_from(m: BTreeMap<Objective, f64>) -> Result<Self> {
        let mut w = LossWeights::default();
        for (o, l) in m {
            w.set(o, l)?;
        }
        Ok(w)
    }
}

impl From<LossWeights> for BTreeMap<Objective, f64> {
    fn from(w: LossWeights) -> Self {
        w.0
    }
}

/// Per-patch amplitude and phase spectra, bands × channels × patches × (w/2+1).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTarget {
    pub amplitude: Array4<f64>,
    pub phase: Array4<f64>,
}

/// Real-input DFT of every row: `(amplitude, phase)` over bins `0..=w/2`.
pub fn spectra(rows: &Mat) -> (Mat, Mat) {
    let w = rows.ncols();
    let bins = w / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(w);
    let mut amp = Mat::zeros((rows.nrows(), bins));
    let mut phase = Mat::zeros((rows.nrows(), bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); w];
    for (r, row) in rows.rows().into_iter().enumerate() {
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let a = buf[k].norm();
            amp[[r, k]] = a;
            phase[[r, k]] = if a < PHASE_AMPLITUDE_FLOOR {
                0.0
            } else {
                let p = buf[k].im.atan2(buf[k].re);
                if p <= -std::f64::consts::PI {
                    std::f64::consts::PI
                } else {
                    p
                }
            };
        }
    }
    (amp, phase)
}

pub fn fft_targets(grid: &PatchGrid) -> Result<SpectralTarget> {
    let w = grid.patch_len();
    if w == 0 || !w.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("patch length must be even, got {w}")));
    }
    let index = grid.index();
    let (amp, phase) = spectra(&grid.token_matrix());
    let shape = (index.bands, index.channels, index.patches, w / 2 + 1);
    let reshape = |m: Mat| Array4::from_shape_vec(shape, m.into_iter().collect()).expect("spectral shape");
    Ok(SpectralTarget {
        amplitude: reshape(amp),
        phase: reshape(phase),
    })
}

/// Target of one objective for one window, in token order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTarget {
    pub value: Mat,
    /// Per-element loss weights; `None` weighs every element equally.
    pub weights: Option<Mat>,
}

/// Targets for every enabled objective. Time-domain targets are the clean
/// token matrix; spectral targets are its patch spectra. `mask` restricts
/// the MR loss when `mr_masked_only` is set.
pub fn objective_targets(
    tokens: &Mat,
    objectives: &ObjectiveSet,
    mask: Option<&[bool]>,
    mr_masked_only: bool,
) -> Result<BTreeMap<Objective, TaskTarget>> {
    if objectives.needs_mask() && mask.is_none() {
        return Err(Error::Config("masked objectives need a token mask".into()));
    }
    let spectral = objectives.iter().any(Objective::is_spectral).then(|| spectra(tokens));
    let mut out = BTreeMap::new();
    for o in objectives.iter() {
        let target = match o {
            Objective::AE => TaskTarget {
                value: tokens.clone(),
                weights: None,
            },
            Objective::MR => TaskTarget {
                value: tokens.clone(),
                weights: match (mr_masked_only, mask) {
                    (true, Some(m)) => {
                        let mut w = Mat::zeros(tokens.dim());
                        for (mut row, &hit) in w.rows_mut().into_iter().zip(m) {
                            if hit {
                                row.fill(1.0);
                            }
                        }
                        Some(w)
                    }
                    _ => None,
                },
            },
            Objective::A | Objective::MA => TaskTarget {
                value: spectral.as_ref().expect("spectra computed").0.clone(),
                weights: None,
            },
            Objective::P | Objective::MP => {
                let (amp, phase) = spectral.as_ref().expect("spectra computed");
                TaskTarget {
                    value: phase.clone(),
                    weights: Some(amp.mapv(|a| if a < PHASE_AMPLITUDE_FLOOR { 0.0 } else { 1.0 })),
                }
            }
        };
        out.insert(o, target);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_task: BTreeMap<Objective, f64>,
    pub total: f64,
}

/// `Σ λ·MAE` over the objectives present in `recons`; phase tasks use the
/// wrapped angular difference.
pub fn loss_total(
    recons: &BTreeMap<Objective, Mat>,
    targets: &BTreeMap<Objective, TaskTarget>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut per_task = BTreeMap::new();
    let mut total = 0.0;
    for (&o, pred) in recons {
        let t = targets
            .get(&o)
            .ok_or_else(|| Error::Config(format!("no target for objective {o}")))?;
        if pred.dim() != t.value.dim() {
            return Err(Error::Shape(format!(
                "{o} reconstruction is {:?}, target is {:?}",
                pred.dim(),
                t.value.dim()
            )));
        }
        let w = t.weights.as_ref().map(|w| w.view());
        let (value, _) = if o.is_phase() {
            loss::phase_mae(pred.view(), t.value.view(), w)
        } else {
            loss::mae(pred.view(), t.value.view(), w)
        };
        if !value.is_finite() {
            return Err(Error::TrainingDivergence(format!("{o} loss is {value}")));
        }
        per_task.insert(o, value);
        total += weights.get(o) * value;
    }
    Ok(LossBreakdown { per_task, total })
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn forward(&self, tape: &mut Tape, z: Var) -> Var {
        let h = tape.linear(z, self.w1, Some(self.b1));
        let h = tape.gelu(h);
        tape.linear(h, self.w2, Some(self.b2))
    }
}

/// One two-layer decoder per enabled objective, registered under
/// `decoder.<objective>.`.
#[derive(Clone, Debug)]
pub struct Decoders {
    mlps: BTreeMap<Objective, Mlp>,
}

impl Decoders {
    pub fn register(params: &mut ParamSet, objectives: &ObjectiveSet, dim: usize, patch_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mlps = objectives
            .iter()
            .map(|o| {
                let out = o.output_width(patch_len);
                let p = format!("decoder.{}", o.name());
                let mlp = Mlp {
                    w1: params.add(
                        format!("{p}.w1"),
                        normal_mat(&mut rng, dim, DECODER_HIDDEN, 1.0 / (dim as f64).sqrt()),
                        true,
                    ),
                    b1: params.add(format!("{p}.b1"), Mat::zeros((1, DECODER_HIDDEN)), false),
                    w2: params.add(
                        format!("{p}.w2"),
                        normal_mat(&mut rng, DECODER_HIDDEN, out, 1.0 / (DECODER_HIDDEN as f64).sqrt()),
                        true,
                    ),
                    b2: params.add(format!("{p}.b2"), Mat::zeros((1, out)), false),
                };
                (o, mlp)
            })
            .collect();
        Self { mlps }
    }

    pub fn objectives(&self) -> impl Iterator<Item = Objective> + '_ {
        self.mlps.keys().copied()
    }

    fn mlp(&self, o: Objective) -> Result<Mlp> {
        self.mlps
            .get(&o)
            .copied()
            .ok_or_else(|| Error::Config(format!("objective {o} is not enabled")))
    }

    pub fn forward(&self, tape: &mut Tape, z: Var, o: Objective) -> Result<Var> {
        Ok(self.mlp(o)?.forward(tape, z))
    }
}

/// Reconstruction of one objective from a latent sequence.
pub fn decode(z: &LatentSequence, objective: Objective, decoders: &Decoders, params: &ParamSet) -> Result<Mat> {
    let mlp = decoders.mlp(objective)?;
    let mut tape = Tape::new(params);
    let zv = tape.constant(z.latents.clone());
    let out = mlp.forward(&mut tape, zv);
    Ok(tape.value(out).clone())
}

/// Encoder plus per-objective decoders.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub model: PimtModel,
    pub decoders: Decoders,
    pub objectives: ObjectiveSet,
}

impl PretrainModel {
    pub fn new(cfg: ModelConfig, objectives: ObjectiveSet) -> Result<Self> {
        let mut model = PimtModel::new(cfg)?;
        let decoders = Decoders::register(
            &mut model.params,
            &objectives,
            model.cfg.dim(),
            model.cfg.patch_len,
            model.cfg.encoder.seed,
        );
        Ok(Self {
            model,
            decoders,
            objectives,
        })
    }

    /// Record the weighted loss of one window. `input` is what the encoder
    /// sees (possibly noise-augmented); `targets` come from the clean window.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        input: &Mat,
        mask: Option<&[bool]>,
        targets: &BTreeMap<Objective, TaskTarget>,
        weights: &LossWeights,
    ) -> Result<(Var, BTreeMap<Objective, Var>)> {
        self.model.cfg.check_tokens(input)?;
        let x = tape.constant(input.clone());
        let (_, z) = self.model.forward(tape, x, None);
        let z_mask = if self.objectives.needs_mask() {
            let m = mask.ok_or_else(|| Error::Config("masked objectives need a token mask".into()))?;
            Some(self.model.forward(tape, x, Some(m)).1)
        } else {
            None
        };
        let mut terms = Vec::new();
        let mut per_task = BTreeMap::new();
        for o in self.objectives.iter() {
            let src = if o.is_masked() {
                z_mask.expect("mask encoded")
            } else {
                z
            };
            let pred = self.decoders.forward(tape, src, o)?;
            let t = &targets[&o];
            let l = if o.is_phase() {
                tape.phase_mae(pred, &t.value, t.weights.as_ref())
            } else {
                tape.mae(pred, &t.value, t.weights.as_ref())
            };
            terms.push((l, weights.get(o)));
            per_task.insert(o, l);
        }
        Ok((tape.weighted_sum(terms), per_task))
    }

    /// Every enabled reconstruction for one window.
    pub fn reconstruct(&self, tokens: &Mat, mask: Option<&[bool]>) -> Result<BTreeMap<Objective, Mat>> {
        self.model.cfg.check_tokens(tokens)?;
        let mut tape = Tape::new(&self.model.params);
        let x = tape.constant(tokens.clone());
        let (_, z) = self.model.forward(&mut tape, x, None);
        let z_mask = match (self.objectives.needs_mask(), mask) {
            (true, Some(m)) => Some(self.model.forward(&mut tape, x, Some(m)).1),
            (true, None) => return Err(Error::Config("masked objectives need a token mask".into())),
            _ => None,
        };
        let mut out = BTreeMap::new();
        for o in self.objectives.iter() {
            let src = if o.is_masked() {
                z_mask.expect("mask encoded")
            } else {
                z
            };
            let pred = self.decoders.forward(&mut tape, src, o)?;
            out.insert(o, tape.value(pred).clone());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub objectives: ObjectiveSet,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    /// Restrict the MR loss to masked tokens.
    pub mr_masked_only: bool,
    /// Gaussian noise added to the encoder input, relative to each series' std.
    pub noise_sigma_rel: f64,
    pub heldout_fraction: f64,
    /// Fraction of the training split actually used.
    pub data_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objectives: ObjectiveSet::all(),
            weights: LossWeights::default(),
            epochs: 10,
            batch_size: 256,
            lr_max: 0.01,
            lr_min: 0.001,
            weight_decay: 0.01,
            mask_ratio: DEFAULT_MASK_RATIO,
            mask_mode: MaskMode::UniformToken,
            mr_masked_only: false,
            noise_sigma_rel: 0.05,
            heldout_fraction: 0.2,
            data_fraction: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr_max", self.lr_max),
            ("lr_min", self.lr_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("pretrain.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("pretrain.mask_ratio must lie in [0, 1]".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::Config("pretrain.heldout_fraction must lie in (0, 1)".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config("pretrain.data_fraction must lie in (0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0 && self.noise_sigma_rel >= 0.0) {
            return Err(Error::Config(
                "pretrain weight decay and noise level must be ≥ 0".into(),
            ));
        }
        Ok(())
    }

    fn mask_spec(&self, seed: u64) -> MaskSpec {
        MaskSpec {
            ratio: self.mask_ratio,
            mode: self.mask_mode,
            seed,
        }
    }
}

/// Seeded held-out split by window: `(train, heldout)`.
pub fn heldout_split(n: usize, heldout_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::SplitInfeasible(format!(
            "{n} windows cannot be split into train and held-out"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((heldout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let heldout = idx[..k].to_vec();
    let train = idx[k..].to_vec();
    Ok((train, heldout))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveSplit {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: CurveSplit,
    pub loss: LossBreakdown,
}

/// Loss curves as CSV: `epoch,split,<task>...,total`.
pub fn curves_csv(curves: &[CurvePoint], objectives: &ObjectiveSet) -> String {
    let mut out = String::from("epoch,split");
    for o in objectives.iter() {
        out.push(',');
        out.push_str(o.name());
    }
    out.push_str(",total\n");
    for p in curves {
        let split = match p.split {
            CurveSplit::Train => "train",
            CurveSplit::Heldout => "heldout",
        };
        out.push_str(&format!("{},{split}", p.epoch));
        for o in objectives.iter() {
            out.push_str(&format!(",{}", p.loss.per_task.get(&o).copied().unwrap_or(f64::NAN)));
        }
        out.push_str(&format!(",{}\n", p.loss.total));
    }
    out
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub curves: Vec<CurvePoint>,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl PretrainOutcome {
    pub fn final_heldout(&self) -> &LossBreakdown {
        &self
            .curves
            .iter()
            .rev()
            .find(|p| p.split == CurveSplit::Heldout)
            .expect("held-out loss is always evaluated")
            .loss
    }

    pub fn initial_heldout(&self) -> &LossBreakdown {
        &self
            .curves
            .iter()
            .find(|p| p.split == CurveSplit::Heldout)
            .expect("held-out loss is always evaluated")
            .loss
    }
}

/// Mean loss over `idx` with fixed per-window masks and no augmentation.
pub fn evaluate(model: &PretrainModel, data: &WindowSet, idx: &[usize], cfg: &PretrainConfig) -> Result<LossBreakdown> {
    let mut sum: BTreeMap<Objective, f64> = BTreeMap::new();
    let mut total = 0.0;
    let index = model.model.cfg.index;
    for &i in idx {
        let tokens = data.tokens(i, model.model.cfg.patch_len)?;
        let mask = if cfg.objectives.needs_mask() {
            Some(sample_mask(
                index,
                &cfg.mask_spec(derive_seed(cfg.seed, &[u64::MAX, i as u64])),
            )?)
        } else {
            None
        };
        let targets = objective_targets(&tokens, &cfg.objectives, mask.as_deref(), cfg.mr_masked_only)?;
        let recons = model.reconstruct(&tokens, mask.as_deref())?;
        let b = loss_total(&recons, &targets, &cfg.weights)?;
        for (o, v) in b.per_task {
            *sum.entry(o).or_default() += v;
        }
        total += b.total;
    }
    let n = idx.len().max(1) as f64;
    Ok(LossBreakdown {
        per_task: sum.into_iter().map(|(o, v)| (o, v / n)).collect(),
        total: total / n,
    })
}

/// Pre-train on `data` using the seeded held-out split.
pub fn run_pretrain(data: &WindowSet, model_cfg: &ModelConfig, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let (train, heldout) = heldout_split(data.len(), cfg.heldout_fraction, cfg.seed)?;
    run_pretrain_split(data, model_cfg, cfg, train, heldout)
}

/// Pre-train on explicit train and held-out window indices; only the first
/// `data_fraction` of `train` is used.
pub fn run_pretrain_split(
    data: &WindowSet,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    train: Vec<usize>,
    heldout: Vec<usize>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyOutput("pre-training dataset is empty".into()));
    }
    let index = data.token_index(model_cfg.patch_len)?;
    if index != model_cfg.index {
        return Err(Error::Shape(format!(
            "dataset token grid {index:?} differs from model grid {:?}",
            model_cfg.index
        )));
    }
    let n_used = ((cfg.data_fraction * train.len() as f64).round() as usize).clamp(1, train.len().max(1));
    let train: Vec<usize> = train.into_iter().take(n_used).collect();
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::SplitInfeasible(
            "pre-training needs train and held-out windows".into(),
        ));
    }

    let mut model = PretrainModel::new(model_cfg.clone(), cfg.objectives.clone())?;
    let mut curves = vec![
        CurvePoint {
            epoch: 0,
            split: CurveSplit::Train,
            loss: evaluate(&model, data, &train, cfg)?,
        },
        CurvePoint {
            epoch: 0,
            split: CurveSplit::Heldout,
            loss: evaluate(&model, data, &heldout, cfg)?,
        },
    ];

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        total_steps: steps_per_epoch * cfg.epochs,
    };
    let mut opt = AdamW::new(model.model.params.len(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let mut order = train.clone();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<Objective, f64> = BTreeMap::new();
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = schedule.lr(step);
            let mut params = std::mem::take(&mut model.model.params);
            let frozen = &model;
            let result = train_step(&mut params, &mut opt, lr, batch, |tape, i| {
                let sample_seed = derive_seed(cfg.seed, &[epoch as u64, i as u64]);
                let clean = data.tokens(i, model_cfg.patch_len)?;
                let input = if cfg.noise_sigma_rel > 0.0 {
                    let stack = BandStack {
                        data: data.windows[i].clone(),
                        fs: data.fs,
                        bank: data.bank.clone(),
                    };
                    let noisy = augment_noise(&stack, cfg.noise_sigma_rel, derive_seed(sample_seed, &[0]))?;
                    crate::tokenization::window_tokens(&noisy.data, model_cfg.patch_len)?
                } else {
                    clean.clone()
                };
                let mask = if cfg.objectives.needs_mask() {
                    Some(sample_mask(index, &cfg.mask_spec(derive_seed(sample_seed, &[1])))?)
                } else {
                    None
                };
                let targets = objective_targets(&clean, &cfg.objectives, mask.as_deref(), cfg.mr_masked_only)?;
                let (loss, per_task) = frozen.record_loss(tape, &input, mask.as_deref(), &targets, &cfg.weights)?;
                for (o, v) in per_task {
                    *sums.entry(o).or_default() += tape.scalar(v);
                }
                Ok(loss)
            });
            model.model.params = params;
            total += result? * batch.len() as f64;
            step += 1;
        }
        let n = order.len() as f64;
        curves.push(CurvePoint {
            epoch,
            split: CurveSplit::Train,
            loss: LossBreakdown {
                per_task: sums.into_iter().map(|(o, v)| (o, v / n)).collect(),
                total: total / n,
            },
        });
        curves.push(CurvePoint {
            epoch,
            split: CurveSplit::Heldout,
            loss: evaluate(&model, data, &heldout, cfg)?,
        });
    }
    Ok(PretrainOutcome {
        model,
        curves,
        train,
        heldout,
    })
}
