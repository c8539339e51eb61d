//! Band saliency and the ablation and scaling studies.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_splits, Split, SplitSpec};
use crate::dataset::{LabeledWindows, RawDataset, TaskKind, WindowSet};
use crate::error::{Error, Result};
use crate::heads::{run_finetune_seeds, FinetuneConfig, FinetuneModel, SeedSummary};
use crate::model::ModelConfig;
use crate::nn::{Mat, Tape};
use crate::pretrain::{
    heldout_split, run_pretrain_split, CurvePoint, LossBreakdown, Objective, ObjectiveSet, PretrainConfig,
};
use crate::sigproc::{default_filter_bank, BandDefinition, FilterBank, PreprocessConfig};

/// Normalized attribution per band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub band_mass: Vec<f64>,
    /// Unnormalized attribution per token, bands × channels × patches.
    #[serde(skip)]
    pub attribution: Option<Array3<f64>>,
}

impl SaliencyMap {
    pub fn uniform(bands: usize) -> Self {
        Self {
            band_mass: vec![1.0 / bands as f64; bands],
            attribution: None,
        }
    }

    /// Mean of several maps; stays normalized.
    pub fn mean(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::UndefinedMetric("no saliency maps to average".into()))?;
        let mut mass = vec![0.0; first.band_mass.len()];
        for m in maps {
            for (a, b) in mass.iter_mut().zip(&m.band_mass) {
                *a += b / maps.len() as f64;
            }
        }
        Ok(SaliencyMap {
            band_mass: mass,
            attribution: None,
        })
    }
}

/// Gradient × input on token embeddings: `|∂s/∂e|·|e|` summed over the
/// embedding dimension, averaged over channels and patches, normalized
/// over bands. `s` is the predicted-class logit minus the mean logit, or the squared norm of the
/// regression output. Degenerate attributions give the uniform map.
pub fn saliency(model: &FinetuneModel, tokens: &Mat) -> Result<SaliencyMap> {
    let index = model.model.cfg.index;
    model.model.cfg.check_tokens(tokens)?;
    let embeddings = {
        let mut tape = Tape::new(&model.model.params);
        let x = tape.constant(tokens.clone());
        let e = model.model.tokenizer.forward(&mut tape, x, None);
        tape.value(e).clone()
    };
    let mut tape = Tape::new(&model.model.params);
    let e = tape.input(embeddings.clone());
    let out = model.record_output_from_embeddings(&mut tape, e);
    let out_value = tape.value(out).row(0).to_owned();
    let score = match model.head.kind {
        TaskKind::Classification => {
            // Softmax ignores a shift shared by all logits, so attribute
            // the predicted logit relative to the mean logit.
            let k = crate::heads::argmax(&out_value);
            let n = out_value.len() as f64;
            let mut selector = Mat::from_elem((out_value.len(), 1), -1.0 / n);
            selector[[k, 0]] += 1.0;
            let sel = tape.constant(selector);
            tape.matmul(out, sel)
        }
        TaskKind::Gaze => {
            let zeros = Mat::zeros((1, out_value.len()));
            tape.mse(out, &zeros)
        }
    };
    let grads = tape.backward(score);
    let Some(g) = grads.of(e) else {
        return Ok(SaliencyMap::uniform(index.bands));
    };
    let per_token: Vec<f64> = g
        .rows()
        .into_iter()
        .zip(embeddings.rows())
        .map(|(gr, er)| gr.iter().zip(er).map(|(a, b)| a.abs() * b.abs()).sum())
        .collect();
    let attribution = Array3::from_shape_vec((index.bands, index.channels, index.patches), per_token)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let per_band: Vec<f64> = attribution
        .outer_iter()
        .map(|b| b.sum() / (index.channels * index.patches) as f64)
        .collect();
    let total: f64 = per_band.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Ok(SaliencyMap {
            attribution: Some(attribution),
            ..SaliencyMap::uniform(index.bands)
        });
    }
    Ok(SaliencyMap {
        band_mass: per_band.iter().map(|v| v / total).collect(),
        attribution: Some(attribution),
    })
}

/// Saliency CSV: `band,mass`.
pub fn saliency_csv(map: &SaliencyMap, bank: &FilterBank) -> String {
    let mut out = String::from("band,mass\n");
    for (b, m) in bank.bands.iter().zip(&map.band_mass) {
        out.push_str(&format!("{},{m}\n", b.name));
    }
    out
}

/// Horizontal bar chart of band masses.
pub fn saliency_svg(map: &SaliencyMap, bank: &FilterBank) -> String {
    let row_h = 22.0;
    let width = 420.0;
    let label_w = 110.0;
    let max = map.band_mass.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let height = row_h * map.band_mass.len() as f64 + 10.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    for (i, (b, m)) in bank.bands.iter().zip(&map.band_mass).enumerate() {
        let y = 5.0 + i as f64 * row_h;
        let w = (width - label_w - 60.0) * m / max;
        svg.push_str(&format!(
            "<text x=\"4\" y=\"{}\">{}</text><rect x=\"{label_w}\" y=\"{y}\" width=\"{w:.2}\" height=\"{}\" fill=\"#4a7ab5\"/><text x=\"{:.2}\" y=\"{}\">{m:.3}</text>\n",
            y + 14.0,
            b.name,
            row_h - 6.0,
            label_w + w + 4.0,
            y + 14.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPreset {
    pub name: String,
    pub bands: Vec<BandDefinition>,
}

impl BandPreset {
    pub fn bank(&self) -> FilterBank {
        FilterBank {
            bands: self.bands.clone(),
        }
    }

    pub fn by_name(name: &str) -> Result<BandPreset> {
        band_presets()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("unknown band preset {name}")))
    }
}

/// The 1-, 2-, 4- and 12-band presets.
pub fn band_presets() -> Vec<BandPreset> {
    let preset = |name: &str, edges: &[(f64, f64)]| BandPreset {
        name: name.into(),
        bands: edges
            .iter()
            .map(|&(lo, hi)| BandDefinition::new(format!("{lo}-{hi}Hz"), lo, hi))
            .collect(),
    };
    vec![
        preset("1-band", &[(0.1, 75.0)]),
        preset("2-band", &[(0.1, 15.0), (15.0, 75.0)]),
        preset("4-band", &[(0.1, 5.0), (5.0, 15.0), (15.0, 35.0), (35.0, 75.0)]),
        BandPreset {
            name: "12-band".into(),
            bands: default_filter_bank().bands,
        },
    ]
}

/// Shared settings of the downstream comparisons.
#[derive(Clone, Debug)]
pub struct StudySettings<'a> {
    pub preprocess: &'a PreprocessConfig,
    /// Template; the token grid is replaced to fit each variant.
    pub model: &'a ModelConfig,
    pub finetune: &'a FinetuneConfig,
    pub split: &'a SplitSpec,
}

impl StudySettings<'_> {
    fn model_for(&self, data: &WindowSet, patch_len: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            index: data.token_index(patch_len)?,
            patch_len,
            encoder: self.model.encoder.clone(),
        })
    }

    fn downstream(
        &self,
        pretrained: Option<&crate::nn::ParamSet>,
        cfg: &ModelConfig,
        task: &LabeledWindows,
    ) -> Result<(SeedSummary, Split)> {
        let split = make_splits(&task.windows.meta, self.split)?;
        let (summary, _) = run_finetune_seeds(
            pretrained,
            cfg,
            task,
            task.labels.kind(),
            &split.train,
            &split.test,
            self.finetune,
        )?;
        Ok((summary, split))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandAblationRow {
    pub preset: String,
    pub bands: usize,
    pub tokens: usize,
    pub summary: SeedSummary,
}

/// One supervised model per preset, trained from scratch under identical
/// seeds and settings.
pub fn ablate_bands(presets: &[BandPreset], task: &RawDataset, s: &StudySettings) -> Result<Vec<BandAblationRow>> {
    presets
        .iter()
        .map(|p| {
            let data = task.labeled_windows(s.preprocess, &p.bank())?;
            let cfg = s.model_for(&data.windows, s.model.patch_len)?;
            let (summary, _) = s.downstream(None, &cfg, &data)?;
            Ok(BandAblationRow {
                preset: p.name.clone(),
                bands: cfg.index.bands,
                tokens: cfg.index.len(),
                summary,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveAblationRow {
    pub name: String,
    pub omitted: Option<Objective>,
    pub reference: bool,
    pub heldout: LossBreakdown,
    pub downstream: SeedSummary,
}

/// Full objective set plus every leave-one-out variant; each pre-trains on
/// the same split and is fine-tuned on `task`.
pub fn ablate_objectives(
    corpus: &WindowSet,
    task: &LabeledWindows,
    pretrain: &PretrainConfig,
    s: &StudySettings,
) -> Result<Vec<ObjectiveAblationRow>> {
    let cfg = s.model_for(corpus, s.model.patch_len)?;
    let (train, heldout) = heldout_split(corpus.len(), pretrain.heldout_fraction, pretrain.seed)?;
    let full = ObjectiveSet::all();
    let variants = std::iter::once(None).chain(Objective::ALL.into_iter().map(Some));
    variants
        .map(|omitted| {
            let objectives = match omitted {
                Some(o) => full.without(o)?,
                None => full.clone(),
            };
            let pcfg = PretrainConfig {
                objectives,
                ..pretrain.clone()
            };
            let out = run_pretrain_split(corpus, &cfg, &pcfg, train.clone(), heldout.clone())?;
            let (downstream, _) = s.downstream(Some(&out.model.model.params), &cfg, task)?;
            Ok(ObjectiveAblationRow {
                name: omitted.map_or("full".to_string(), |o| format!("-{o}")),
                omitted,
                reference: omitted.is_none(),
                heldout: out.final_heldout().clone(),
                downstream,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub fraction: f64,
    pub train_windows: usize,
    pub curves: Vec<CurvePoint>,
    pub final_heldout: f64,
    pub downstream: Option<SeedSummary>,
}

/// One pre-training run per fraction of the training split, all scored on
/// the same held-out windows. Training subsets are nested prefixes of one
/// seeded permutation.
pub fn scale_study(
    corpus: &WindowSet,
    fractions: &[f64],
    task: Option<&LabeledWindows>,
    pretrain: &PretrainConfig,
    s: &StudySettings,
) -> Result<Vec<ScaleRow>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config("scale fractions must lie in (0, 1]".into()));
    }
    let cfg = s.model_for(corpus, s.model.patch_len)?;
    let (train, heldout) = heldout_split(corpus.len(), pretrain.heldout_fraction, pretrain.seed)?;
    fractions
        .iter()
        .map(|&fraction| {
            let pcfg = PretrainConfig {
                data_fraction: fraction,
                ..pretrain.clone()
            };
            let out = run_pretrain_split(corpus, &cfg, &pcfg, train.clone(), heldout.clone())?;
            let downstream = match task {
                Some(t) => Some(s.downstream(Some(&out.model.model.params), &cfg, t)?.0),
                None => None,
            };
            Ok(ScaleRow {
                fraction,
                train_windows: out.train.len(),
                final_heldout: out.final_heldout().total,
                curves: out.curves,
                downstream,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRow {
    pub size_s: f64,
    pub patch_len: usize,
    pub patches: usize,
    pub summary: SeedSummary,
}

pub const PATCH_SIZES_S: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

/// Supervised model per patch duration, trained from scratch.
pub fn ablate_patch(sizes_s: &[f64], task: &RawDataset, bank: &FilterBank, s: &StudySettings) -> Result<Vec<PatchRow>> {
    let data = task.labeled_windows(s.preprocess, bank)?;
    sizes_s
        .iter()
        .map(|&size| {
            let patch = size * data.windows.fs;
            if (patch - patch.round()).abs() > 1e-9 || patch < 1.0 {
                return Err(Error::InvalidPatchSize {
                    len: data.windows.windows[0].dim().2,
                    patch: patch as usize,
                });
            }
            let cfg = s.model_for(&data.windows, patch.round() as usize)?;
            let (summary, _) = s.downstream(None, &cfg, &data)?;
            Ok(PatchRow {
                size_s: size,
                patch_len: cfg.patch_len,
                patches: cfg.index.patches,
                summary,
            })
        })
        .collect()
}

fn summary_cells(s: &SeedSummary) -> String {
    format!("{},{}", s.mean, s.std)
}

pub fn band_table_csv(rows: &[BandAblationRow]) -> String {
    let mut out = String::from("preset,bands,tokens,mean,std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.preset,
            r.bands,
            r.tokens,
            summary_cells(&r.summary)
        ));
    }
    out
}

pub fn objective_table_csv(rows: &[ObjectiveAblationRow]) -> String {
    let mut out = String::from("variant,reference");
    for o in Objective::ALL {
        out.push_str(&format!(",{o}"));
    }
    out.push_str(",heldout_total,mean,std\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.name, r.reference));
        for o in Objective::ALL {
            match r.heldout.per_task.get(&o) {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push_str(&format!(",{},{}\n", r.heldout.total, summary_cells(&r.downstream)));
    }
    out
}

pub fn scale_table_csv(rows: &[ScaleRow]) -> String {
    let mut out = String::from("fraction,train_windows,final_heldout,mean,std\n");
    for r in rows {
        let cells = r.downstream.as_ref().map_or(",".to_string(), summary_cells);
        out.push_str(&format!(
            "{},{},{},{cells}\n",
            r.fraction, r.train_windows, r.final_heldout
        ));
    }
    out
}

pub fn patch_table_csv(rows: &[PatchRow]) -> String {
    let mut out = String::from("size_s,patch_len,patches,mean,std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.size_s,
            r.patch_len,
            r.patches,
            summary_cells(&r.summary)
        ));
    }
    out
}
