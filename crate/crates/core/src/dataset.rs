//! Windowed, band-decomposed datasets built from recordings.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::sigproc::{decompose, preprocess, window, FilterBank, PreprocessConfig, Recording};
use crate::tokenization::{window_tokens, TokenIndex};

/// Where a window came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub subject_id: String,
    pub session_id: String,
    pub recording: usize,
    /// Position of the window within its recording.
    pub offset: usize,
}

/// Band-decomposed windows, each bands × channels × samples.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Array3<f64>>,
    pub meta: Vec<WindowMeta>,
    pub fs: f64,
    pub bank: FilterBank,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn token_index(&self, patch_len: usize) -> Result<TokenIndex> {
        let w = self
            .windows
            .first()
            .ok_or_else(|| Error::EmptyOutput("window set is empty".into()))?;
        let (f, c, t) = w.dim();
        if patch_len == 0 || t % patch_len != 0 {
            return Err(Error::InvalidPatchSize {
                len: t,
                patch: patch_len,
            });
        }
        Ok(TokenIndex::new(f, c, t / patch_len))
    }

    pub fn tokens(&self, i: usize, patch_len: usize) -> Result<Mat> {
        window_tokens(&self.windows[i], patch_len)
    }

    pub fn subset(&self, idx: &[usize]) -> WindowSet {
        WindowSet {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            meta: idx.iter().map(|&i| self.meta[i].clone()).collect(),
            fs: self.fs,
            bank: self.bank.clone(),
        }
    }
}

/// Per-window supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Class(usize),
    /// Horizontal and vertical angle in degrees.
    Gaze([f64; 2]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    Gaze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Classes { values: Vec<usize>, n_classes: usize },
    Gaze(Vec<[f64; 2]>),
}

impl Labels {
    pub fn from_values(values: &[LabelValue], kind: TaskKind, n_classes: usize) -> Result<Labels> {
        match kind {
            TaskKind::Classification => {
                let values = values
                    .iter()
                    .map(|v| match v {
                        LabelValue::Class(k) if *k < n_classes => Ok(*k),
                        other => Err(Error::Config(format!(
                            "label {other:?} is not a class below {n_classes}"
                        ))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if n_classes < 2 {
                    return Err(Error::Config("classification needs at least two classes".into()));
                }
                Ok(Labels::Classes { values, n_classes })
            }
            TaskKind::Gaze => values
                .iter()
                .map(|v| match v {
                    LabelValue::Gaze(a) => Ok(*a),
                    other => Err(Error::Config(format!("label {other:?} is not a gaze angle"))),
                })
                .collect::<Result<Vec<_>>>()
                .map(Labels::Gaze),
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Labels::Classes { .. } => TaskKind::Classification,
            Labels::Gaze(_) => TaskKind::Gaze,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { values, .. } => values.len(),
            Labels::Gaze(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes { values, n_classes } => Labels::Classes {
                values: idx.iter().map(|&i| values[i]).collect(),
                n_classes: *n_classes,
            },
            Labels::Gaze(v) => Labels::Gaze(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindows {
    pub windows: WindowSet,
    pub labels: Labels,
}

impl LabeledWindows {
    pub fn new(windows: WindowSet, labels: Labels) -> Result<Self> {
        if windows.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} windows but {} labels",
                windows.len(),
                labels.len()
            )));
        }
        Ok(Self { windows, labels })
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledWindows {
        LabeledWindows {
            windows: self.windows.subset(idx),
            labels: self.labels.subset(idx),
        }
    }
}

/// Preprocess, decompose and window every recording.
pub fn windows_from_recordings(
    recordings: &[Recording],
    pre: &PreprocessConfig,
    bank: &FilterBank,
    win_s: f64,
) -> Result<WindowSet> {
    let mut set = WindowSet {
        windows: Vec::new(),
        meta: Vec::new(),
        fs: pre.target_fs,
        bank: bank.realize(pre.target_fs)?,
    };
    for (r, rec) in recordings.iter().enumerate() {
        let clean = preprocess(rec, pre)?;
        let stack = decompose(&clean, bank)?;
        for (offset, w) in window(&stack, win_s)?.into_iter().enumerate() {
            set.windows.push(w.data);
            set.meta.push(WindowMeta {
                subject_id: rec.subject_id.clone(),
                session_id: rec.session_id.clone(),
                recording: r,
                offset,
            });
        }
    }
    if set.is_empty() {
        return Err(Error::EmptyOutput("no windows produced".into()));
    }
    Ok(set)
}

/// Recordings with optional per-window labels, before any processing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub recordings: Vec<Recording>,
    /// One label list per recording; empty when unlabeled.
    pub labels: Vec<Vec<LabelValue>>,
    pub task: Option<TaskKind>,
    pub n_classes: usize,
    pub window_s: f64,
}

impl RawDataset {
    /// Preprocess, decompose with `bank` and window. Labels are returned
    /// for task datasets; each recording must carry one label per window.
    pub fn windows(&self, pre: &PreprocessConfig, bank: &FilterBank) -> Result<(WindowSet, Option<Labels>)> {
        let set = windows_from_recordings(&self.recordings, pre, bank, self.window_s)?;
        let Some(kind) = self.task else {
            return Ok((set, None));
        };
        let mut values = Vec::with_capacity(set.len());
        for (r, labels) in self.labels.iter().enumerate() {
            let count = set.meta.iter().filter(|m| m.recording == r).count();
            if labels.len() != count {
                return Err(Error::Config(format!(
                    "recording {r} has {} labels for {count} windows",
                    labels.len()
                )));
            }
            values.extend(labels.iter().cloned());
        }
        Ok((set, Some(Labels::from_values(&values, kind, self.n_classes)?)))
    }

    pub fn labeled_windows(&self, pre: &PreprocessConfig, bank: &FilterBank) -> Result<LabeledWindows> {
        match self.windows(pre, bank)? {
            (set, Some(labels)) => LabeledWindows::new(set, labels),
            _ => Err(Error::Config("dataset has no task labels".into())),
        }
    }
}
