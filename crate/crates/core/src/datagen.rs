//! Synthetic ExG with known band-localized structure, dataset manifests
//! and train/test splits.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelValue, RawDataset, TaskKind, WindowMeta};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::sigproc::container::{read_recording, write_atomic, write_recording};
use crate::sigproc::{default_filter_bank, window_samples, Recording, DEFAULT_FS};

/// Background standard deviation of each default band, in canonical order.
pub const BAND_BASE_STD: [f64; 12] = [1.0, 0.7, 0.6, 0.4, 0.2, 0.3, 0.2, 0.1, 0.8, 0.5, 0.5, 0.3];
pub const DEFAULT_NOISE_FLOOR: f64 = 0.1;
pub const BURST_GAIN: f64 = 5.0;
pub const BURST_DURATION_S: (f64, f64) = (0.1, 0.3);
/// Expected bursts per second per channel in free-living data.
pub const BURST_RATE_HZ: f64 = 0.05;
pub const DEFAULT_WINDOW_S: f64 = 4.0;

/// Unit-variance Gaussian noise whose spectrum is flat on `[lo, hi]` Hz and
/// zero elsewhere; bins listed in `exclude` are also zeroed. Returns zeros
/// when no DFT bin falls in the band.
fn band_limited(n: usize, fs: f64, lo: f64, hi: f64, exclude: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    let df = fs / n as f64;
    let mut any = false;
    for k in 1..n.div_ceil(2) {
        let f = k as f64 * df;
        if f >= lo && f <= hi && !exclude.contains(&k) {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            spec[k] = Complex64::new(re, im);
            spec[n - k] = spec[k].conj();
            any = true;
        }
    }
    if !any {
        return vec![0.0; n];
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    x.iter().map(|v| (v - mean) / std).collect()
}

struct Background<'a> {
    channels: usize,
    samples: usize,
    fs: f64,
    band_std: &'a [f64],
    noise_floor: f64,
    burst_rate_hz: f64,
    exclude_bins: &'a [usize],
    /// Fixed per-channel amplitude gains; drawn afresh when absent.
    gains: Option<&'a [f64]>,
}

fn draw_gains(channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(0.5..1.5)).collect()
}

impl Background<'_> {
    fn generate(&self, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let bank = default_filter_bank().realize(self.fs)?;
        let mut data = Array2::zeros((self.channels, self.samples));
        let gains = match self.gains {
            Some(g) => g.to_vec(),
            None => draw_gains(self.channels, rng),
        };
        for (band, &std) in bank.bands.iter().zip(self.band_std) {
            for (c, &gain) in gains.iter().enumerate() {
                let x = band_limited(self.samples, self.fs, band.lo, band.hi, self.exclude_bins, rng);
                for (d, v) in data.row_mut(c).iter_mut().zip(x) {
                    *d += std * gain * v;
                }
            }
        }
        for mut row in data.rows_mut() {
            let n = row.len() as f64;
            let std = (row.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.noise_floor * z;
            }
            let expected = self.burst_rate_hz * n / self.fs;
            let count = (expected.floor() as usize) + usize::from(rng.random::<f64>() < expected.fract());
            for _ in 0..count {
                let dur = rng.random_range(BURST_DURATION_S.0..BURST_DURATION_S.1);
                let len = ((dur * self.fs) as usize).clamp(2, row.len());
                let start = rng.random_range(0..=row.len() - len);
                for i in 0..len {
                    let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
                    let z: f64 = StandardNormal.sample(rng);
                    row[start + i] += BURST_GAIN * std * hann * z;
                }
            }
        }
        Ok(data)
    }
}

/// Free-living surrogate: one band-limited Gaussian process per default band
/// with random per-channel gains, white noise and occasional bursts.
pub fn synth_freeliving(duration_s: f64, channels: usize, fs: f64, seed: u64) -> Result<Recording> {
    let samples = window_samples(fs, duration_s);
    if channels == 0 || samples < window_samples(fs, DEFAULT_WINDOW_S) {
        return Err(Error::InvalidParameter(format!(
            "need at least one channel and one {DEFAULT_WINDOW_S}-s window (got {channels} channels, {duration_s} s)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Background {
        channels,
        samples,
        fs,
        band_std: &BAND_BASE_STD,
        noise_floor: DEFAULT_NOISE_FLOOR,
        burst_rate_hz: BURST_RATE_HZ,
        exclude_bins: &[],
        gains: None,
    }
    .generate(&mut rng)?;
    let mut rec = Recording::new(data, fs, "synthetic", "0")?;
    rec.channel_names = (0..channels).map(|c| format!("ch{c}")).collect();
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    pub label: String,
    /// Index into the default filter bank.
    pub band: usize,
    /// Power multiplier applied to the band.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GazeSpec {
    pub channels: [usize; 2],
    pub freqs_hz: [f64; 2],
    /// Sinusoid amplitude per degree of angle.
    pub gain_per_deg: f64,
    pub range_deg: f64,
}

impl Default for GazeSpec {
    fn default() -> Self {
        Self {
            channels: [0, 1],
            freqs_hz: [0.5, 0.75],
            gain_per_deg: 0.05,
            range_deg: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub classes: Vec<ClassSignature>,
    pub noise_floor: f64,
    pub channels: usize,
    pub fs: f64,
    pub window_s: f64,
    pub gaze: GazeSpec,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classification,
            classes: vec![
                ClassSignature {
                    label: "alpha".into(),
                    band: 2,
                    ratio: 4.0,
                },
                ClassSignature {
                    label: "beta".into(),
                    band: 3,
                    ratio: 4.0,
                },
            ],
            noise_floor: DEFAULT_NOISE_FLOOR,
            channels: 4,
            fs: DEFAULT_FS,
            window_s: DEFAULT_WINDOW_S,
            gaze: GazeSpec::default(),
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let n_bands = default_filter_bank().len();
        if self.channels == 0 || !(self.fs > 0.0) || window_samples(self.fs, self.window_s) == 0 {
            return Err(Error::Config(
                "task needs channels, a sampling rate and a window length".into(),
            ));
        }
        if !(self.noise_floor >= 0.0) {
            return Err(Error::Config("noise floor must be ≥ 0".into()));
        }
        match self.kind {
            TaskKind::Classification => {
                if self.classes.len() < 2 {
                    return Err(Error::Config("classification task needs at least two classes".into()));
                }
                for c in &self.classes {
                    if c.band >= n_bands {
                        return Err(Error::Config(format!(
                            "class {} uses band {} but the bank has {n_bands} bands",
                            c.label, c.band
                        )));
                    }
                    if !(c.ratio >= 1.0) {
                        return Err(Error::Config(format!(
                            "class {} has power ratio {} < 1",
                            c.label, c.ratio
                        )));
                    }
                }
            }
            TaskKind::Gaze => {
                let g = &self.gaze;
                if g.channels.iter().any(|&c| c >= self.channels) || g.channels[0] == g.channels[1] {
                    return Err(Error::Config(
                        "gaze channels must be two distinct valid channels".into(),
                    ));
                }
                if g.freqs_hz.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
                    return Err(Error::Config("gaze components must lie below 1 Hz".into()));
                }
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.classes.len(),
            TaskKind::Gaze => 0,
        }
    }
}

/// One labeled raw window, channels × samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWindow {
    pub data: Array2<f64>,
    pub label: LabelValue,
}

/// Labeled windows sharing one set of channel gains. Classification labels
/// are balanced (`i mod K` before shuffling); class `k` multiplies the power
/// of its signature band by its ratio. Gaze windows carry the two angles as the signed amplitudes of
/// slow sinusoids on the designated channels, whose DFT bins are left out
/// of the background.
pub fn synth_task(spec: &SyntheticTaskSpec, n_windows: usize, seed: u64) -> Result<Vec<TaskWindow>> {
    spec.validate()?;
    let k = spec.n_classes().max(1);
    if n_windows < 2 * k {
        return Err(Error::InvalidParameter(format!(
            "need at least {} windows, got {n_windows}",
            2 * k
        )));
    }
    let samples = window_samples(spec.fs, spec.window_s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n_windows).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    // Electrode gains belong to the recording, not to individual windows.
    let gains = draw_gains(spec.channels, &mut rng);
    let gaze_bins: Vec<usize> = spec
        .gaze
        .freqs_hz
        .iter()
        .map(|f| (f * samples as f64 / spec.fs).round() as usize)
        .collect();
    labels
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let mut wrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            let mut band_std = BAND_BASE_STD;
            let exclude: &[usize] = match spec.kind {
                TaskKind::Classification => {
                    let sig = &spec.classes[class];
                    band_std[sig.band] *= sig.ratio.sqrt();
                    &[]
                }
                TaskKind::Gaze => &gaze_bins,
            };
            let mut data = Background {
                channels: spec.channels,
                samples,
                fs: spec.fs,
                band_std: &band_std,
                noise_floor: spec.noise_floor,
                burst_rate_hz: 0.0,
                exclude_bins: exclude,
                gains: Some(&gains),
            }
            .generate(&mut wrng)?;
            let label = match spec.kind {
                TaskKind::Classification => LabelValue::Class(class),
                TaskKind::Gaze => {
                    let r = spec.gaze.range_deg;
                    let angle = [wrng.random_range(-r..=r), wrng.random_range(-r..=r)];
                    for a in 0..2 {
                        let f = gaze_bins[a] as f64 * spec.fs / samples as f64;
                        let amp = angle[a] * spec.gaze.gain_per_deg;
                        let mut row = data.row_mut(spec.gaze.channels[a]);
                        for (t, v) in row.iter_mut().enumerate() {
                            *v += amp * (2.0 * PI * f * t as f64 / spec.fs).sin();
                        }
                    }
                    LabelValue::Gaze(angle)
                }
            };
            Ok(TaskWindow { data, label })
        })
        .collect()
}

/// Task windows concatenated into one recording per (subject, session).
pub fn synth_task_recordings(
    spec: &SyntheticTaskSpec,
    subjects: usize,
    sessions: usize,
    windows_per_recording: usize,
    seed: u64,
) -> Result<Vec<(Recording, Vec<LabelValue>)>> {
    let mut out = Vec::with_capacity(subjects * sessions);
    for s in 0..subjects {
        for e in 0..sessions {
            let windows = synth_task(spec, windows_per_recording, derive_seed(seed, &[s as u64, e as u64]))?;
            let views: Vec<_> = windows.iter().map(|w| w.data.view()).collect();
            let data = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
            let mut rec = Recording::new(data, spec.fs, subject_name(s), session_name(e))?;
            rec.channel_names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
            out.push((rec, windows.into_iter().map(|w| w.label).collect()));
        }
    }
    Ok(out)
}

pub fn subject_name(i: usize) -> String {
    format!("S{:02}", i + 1)
}

pub fn session_name(i: usize) -> String {
    format!("{}", (b'A' + (i % 26) as u8) as char)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Data file of the recording, relative to the manifest's directory.
    pub path: PathBuf,
    pub subject_id: String,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<LabelValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub window_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let m: DatasetManifest = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &m.entries {
            let p = base.join(&e.path);
            if !p.exists() {
                return Err(Error::NotFound(p));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Read every recording listed in the manifest at `manifest_path`.
    pub fn load(&self, manifest_path: &Path) -> Result<RawDataset> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let recordings = self
            .entries
            .iter()
            .map(|e| {
                let mut r = read_recording(&base.join(&e.path))?;
                r.subject_id = e.subject_id.clone();
                r.session_id = e.session_id.clone();
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RawDataset {
            recordings,
            labels: self.entries.iter().map(|e| e.labels.clone()).collect(),
            task: self.task,
            n_classes: self.class_names.len(),
            window_s: self.window_s,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub sessions: usize,
    pub minutes: f64,
    pub channels: usize,
    pub fs: f64,
    pub task: SyntheticTaskSpec,
    pub task_subjects: usize,
    pub task_sessions: usize,
    pub task_windows_per_recording: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 30,
            sessions: 2,
            minutes: 2.0,
            channels: 4,
            fs: DEFAULT_FS,
            task: SyntheticTaskSpec::default(),
            task_subjects: 5,
            task_sessions: 2,
            task_windows_per_recording: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.sessions == 0 || self.channels == 0 {
            return Err(Error::Config("synth needs subjects, sessions and channels".into()));
        }
        if !(self.minutes * 60.0 >= self.task.window_s) {
            return Err(Error::Config("recordings must hold at least one window".into()));
        }
        self.task.validate()?;
        if self.task_subjects == 0 || self.task_sessions == 0 {
            return Err(Error::Config("task needs subjects and sessions".into()));
        }
        Ok(())
    }
}

pub const PRETRAIN_MANIFEST: &str = "pretrain_manifest.json";
pub const TASK_MANIFEST: &str = "task_manifest.json";

/// Write the free-living corpus and the labeled task under `dir`.
/// Returns the pre-training and task manifest paths.
pub fn synth_dataset(cfg: &SynthConfig, dir: &Path, seed: u64) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let rec_dir = dir.join("recordings");
    let mut entries = Vec::new();
    for s in 0..cfg.subjects {
        for e in 0..cfg.sessions {
            let mut rec = synth_freeliving(
                cfg.minutes * 60.0,
                cfg.channels,
                cfg.fs,
                derive_seed(seed, &[0, s as u64, e as u64]),
            )?;
            rec.subject_id = subject_name(s);
            rec.session_id = session_name(e);
            let stem = format!("free_{}_{}", rec.subject_id, rec.session_id);
            write_recording(&rec_dir, &stem, &rec)?;
            entries.push(ManifestEntry {
                path: PathBuf::from("recordings").join(format!("{stem}.f32")),
                subject_id: rec.subject_id,
                session_id: rec.session_id,
                labels: Vec::new(),
            });
        }
    }
    let pretrain = DatasetManifest {
        window_s: cfg.task.window_s,
        task: None,
        class_names: Vec::new(),
        entries,
    };
    let pretrain_path = dir.join(PRETRAIN_MANIFEST);
    pretrain.write(&pretrain_path)?;

    let task_spec = SyntheticTaskSpec {
        channels: cfg.channels,
        fs: cfg.fs,
        ..cfg.task.clone()
    };
    let mut entries = Vec::new();
    for (rec, labels) in synth_task_recordings(
        &task_spec,
        cfg.task_subjects,
        cfg.task_sessions,
        cfg.task_windows_per_recording,
        derive_seed(seed, &[1]),
    )? {
        let stem = format!("task_{}_{}", rec.subject_id, rec.session_id);
        write_recording(&rec_dir, &stem, &rec)?;
        entries.push(ManifestEntry {
            path: PathBuf::from("recordings").join(format!("{stem}.f32")),
            subject_id: rec.subject_id,
            session_id: rec.session_id,
            labels,
        });
    }
    let task = DatasetManifest {
        window_s: task_spec.window_s,
        task: Some(task_spec.kind),
        class_names: task_spec.classes.iter().map(|c| c.label.clone()).collect(),
        entries,
    };
    let task_path = dir.join(TASK_MANIFEST);
    task.write(&task_path)?;
    Ok((pretrain_path, task_path))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    WithinSession,
    CrossSession,
    CrossSubject,
    /// Leave one subject out; without a target one is drawn from the seed.
    Loso {
        target: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::WithinSession,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Subjects that must not contribute to pre-training.
    pub pretrain_exclude: Vec<String>,
}

impl Split {
    pub fn pretrain_allowed(&self, subject: &str) -> bool {
        !self.pretrain_exclude.iter().any(|s| s == subject)
    }
}

fn held_out_groups<T: Ord + Clone>(groups: &BTreeSet<T>, fraction: f64, rng: &mut ChaCha8Rng) -> BTreeSet<T> {
    let mut all: Vec<T> = groups.iter().cloned().collect();
    all.shuffle(rng);
    let k = ((fraction * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
    all.into_iter().take(k).collect()
}

/// Train/test split of windows at the granularity of `spec.mode`.
pub fn make_splits(windows: &[WindowMeta], spec: &SplitSpec) -> Result<Split> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::Config("split test_fraction must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let subjects: BTreeSet<String> = windows.iter().map(|w| w.subject_id.clone()).collect();
    let by = |pred: &dyn Fn(&WindowMeta) -> bool| -> (Vec<usize>, Vec<usize>) {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..windows.len()).partition(|&i| pred(&windows[i]));
        (train, test)
    };
    let split = match &spec.mode {
        SplitMode::WithinSession => {
            let recordings: BTreeSet<usize> = windows.iter().map(|w| w.recording).collect();
            let mut train = Vec::new();
            let mut test = Vec::new();
            for r in recordings {
                let mut idx: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].recording == r).collect();
                idx.shuffle(&mut rng);
                let n_train = ((1.0 - spec.test_fraction) * idx.len() as f64).round() as usize;
                train.extend_from_slice(&idx[..n_train]);
                test.extend_from_slice(&idx[n_train..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            Split {
                train,
                test,
                pretrain_exclude: Vec::new(),
            }
        }
        SplitMode::CrossSession => {
            let pairs: BTreeSet<(String, String)> = windows
                .iter()
                .map(|w| (w.subject_id.clone(), w.session_id.clone()))
                .collect();
            if pairs.len() < 2 {
                return Err(Error::SplitInfeasible(
                    "cross-session split needs at least two sessions".into(),
                ));
            }
            let held = held_out_groups(&pairs, spec.test_fraction, &mut rng);
            let (train, test) = by(&|w| held.contains(&(w.subject_id.clone(), w.session_id.clone())));
            Split {
                train,
                test,
                pretrain_exclude: Vec::new(),
            }
        }
        SplitMode::CrossSubject => {
            if subjects.len() < 2 {
                return Err(Error::SplitInfeasible(
                    "cross-subject split needs at least two subjects".into(),
                ));
            }
            let held = held_out_groups(&subjects, spec.test_fraction, &mut rng);
            let (train, test) = by(&|w| held.contains(&w.subject_id));
            Split {
                train,
                test,
                pretrain_exclude: Vec::new(),
            }
        }
        SplitMode::Loso { target } => {
            if subjects.len() < 2 {
                return Err(Error::SplitInfeasible("LOSO needs at least two subjects".into()));
            }
            let target = match target {
                Some(t) if subjects.contains(t) => t.clone(),
                Some(t) => return Err(Error::SplitInfeasible(format!("subject {t} is not in the dataset"))),
                None => {
                    let all: Vec<&String> = subjects.iter().collect();
                    all[rng.random_range(0..all.len())].clone()
                }
            };
            let (train, test) = by(&|w| w.subject_id == target);
            Split {
                train,
                test,
                pretrain_exclude: vec![target],
            }
        }
    };
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::SplitInfeasible(format!(
            "split produced {} train and {} test windows",
            split.train.len(),
            split.test.len()
        )));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(subject: usize, session: usize, recording: usize, offset: usize) -> WindowMeta {
        WindowMeta {
            subject_id: subject_name(subject),
            session_id: session_name(session),
            recording,
            offset,
        }
    }

    #[test]
    fn freeliving_shape_and_determinism() {
        let a = synth_freeliving(60.0, 4, 200.0, 3).unwrap();
        assert_eq!(a.data.dim(), (4, 12000));
        assert_eq!(a, synth_freeliving(60.0, 4, 200.0, 3).unwrap());
        assert_ne!(a.data, synth_freeliving(60.0, 4, 200.0, 4).unwrap().data);
        assert!(synth_freeliving(1.0, 4, 200.0, 3).is_err());
    }

    #[test]
    fn task_labels_are_balanced() {
        let spec = SyntheticTaskSpec::default();
        let w = synth_task(&spec, 20, 1).unwrap();
        let ones = w.iter().filter(|w| w.label == LabelValue::Class(1)).count();
        assert_eq!(ones, 10);
        assert_eq!(w[0].data.dim(), (4, 800));
        assert!(synth_task(&spec, 3, 1).is_err());
    }

    #[test]
    fn invalid_band_rejected_before_generation() {
        let mut spec = SyntheticTaskSpec::default();
        spec.classes[0].band = 12;
        assert!(matches!(synth_task(&spec, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn within_session_counts() {
        let windows: Vec<WindowMeta> = (0..100).map(|i| meta(0, 0, 0, i)).collect();
        let s = make_splits(&windows, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
    }

    #[test]
    fn loso_excludes_target() {
        let windows: Vec<WindowMeta> = (0..40).map(|i| meta(i % 4, 0, i % 4, i / 4)).collect();
        let spec = SplitSpec {
            mode: SplitMode::Loso {
                target: Some("S03".into()),
            },
            ..SplitSpec::default()
        };
        let s = make_splits(&windows, &spec).unwrap();
        assert!(s.train.iter().all(|&i| windows[i].subject_id != "S03"));
        assert!(s.test.iter().all(|&i| windows[i].subject_id == "S03"));
        assert!(!s.pretrain_allowed("S03"));
        assert!(s.pretrain_allowed("S01"));
    }

    #[test]
    fn infeasible_splits() {
        let windows: Vec<WindowMeta> = (0..10).map(|i| meta(0, 0, 0, i)).collect();
        for mode in [
            SplitMode::CrossSession,
            SplitMode::CrossSubject,
            SplitMode::Loso { target: None },
        ] {
            let spec = SplitSpec {
                mode,
                ..SplitSpec::default()
            };
            assert!(matches!(make_splits(&windows, &spec), Err(Error::SplitInfeasible(_))));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            subjects: 2,
            sessions: 1,
            minutes: 0.2,
            channels: 2,
            task_subjects: 1,
            task_sessions: 1,
            task_windows_per_recording: 4,
            ..SynthConfig::default()
        };
        let (pre, task) = synth_dataset(&cfg, dir.path(), 0).unwrap();
        let m = DatasetManifest::read(&pre).unwrap();
        assert_eq!(m.entries.len(), 2);
        let t = DatasetManifest::read(&task).unwrap();
        let (set, labels) = t
            .load(&task)
            .unwrap()
            .windows(&crate::sigproc::PreprocessConfig::default(), &default_filter_bank())
            .unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(labels.unwrap().len(), 4);
        assert!(matches!(
            DatasetManifest::read(&dir.path().join("missing.json")),
            Err(Error::NotFound(_))
        ));
    }
}
