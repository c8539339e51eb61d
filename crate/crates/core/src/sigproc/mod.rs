//! Preprocessing of continuous recordings and decomposition into the
//! physiology-informed sub-bands.

pub mod container;
mod filter;

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{Biquad, Sos};

/// Fraction of the sampling rate above which band edges are not trusted.
pub const SAFE_EDGE_FRACTION: f64 = 0.45;
/// Prototype order of every band-pass; the realized filter has twice as many poles.
pub const BANDPASS_PROTOTYPE_ORDER: usize = 2;
pub const DEFAULT_NOTCH_Q: f64 = 30.0;
pub const DEFAULT_FS: f64 = 200.0;
pub const ZSCORE_EPS: f64 = 1e-8;

/// A continuous multichannel recording, `data` is channels × samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub data: Array2<f64>,
    pub fs: f64,
    pub subject_id: String,
    pub session_id: String,
    pub channel_names: Vec<String>,
}

impl Recording {
    pub fn new(
        data: Array2<f64>,
        fs: f64,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidParameter(
                "recording needs at least one channel and one sample".into(),
            ));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sampling rate must be positive, got {fs}"
            )));
        }
        let channel_names = (0..data.nrows()).map(|c| format!("ch{c}")).collect();
        Ok(Self {
            data,
            fs,
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            channel_names,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    fn with_data(&self, data: Array2<f64>, fs: f64) -> Recording {
        Recording {
            data,
            fs,
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            channel_names: self.channel_names.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl BandDefinition {
    pub fn new(name: impl Into<String>, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            lo,
            hi,
        }
    }

    /// The passband actually used at sampling rate `fs`.
    ///
    /// Upper edges above `0.45·fs` are clamped to that limit. A band lying
    /// entirely between the limit and Nyquist keeps its width and slides down
    /// to end at the limit. A band whose lower edge is above the limit while
    /// the band extends past Nyquist has no usable content and is rejected.
    pub fn realize(&self, fs: f64) -> Result<BandDefinition> {
        let limit = SAFE_EDGE_FRACTION * fs;
        if self.hi <= limit {
            return Ok(self.clone());
        }
        if self.lo < limit {
            return Ok(BandDefinition::new(self.name.clone(), self.lo, limit));
        }
        let width = self.hi - self.lo;
        if self.hi <= fs / 2.0 && width < limit {
            return Ok(BandDefinition::new(self.name.clone(), limit - width, limit));
        }
        Err(Error::BandUnrealizable {
            band: self.name.clone(),
            lo: self.lo,
            limit,
            fs,
        })
    }

    pub fn geometric_center(&self) -> f64 {
        (self.lo * self.hi).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub bands: Vec<BandDefinition>,
}

impl FilterBank {
    pub fn new(bands: Vec<BandDefinition>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::InvalidParameter("filter bank needs at least one band".into()));
        }
        for (i, b) in bands.iter().enumerate() {
            if !(b.lo >= 0.0 && b.lo < b.hi) {
                return Err(Error::InvalidParameter(format!(
                    "band {} must satisfy 0 ≤ lo < hi (got {}–{})",
                    b.name, b.lo, b.hi
                )));
            }
            if bands[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::InvalidParameter(format!("duplicate band name {}", b.name)));
            }
        }
        Ok(Self { bands })
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn realize(&self, fs: f64) -> Result<FilterBank> {
        Ok(FilterBank {
            bands: self.bands.iter().map(|b| b.realize(fs)).collect::<Result<_>>()?,
        })
    }

    /// Filters for every band, designed for `fs` after realization.
    pub fn design(&self, fs: f64) -> Result<Vec<Sos>> {
        self.realize(fs)?
            .bands
            .iter()
            .map(|b| Sos::butter_bandpass(BANDPASS_PROTOTYPE_ORDER, b.lo, b.hi, fs))
            .collect()
    }
}

/// The twelve physiology-informed sub-bands (Hz), in canonical order.
pub fn default_filter_bank() -> FilterBank {
    let bands = [
        ("EEG-delta", 0.5, 4.0),
        ("EEG-theta", 4.0, 8.0),
        ("EEG-alpha", 8.0, 13.0),
        ("EEG-beta", 13.0, 30.0),
        ("EEG-gamma", 30.0, 100.0),
        ("EMG-LF", 15.0, 45.0),
        ("EMG-MF", 45.0, 95.0),
        ("EMG-HF", 95.0, 100.0),
        ("EOG", 0.1, 20.0),
        ("ECG-LF", 0.03, 0.12),
        ("ECG-HF", 0.12, 0.488),
        ("QRS", 8.0, 50.0),
    ];
    FilterBank {
        bands: bands
            .iter()
            .map(|&(n, lo, hi)| BandDefinition::new(n, lo, hi))
            .collect(),
    }
}

/// A band-decomposed signal, bands × channels × samples.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStack {
    pub data: Array3<f64>,
    pub fs: f64,
    /// The realized bank that produced `data`.
    pub bank: FilterBank,
}

impl BandStack {
    pub fn bands(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn samples(&self) -> usize {
        self.data.dim().2
    }
}

fn map_rows(data: &Array2<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = data.rows().into_iter().map(|r| f(&r.to_vec())).collect();
    let len = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), len), rows.concat()).expect("rows of equal length")
}

/// Zero-phase second-order notch at `mains_hz` (quality factor 30).
pub fn notch(rec: &Recording, mains_hz: f64) -> Result<Recording> {
    notch_with_q(rec, mains_hz, DEFAULT_NOTCH_Q)
}

pub fn notch_with_q(rec: &Recording, mains_hz: f64, q: f64) -> Result<Recording> {
    let sos = Sos::notch(mains_hz, q, rec.fs)?;
    Ok(rec.with_data(map_rows(&rec.data, |x| sos.filtfilt(x)), rec.fs))
}

/// Fourier-domain resampling. The spectrum is truncated (or zero-padded) to
/// the new length, which band-limits the signal before decimation.
pub fn resample(rec: &Recording, target_fs: f64) -> Result<Recording> {
    if !(target_fs > 0.0 && target_fs.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "target rate must be positive, got {target_fs}"
        )));
    }
    if target_fs == rec.fs {
        return Ok(rec.clone());
    }
    let n_in = rec.samples();
    let n_out = (n_in as f64 * target_fs / rec.fs).round() as usize;
    if n_out == 0 {
        return Err(Error::EmptyOutput(format!(
            "resampling {n_in} samples from {} Hz to {target_fs} Hz leaves nothing",
            rec.fs
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_in);
    let inv = planner.plan_fft_inverse(n_out);
    let data = map_rows(&rec.data, |x| {
        let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fwd.process(&mut spec);
        let mut out = vec![Complex64::new(0.0, 0.0); n_out];
        let n = n_in.min(n_out);
        let half = n.div_ceil(2);
        out[..half].copy_from_slice(&spec[..half]);
        for k in 1..half {
            out[n_out - k] = spec[n_in - k];
        }
        if n.is_multiple_of(2) {
            let k = n / 2;
            if n_out < n_in {
                // fold both signed copies of the new Nyquist bin
                out[k] = spec[k] + spec[n_in - k];
            } else if n_out > n_in {
                out[k] = spec[k] * 0.5;
                out[n_out - k] = spec[k] * 0.5;
            } else {
                out[k] = spec[k];
            }
        }
        inv.process(&mut out);
        let scale = 1.0 / n_in as f64;
        out.iter().map(|c| c.re * scale).collect()
    });
    Ok(rec.with_data(data, target_fs))
}

/// Per-channel z-score over the whole recording. Channels with (near) zero
/// spread map to zeros.
pub fn zscore_normalize(rec: &Recording) -> Recording {
    let mut data = rec.data.clone();
    for mut row in data.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if std < ZSCORE_EPS {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| (v - mean) / std);
        }
    }
    rec.with_data(data, rec.fs)
}

/// Zero-phase band-pass filtering of every channel through every band.
pub fn decompose(rec: &Recording, bank: &FilterBank) -> Result<BandStack> {
    if bank.is_empty() {
        return Err(Error::InvalidParameter("filter bank is empty".into()));
    }
    let realized = bank.realize(rec.fs)?;
    let filters = realized
        .bands
        .iter()
        .map(|b| Sos::butter_bandpass(BANDPASS_PROTOTYPE_ORDER, b.lo, b.hi, rec.fs))
        .collect::<Result<Vec<_>>>()?;
    let (c, t) = rec.data.dim();
    let mut data = Array3::zeros((filters.len(), c, t));
    for (f, sos) in filters.iter().enumerate() {
        for ch in 0..c {
            let x = rec.data.row(ch).to_vec();
            let y = sos.filtfilt(&x);
            data.slice_mut(s![f, ch, ..]).assign(&ndarray::ArrayView1::from(&y));
        }
    }
    Ok(BandStack {
        data,
        fs: rec.fs,
        bank: realized,
    })
}

/// Number of samples in a window of `win_s` seconds at `fs`.
pub fn window_samples(fs: f64, win_s: f64) -> usize {
    (win_s * fs).round() as usize
}

/// Non-overlapping windows of `win_s` seconds; the trailing remainder is dropped.
pub fn window(stack: &BandStack, win_s: f64) -> Result<Vec<BandStack>> {
    let len = window_samples(stack.fs, win_s);
    if len == 0 {
        return Err(Error::InvalidParameter(format!(
            "window of {win_s} s is empty at {} Hz",
            stack.fs
        )));
    }
    let count = stack.samples() / len;
    if count == 0 {
        return Err(Error::EmptyOutput(format!(
            "window of {len} samples is longer than the {}-sample recording",
            stack.samples()
        )));
    }
    Ok((0..count)
        .map(|i| BandStack {
            data: stack.data.slice(s![.., .., i * len..(i + 1) * len]).to_owned(),
            fs: stack.fs,
            bank: stack.bank.clone(),
        })
        .collect())
}

/// Add Gaussian noise whose std is `sigma_rel` times each band-channel
/// series' own std.
pub fn augment_noise(win: &BandStack, sigma_rel: f64, seed: u64) -> Result<BandStack> {
    if !(sigma_rel >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise level must be ≥ 0, got {sigma_rel}"
        )));
    }
    let mut out = win.clone();
    if sigma_rel == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for mut series in out.data.lanes_mut(Axis(2)) {
        let n = series.len() as f64;
        let mean = series.sum() / n;
        let std = (series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let scale = sigma_rel * std;
        for v in series.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += scale * z;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Mains frequencies to notch out; entries at or above Nyquist are skipped.
    pub mains_hz: Vec<f64>,
    pub notch_q: f64,
    pub target_fs: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            mains_hz: vec![50.0, 60.0],
            notch_q: DEFAULT_NOTCH_Q,
            target_fs: DEFAULT_FS,
        }
    }
}

/// Notch, resample, then z-score.
pub fn preprocess(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    let mut out = rec.clone();
    for &f in &cfg.mains_hz {
        if f < out.fs / 2.0 {
            out = notch_with_q(&out, f, cfg.notch_q)?;
        }
    }
    out = resample(&out, cfg.target_fs)?;
    let out = zscore_normalize(&out);
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("recording contains non-finite samples".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::PI;

    fn tone(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn rec_from(x: Vec<f64>, fs: f64) -> Recording {
        let n = x.len();
        Recording::new(Array2::from_shape_vec((1, n), x).unwrap(), fs, "s", "r").unwrap()
    }

    #[test]
    fn default_bank_layout() {
        let bank = default_filter_bank();
        assert_eq!(bank.len(), 12);
        assert_eq!(bank.bands[0], BandDefinition::new("EEG-delta", 0.5, 4.0));
        assert_eq!(bank.bands[11], BandDefinition::new("QRS", 8.0, 50.0));
        assert!(bank.bands.iter().all(|b| b.lo < b.hi));
        assert!(FilterBank::new(bank.bands.clone()).is_ok());
    }

    #[test]
    fn realization_at_200_hz() {
        let r = default_filter_bank().realize(200.0).unwrap();
        assert_eq!((r.bands[4].lo, r.bands[4].hi), (30.0, 90.0));
        assert_eq!((r.bands[6].lo, r.bands[6].hi), (45.0, 90.0));
        assert_eq!((r.bands[7].lo, r.bands[7].hi), (85.0, 90.0));
        assert_eq!(r.bands[0], default_filter_bank().bands[0]);
    }

    #[test]
    fn unrealizable_band_is_named() {
        let err = default_filter_bank().realize(100.0).unwrap_err();
        match err {
            Error::BandUnrealizable { band, .. } => assert_eq!(band, "EMG-MF"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn notch_rejects_nyquist() {
        let r = rec_from(tone(10.0, 200.0, 400), 200.0);
        assert!(matches!(notch(&r, 100.0), Err(Error::InvalidParameter(_))));
        assert!(notch(&r, 150.0).is_err());
    }

    #[test]
    fn notch_zero_in_zero_out() {
        let r = rec_from(vec![0.0; 500], 200.0);
        assert!(notch(&r, 60.0).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resample_lengths_and_identity() {
        let r = rec_from(tone(5.0, 1000.0, 4000), 1000.0);
        let d = resample(&r, 200.0).unwrap();
        assert_eq!(d.samples(), 800);
        assert_eq!(d.fs, 200.0);
        let same = resample(&d, 200.0).unwrap();
        assert_eq!(same, d);
        let up = resample(&d, 500.0).unwrap();
        assert_eq!(up.samples(), 2000);
        assert!(resample(&d, 0.0).is_err());
    }

    #[test]
    fn zscore_examples() {
        let r = Recording::new(array![[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]], 10.0, "s", "r").unwrap();
        let z = zscore_normalize(&r);
        let row = z.data.row(0);
        let mean = row.sum() / 4.0;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() <= 1e-6);
        assert!((std - 1.0).abs() <= 1e-6);
        assert!(z.data.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_floor_and_errors() {
        let stack = BandStack {
            data: Array3::from_shape_fn((2, 1, 900), |(f, _, t)| (f * 1000 + t) as f64),
            fs: 200.0,
            bank: default_filter_bank(),
        };
        let w = window(&stack, 4.0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].samples(), 800);
        assert_eq!(w[0].data[[1, 0, 799]], 1799.0);
        let short = BandStack {
            data: Array3::zeros((1, 1, 700)),
            ..stack
        };
        assert!(matches!(window(&short, 4.0), Err(Error::EmptyOutput(_))));
    }

    #[test]
    fn noise_zero_identity_and_determinism() {
        let stack = BandStack {
            data: Array3::from_shape_fn((1, 2, 100), |(_, c, t)| ((c + 1) * t) as f64),
            fs: 200.0,
            bank: default_filter_bank(),
        };
        assert_eq!(augment_noise(&stack, 0.0, 1).unwrap(), stack);
        assert_eq!(
            augment_noise(&stack, 0.1, 9).unwrap(),
            augment_noise(&stack, 0.1, 9).unwrap()
        );
        assert_ne!(
            augment_noise(&stack, 0.1, 9).unwrap(),
            augment_noise(&stack, 0.1, 10).unwrap()
        );
        assert!(augment_noise(&stack, -0.1, 1).is_err());
    }

    #[test]
    fn decompose_zero_in_zero_out() {
        let r = rec_from(vec![0.0; 1000], 200.0);
        let st = decompose(&r, &default_filter_bank()).unwrap();
        assert_eq!(st.data.dim(), (12, 1, 1000));
        assert!(st.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preprocess_pipeline_shapes() {
        let r = rec_from(tone(7.0, 500.0, 5000), 500.0);
        let p = preprocess(&r, &PreprocessConfig::default()).unwrap();
        assert_eq!(p.fs, 200.0);
        assert_eq!(p.samples(), 2000);
    }
}
