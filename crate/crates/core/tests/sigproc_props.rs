use std::f64::consts::PI;

use ndarray::Array2;
use pimt::sigproc::{
    decompose, default_filter_bank, resample, window, zscore_normalize, BandDefinition, FilterBank, Recording,
};
use proptest::prelude::*;

fn tone(freq: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
}

fn recording(rows: Vec<Vec<f64>>, fs: f64) -> Recording {
    let c = rows.len();
    let t = rows[0].len();
    Recording::new(Array2::from_shape_vec((c, t), rows.concat()).unwrap(), fs, "S01", "A").unwrap()
}

/// Power in `[lo, hi]` Hz by direct DFT over the bins in range.
fn band_power(x: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
    let n = x.len();
    let mut p = 0.0;
    for k in 1..n / 2 {
        let f = k as f64 * fs / n as f64;
        if f < lo || f > hi {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let a = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
            re += v * a.cos();
            im += v * a.sin();
        }
        p += re * re + im * im;
    }
    p
}

fn single_band(name: &str, lo: f64, hi: f64) -> FilterBank {
    FilterBank::new(vec![BandDefinition::new(name, lo, hi)]).unwrap()
}

#[test]
fn filtered_tone_has_zero_lag() {
    let fs = 200.0;
    let n = 4000;
    let bank = default_filter_bank();
    for band in bank.realize(fs).unwrap().bands {
        let f0 = band.geometric_center();
        if f0 * n as f64 / fs < 20.0 {
            continue;
        }
        // A Gaussian envelope keeps the correlation peak unique.
        let x: Vec<f64> = tone(f0, fs, n)
            .iter()
            .enumerate()
            .map(|(i, v)| v * (-((i as f64 - n as f64 / 2.0) / (n as f64 / 10.0)).powi(2) / 2.0).exp())
            .collect();
        let y = decompose(
            &recording(vec![x.clone()], fs),
            &single_band(&band.name, band.lo, band.hi),
        )
        .unwrap();
        let y: Vec<f64> = y.data.iter().copied().collect();
        let xcorr = |lag: i64| -> f64 { (n / 4..3 * n / 4).map(|i| x[i] * y[(i as i64 + lag) as usize]).sum() };
        let best = (-10..=10).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
        assert_eq!(best, 0, "band {} peaks at lag {best}", band.name);
    }
}

#[test]
fn resampled_sine_matches_analytic_sine() {
    let x = tone(5.0, 1000.0, 10_000);
    let out = resample(&recording(vec![x], 1000.0), 200.0).unwrap();
    assert_eq!(out.samples(), 2000);
    let want = tone(5.0, 200.0, 2000);
    let got = out.data.row(0).to_vec();
    let dot: f64 = got.iter().zip(&want).map(|(a, b)| a * b).sum();
    let na: f64 = got.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(dot / (na * nb) >= 0.999);
}

#[test]
fn alpha_tone_lands_in_alpha_band() {
    let fs = 200.0;
    let x = tone(10.0, fs, 4000);
    let stack = decompose(&recording(vec![x.clone()], fs), &default_filter_bank()).unwrap();
    let input = band_power(&x, fs, 0.0, fs / 2.0);
    let slice = |f: usize| stack.data.slice(ndarray::s![f, 0, ..]).to_vec();
    assert!(band_power(&slice(2), fs, 0.0, fs / 2.0) >= 0.7 * input);
    assert!(band_power(&slice(0), fs, 0.0, fs / 2.0) <= 0.01 * input);
}

#[test]
fn clamped_gamma_upper_edge_sits_at_ninety_hz() {
    let fs = 200.0;
    let n = 8000;
    let bank = single_band("EEG-gamma", 30.0, 100.0);
    let gain = |f: f64| {
        let x = tone(f, fs, n);
        let y = decompose(&recording(vec![x.clone()], fs), &bank).unwrap();
        let mid = n / 4..3 * n / 4;
        let px: f64 = mid.clone().map(|i| x[i] * x[i]).sum();
        let py: f64 = mid.map(|i| y.data[[0, 0, i]].powi(2)).sum();
        (py / px).sqrt()
    };
    // Zero-phase filtering squares the one-pass response, so the one-pass
    // −3 dB point is where the measured gain falls to one half.
    let upper = (600..990)
        .map(|k| k as f64 / 10.0)
        .find(|&f| gain(f) < 0.5)
        .expect("gain falls below one half under Nyquist");
    assert!((upper - 90.0).abs() <= 1.0, "upper edge at {upper} Hz");
}

#[test]
fn zscore_channels_are_independent() {
    let rows = vec![vec![1.0, 2.0, 3.0, 4.0], vec![-5.0, 10.0, 0.5, 2.0]];
    let out = zscore_normalize(&recording(rows.clone(), 200.0));
    for (c, row) in rows.iter().enumerate() {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (t, v) in row.iter().enumerate() {
            assert!((out.data[[c, t]] - (v - mean) / std).abs() < 1e-12);
        }
    }
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decomposition_is_linear(x in signal(600), y in signal(600), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let bank = default_filter_bank();
        let fs = 200.0;
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let dx = decompose(&recording(vec![x], fs), &bank).unwrap().data;
        let dy = decompose(&recording(vec![y], fs), &bank).unwrap().data;
        let dm = decompose(&recording(vec![mix], fs), &bank).unwrap().data;
        let want = &dx * a + &dy * b;
        let err = (&dm - &want).mapv(|v| v * v).sum().sqrt();
        let scale = want.mapv(|v| v * v).sum().sqrt().max(1e-12);
        prop_assert!(err / scale <= 1e-6, "relative error {}", err / scale);
    }

    #[test]
    fn windows_tile_the_truncated_signal(len in 200usize..3000, win_s in 0.5..4.0f64) {
        let x: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let stack = decompose(&recording(vec![x], 200.0), &single_band("b", 5.0, 20.0)).unwrap();
        let win_len = (win_s * 200.0).round() as usize;
        match window(&stack, win_s) {
            Ok(ws) => {
                prop_assert_eq!(ws.len(), len / win_len);
                for (i, w) in ws.iter().enumerate() {
                    prop_assert_eq!(w.samples(), win_len);
                    let want = stack.data.slice(ndarray::s![.., .., i * win_len..(i + 1) * win_len]);
                    prop_assert_eq!(w.data.view(), want);
                }
            }
            Err(_) => prop_assert!(len < win_len),
        }
    }
}
