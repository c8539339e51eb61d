use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::ArrayView1;
use pimt::datagen::{
    make_splits, session_name, subject_name, synth_freeliving, synth_task, GazeSpec, SplitMode, SplitSpec,
    SyntheticTaskSpec, TaskWindow,
};
use pimt::dataset::{LabelValue, TaskKind, WindowMeta};
use pimt::heads::macro_f1;
use pimt::sigproc::default_filter_bank;

/// Power in `[lo, hi]` Hz by direct DFT.
fn band_power(x: ArrayView1<f64>, fs: f64, lo: f64, hi: f64) -> f64 {
    let n = x.len();
    let mut p = 0.0;
    for k in 1..n.div_ceil(2) {
        let f = k as f64 * fs / n as f64;
        if f < lo || f > hi {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let a = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            re += v * a.cos();
            im -= v * a.sin();
        }
        p += re * re + im * im;
    }
    p
}

/// Log ratio of alpha to beta power summed over channels.
fn alpha_beta(w: &TaskWindow, fs: f64) -> f64 {
    let (mut a, mut b) = (0.0, 0.0);
    for row in w.data.rows() {
        a += band_power(row, fs, 8.0, 13.0);
        b += band_power(row, fs, 13.0, 30.0);
    }
    (a / b).ln()
}

fn class(w: &TaskWindow) -> usize {
    match w.label {
        LabelValue::Class(k) => k,
        LabelValue::Gaze(_) => panic!("classification window expected"),
    }
}

/// Threshold halfway between the class means on `fit`, scored on `test`.
fn oracle_f1(spec: &SyntheticTaskSpec, fit_seed: u64, test_seed: u64) -> f64 {
    let fit = synth_task(spec, 100, fit_seed).unwrap();
    let mean = |k: usize| {
        let v: Vec<f64> = fit
            .iter()
            .filter(|w| class(w) == k)
            .map(|w| alpha_beta(w, spec.fs))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (m0, m1) = (mean(0), mean(1));
    let threshold = (m0 + m1) / 2.0;
    let test = synth_task(spec, 200, test_seed).unwrap();
    let preds: Vec<usize> = test
        .iter()
        .map(|w| {
            let above = alpha_beta(w, spec.fs) > threshold;
            if above == (m0 > m1) {
                0
            } else {
                1
            }
        })
        .collect();
    let labels: Vec<usize> = test.iter().map(class).collect();
    macro_f1(&preds, &labels).unwrap()
}

fn with_ratio(ratio: f64) -> SyntheticTaskSpec {
    let mut spec = SyntheticTaskSpec::default();
    for c in &mut spec.classes {
        c.ratio = ratio;
    }
    spec
}

#[test]
fn band_energy_oracle_solves_the_default_task() {
    let f1 = oracle_f1(&SyntheticTaskSpec::default(), 11, 12);
    assert!(f1 >= 0.99, "oracle macro-F1 {f1}");
}

#[test]
fn unit_ratio_leaves_the_oracle_at_chance() {
    let f1 = oracle_f1(&with_ratio(1.0), 11, 12);
    assert!((0.4..=0.6).contains(&f1), "oracle macro-F1 {f1}");
}

#[test]
fn oracle_score_is_monotone_in_the_power_ratio() {
    let scores: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|&r| oracle_f1(&with_ratio(r), 21, 22))
        .collect();
    for pair in scores.windows(2) {
        assert!(pair[1] >= pair[0], "scores {scores:?}");
    }
}

#[test]
fn gaze_amplitudes_decode_to_the_angles() {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::Gaze,
        gaze: GazeSpec::default(),
        ..SyntheticTaskSpec::default()
    };
    let windows = synth_task(&spec, 50, 4).unwrap();
    let n = windows[0].data.ncols();
    let mut total = 0.0;
    for w in &windows {
        let LabelValue::Gaze(angle) = w.label else {
            panic!("gaze window expected")
        };
        let mut decoded = [0.0; 2];
        for (a, out) in decoded.iter_mut().enumerate() {
            let row = w.data.row(spec.gaze.channels[a]);
            let f = (spec.gaze.freqs_hz[a] * n as f64 / spec.fs).round() * spec.fs / n as f64;
            let proj: f64 = row
                .iter()
                .enumerate()
                .map(|(t, v)| v * (2.0 * PI * f * t as f64 / spec.fs).sin())
                .sum();
            *out = 2.0 * proj / n as f64 / spec.gaze.gain_per_deg;
        }
        total += ((decoded[0] - angle[0]).powi(2) + (decoded[1] - angle[1]).powi(2)).sqrt();
    }
    let mean = total / windows.len() as f64;
    assert!(mean <= 1.0, "mean oracle error {mean}°");
}

#[test]
fn freeliving_has_energy_in_every_default_band() {
    let rec = synth_freeliving(60.0, 1, 200.0, 5).unwrap();
    for band in default_filter_bank().realize(200.0).unwrap().bands {
        let p = band_power(rec.data.row(0), 200.0, band.lo, band.hi);
        assert!(p > 0.0, "no energy in {}", band.name);
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = SyntheticTaskSpec::default();
    assert_eq!(synth_task(&spec, 10, 3).unwrap(), synth_task(&spec, 10, 3).unwrap());
    assert_ne!(synth_task(&spec, 10, 3).unwrap(), synth_task(&spec, 10, 4).unwrap());
}

fn corpus() -> Vec<WindowMeta> {
    let mut out = Vec::new();
    let mut rec = 0;
    for s in 0..6 {
        for e in 0..2 {
            for o in 0..15 {
                out.push(WindowMeta {
                    subject_id: subject_name(s),
                    session_id: session_name(e),
                    recording: rec,
                    offset: o,
                });
            }
            rec += 1;
        }
    }
    out
}

#[test]
fn splits_are_disjoint_for_every_mode_and_seed() {
    let windows = corpus();
    let modes = [
        SplitMode::WithinSession,
        SplitMode::CrossSession,
        SplitMode::CrossSubject,
        SplitMode::Loso { target: None },
        SplitMode::Loso {
            target: Some(subject_name(2)),
        },
    ];
    for seed in 0..20 {
        for mode in &modes {
            let spec = SplitSpec {
                mode: mode.clone(),
                seed,
                test_fraction: 0.2,
            };
            let s = make_splits(&windows, &spec).unwrap();
            let train: BTreeSet<usize> = s.train.iter().copied().collect();
            let test: BTreeSet<usize> = s.test.iter().copied().collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(train.len() + test.len(), windows.len());
            let key = |i: usize| -> (String, String) {
                let w = &windows[i];
                match mode {
                    SplitMode::WithinSession => (String::new(), format!("{}/{}", w.recording, w.offset)),
                    SplitMode::CrossSession => (w.subject_id.clone(), w.session_id.clone()),
                    _ => (w.subject_id.clone(), String::new()),
                }
            };
            let train_keys: BTreeSet<_> = s.train.iter().map(|&i| key(i)).collect();
            assert!(
                s.test.iter().all(|&i| !train_keys.contains(&key(i))),
                "{mode:?} seed {seed}"
            );
            match mode {
                SplitMode::WithinSession => {
                    for r in 0..12 {
                        let n_test = s.test.iter().filter(|&&i| windows[i].recording == r).count();
                        assert_eq!(n_test, 3);
                    }
                }
                SplitMode::Loso { .. } => {
                    let target = &windows[s.test[0]].subject_id;
                    assert_eq!(s.pretrain_exclude, vec![target.clone()]);
                    assert!(s.train.iter().all(|&i| s.pretrain_allowed(&windows[i].subject_id)));
                }
                _ => assert!(s.pretrain_exclude.is_empty()),
            }
        }
    }
}
