//! IIR filter design and zero-phase application using second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, `a[0]` normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }

    /// Transposed direct form II state for a unit step held forever.
    fn step_state(&self, level: f64) -> ([f64; 2], f64) {
        let dc = (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2]);
        let y = dc * level;
        let z2 = self.b[2] * level - self.a[2] * y;
        let z1 = self.b[1] * level - self.a[1] * y + z2;
        ([z1, z2], y)
    }
}

/// Cascade of biquads.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Butterworth band-pass from an analog low-pass prototype of the given
    /// order; the resulting digital filter has `2·order` poles. Edges are
    /// pre-warped for the bilinear transform and the gain is normalized to 1
    /// at the (warped) geometric centre.
    pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<Sos> {
        if order == 0 {
            return Err(Error::InvalidParameter("filter order must be ≥ 1".into()));
        }
        if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
            return Err(Error::InvalidParameter(format!(
                "band-pass edges must satisfy 0 < lo < hi < fs/2 (lo={lo}, hi={hi}, fs={fs})"
            )));
        }
        let k = 2.0 * fs;
        let w1 = k * (PI * lo / fs).tan();
        let w2 = k * (PI * hi / fs).tan();
        let w0 = (w1 * w2).sqrt();
        let bw = w2 - w1;

        let mut poles = Vec::with_capacity(2 * order);
        for i in 0..order {
            let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let half = p * (bw / 2.0);
            let root = (half * half - w0 * w0).sqrt();
            for s in [half + root, half - root] {
                poles.push((k + s) / (k - s));
            }
        }

        // Pair each pole with its conjugate; real poles are paired together.
        let mut sections = Vec::with_capacity(order);
        let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
        complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        for p in complex {
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * p.re, p.norm_sqr()],
            });
        }
        let real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= 1e-12).map(|p| p.re).collect();
        for pair in real.chunks(2) {
            let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
            let b = if pair.len() == 2 {
                [1.0, 0.0, -1.0]
            } else {
                [1.0, -1.0, 0.0]
            };
            sections.push(Biquad {
                b,
                a: [1.0, -(r1 + r2), r1 * r2],
            });
        }
        if sections.len() != order {
            return Err(Error::InvalidParameter(format!(
                "band-pass design produced {} sections for order {order}",
                sections.len()
            )));
        }

        let mut sos = Sos { sections };
        let w_center = 2.0 * (w0 / k).atan();
        let gain = sos.response_at(w_center).norm();
        for b in sos.sections[0].b.iter_mut() {
            *b /= gain;
        }
        Ok(sos)
    }

    /// Second-order notch with quality factor `q` (−3 dB width `f0/q`).
    pub fn notch(f0: f64, q: f64, fs: f64) -> Result<Sos> {
        if !(f0 > 0.0 && f0 < fs / 2.0) {
            return Err(Error::InvalidParameter(format!(
                "notch frequency {f0} Hz must lie in (0, {}) Hz",
                fs / 2.0
            )));
        }
        if q <= 0.0 {
            return Err(Error::InvalidParameter("notch quality factor must be > 0".into()));
        }
        let w0 = 2.0 * PI * f0 / fs;
        let bw = w0 / q;
        let beta = (bw / 2.0).tan();
        let gain = 1.0 / (1.0 + beta);
        let c = w0.cos();
        Ok(Sos {
            sections: vec![Biquad {
                b: [gain, -2.0 * gain * c, gain],
                a: [1.0, -2.0 * gain * c, 2.0 * gain - 1.0],
            }],
        })
    }

    /// Complex response at normalized angular frequency `w` (rad/sample).
    pub fn response_at(&self, w: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    /// Magnitude response at `f` Hz for a single forward pass.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        self.response_at(2.0 * PI * f / fs).norm()
    }

    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut level = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let (z, y) = s.step_state(level);
                level = y;
                z
            })
            .collect()
    }

    fn run(&self, x: &mut [f64], init: Option<(&[[f64; 2]], f64)>) {
        for (si, s) in self.sections.iter().enumerate() {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            let (mut z1, mut z2) = match init {
                Some((zi, scale)) => (zi[si][0] * scale, zi[si][1] * scale),
                None => (0.0, 0.0),
            };
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z1;
                z1 = b1 * xin - a1 * y + z2;
                z2 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Causal filtering from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, None);
        y
    }

    /// Forward-backward filtering with odd-extension padding and step-response
    /// initial conditions; the result has zero phase and the squared magnitude
    /// response of the cascade.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let ntaps = 2 * self.sections.len() + 1;
        let pad = (3 * ntaps).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let zi = self.step_states();
        let x0 = ext[0];
        self.run(&mut ext, Some((&zi, x0)));
        ext.reverse();
        let y0 = ext[0];
        self.run(&mut ext, Some((&zi, y0)));
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandpass_unit_gain_at_center_and_zero_at_dc_and_nyquist() {
        let sos = Sos::butter_bandpass(2, 8.0, 13.0, 200.0).unwrap();
        assert_eq!(sos.sections.len(), 2);
        let k = 400.0;
        let w0 = ((k * (PI * 8.0 / 200.0).tan()) * (k * (PI * 13.0 / 200.0).tan())).sqrt();
        let fc = 200.0 * (w0 / k).atan() / PI;
        assert!((sos.magnitude(fc, 200.0) - 1.0).abs() < 1e-12);
        assert!(sos.magnitude(0.0, 200.0) < 1e-12);
        assert!(sos.magnitude(100.0, 200.0) < 1e-12);
    }

    #[test]
    fn bandpass_edges_are_half_power() {
        let sos = Sos::butter_bandpass(2, 13.0, 30.0, 200.0).unwrap();
        for f in [13.0, 30.0] {
            let g = sos.magnitude(f, 200.0);
            assert!((g - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9, "{f}: {g}");
        }
    }

    #[test]
    fn odd_orders_are_supported() {
        let sos = Sos::butter_bandpass(3, 4.0, 8.0, 200.0).unwrap();
        assert_eq!(sos.sections.len(), 3);
        assert!((sos.magnitude(4.0, 200.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn invalid_edges_rejected() {
        assert!(Sos::butter_bandpass(2, 10.0, 5.0, 200.0).is_err());
        assert!(Sos::butter_bandpass(2, 10.0, 100.0, 200.0).is_err());
        assert!(Sos::notch(100.0, 30.0, 200.0).is_err());
    }

    #[test]
    fn filtfilt_preserves_constant_through_notch() {
        let sos = Sos::notch(50.0, 30.0, 200.0).unwrap();
        let y = sos.filtfilt(&[2.5; 64]);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-9));
    }

    #[test]
    fn filtfilt_short_inputs() {
        let sos = Sos::butter_bandpass(2, 1.0, 10.0, 200.0).unwrap();
        assert!(sos.filtfilt(&[]).is_empty());
        assert_eq!(sos.filtfilt(&[1.0]).len(), 1);
        assert_eq!(sos.filtfilt(&[1.0, 2.0, 3.0]).len(), 3);
    }
}
