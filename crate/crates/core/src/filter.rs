//! Butterworth band-pass design and causal biquad-cascade filtering.
//!
//! The analog low-pass prototype of order `N` is mapped to a band-pass with
//! the `s -> (s^2 + w0^2) / (B s)` substitution on pre-warped edges, then
//! discretized with the bilinear transform. Each prototype pole becomes one
//! conjugate pole pair, i.e. one second-order section with zeros at
//! `z = 1` and `z = -1`.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPassSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub order: usize,
    pub sample_rate_hz: u32,
}

impl BandPassSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = f64::from(self.sample_rate_hz) / 2.0;
        if self.order == 0 {
            return Err(Error::config("filter order must be at least 1"));
        }
        if !(self.low_cut_hz > 0.0 && self.low_cut_hz < self.high_cut_hz && self.high_cut_hz < nyquist)
        {
            return Err(Error::config(format!(
                "need 0 < low_cut ({}) < high_cut ({}) < Nyquist ({nyquist})",
                self.low_cut_hz, self.high_cut_hz
            )));
        }
        Ok(())
    }
}

/// Normalized biquad: `y = b0 x + b1 x' + b2 x'' - a1 y' - a2 y''`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Frequency response at normalized angular frequency `w` (rad/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b0 + z1 * self.b1 + z2 * self.b2) / (1.0 + z1 * self.a1 + z2 * self.a2)
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }
}

/// Cascaded second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
    pub sample_rate_hz: u32,
}

impl SosFilter {
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / f64::from(self.sample_rate_hz);
        self.sections
            .iter()
            .map(|s| s.response(w))
            .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
            .norm()
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.magnitude(freq_hz).log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections
            .iter()
            .all(|s| s.poles().iter().all(|p| p.norm() < 1.0))
    }

    pub fn state(&self) -> FilterState {
        FilterState {
            z: vec![[0.0; 2]; self.sections.len()],
        }
    }

    /// Filters a block with zero initial state.
    pub fn apply(&self, audio: &[f64]) -> Vec<f64> {
        let mut out = audio.to_vec();
        self.state().process_in_place(self, &mut out);
        out
    }
}

impl fmt::Display for SosFilter {
    /// One section per line: `b0 b1 b2 a1 a2`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.sections {
            writeln!(f, "{:e} {:e} {:e} {:e} {:e}", s.b0, s.b1, s.b2, s.a1, s.a2)?;
        }
        Ok(())
    }
}

/// Per-stream delay line for an [`SosFilter`]; one per channel.
#[derive(Debug, Clone)]
pub struct FilterState {
    z: Vec<[f64; 2]>,
}

impl FilterState {
    /// Transposed direct form II, section by section.
    pub fn process_in_place(&mut self, filter: &SosFilter, buf: &mut [f64]) {
        debug_assert_eq!(filter.sections.len(), self.z.len());
        for (s, z) in filter.sections.iter().zip(self.z.iter_mut()) {
            let [mut z1, mut z2] = *z;
            for x in buf.iter_mut() {
                let y = s.b0 * *x + z1;
                z1 = s.b1 * *x - s.a1 * y + z2;
                z2 = s.b2 * *x - s.a2 * y;
                *x = y;
            }
            *z = [z1, z2];
        }
    }

    pub fn reset(&mut self) {
        self.z.iter_mut().for_each(|z| *z = [0.0; 2]);
    }
}

/// Designs a Butterworth band-pass as `order` second-order sections.
pub fn design_butterworth(spec: &BandPassSpec) -> Result<SosFilter> {
    spec.validate()?;
    let fs = f64::from(spec.sample_rate_hz);
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (w1, w2) = (warp(spec.low_cut_hz), warp(spec.high_cut_hz));
    let w0_sq = w1 * w2;
    let bw = w2 - w1;
    let n = spec.order;

    // Digital centre frequency corresponding to the analog w0.
    let center = 2.0 * (w0_sq.sqrt() / (2.0 * fs)).atan();

    // All 2N analog band-pass poles: roots of s^2 - p B s + w0^2 for each
    // prototype pole p, mapped through the bilinear transform.
    let mut upper = Vec::with_capacity(n);
    let mut real = Vec::new();
    for k in 0..n {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let pb = Complex64::from_polar(bw, theta);
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
            let z = (1.0 + s / (2.0 * fs)) / (1.0 - s / (2.0 * fs));
            if z.im.abs() <= 1e-12 {
                real.push(z.re);
            } else if z.im > 0.0 {
                upper.push(z);
            }
        }
    }
    real.sort_by(f64::total_cmp);
    let mut pole_pairs: Vec<(f64, f64)> = upper.iter().map(|z| (-2.0 * z.re, z.norm_sqr())).collect();
    pole_pairs.extend(real.chunks(2).map(|c| match *c {
        [a, b] => (-(a + b), a * b),
        _ => (-c[0], 0.0),
    }));

    let mut sections = Vec::with_capacity(n);
    for (a1, a2) in pole_pairs {
        let mut bq = Biquad {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1,
            a2,
        };
        let g = bq.response(center).norm();
        bq.b0 /= g;
        bq.b2 /= g;
        sections.push(bq);
    }
    if sections.len() != n {
        return Err(Error::config(format!(
            "pole pairing failed: expected {n} sections, got {}",
            sections.len()
        )));
    }
    Ok(SosFilter {
        sections,
        sample_rate_hz: spec.sample_rate_hz,
    })
}

pub fn filter_apply(filter: &SosFilter, audio: &[f64]) -> Vec<f64> {
    filter.apply(audio)
}

/// Filter order used for every default band.
pub const DEFAULT_ORDER: usize = 4;
