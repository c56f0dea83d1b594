//! Frame-by-frame tracking with a bounded window of profile columns.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::echo::{argmax, EchoStream, OriginPolicy, ProfileSetup};
use crate::error::{Error, Result};
use crate::model::{FeatureLayout, ModelArtifact};

/// Correlates each incoming frame, keeps the last `window_frames` cropped
/// columns and predicts once a full window is available.
pub struct RealtimeTracker {
    stream: EchoStream,
    model: ModelArtifact,
    origin: Option<usize>,
    detect_frames: usize,
    energy: Vec<f64>,
    seen: usize,
    ring: VecDeque<Vec<f32>>,
    window: usize,
    rows: usize,
    offset: usize,
    features: Vec<f32>,
}

impl RealtimeTracker {
    /// With [`OriginPolicy::DirectPath`] the first second of frames only
    /// locates the origin and yields no predictions.
    pub fn new(setup: ProfileSetup, model: ModelArtifact, policy: OriginPolicy) -> Result<Self> {
        let cfg = setup.cfg.clone();
        let layout = FeatureLayout {
            frames: cfg.window_frames(),
            rows: cfg.crop_used_px,
            channels: setup.n_channels(),
        };
        if model.layout != layout {
            return Err(Error::contract(format!(
                "model expects {:?}, the tracker produces {layout:?}",
                model.layout
            )));
        }
        let detect_frames = setup.origin_frames();
        let origin = match policy {
            OriginPolicy::Fixed(o) => Some(o),
            OriginPolicy::DirectPath => None,
        };
        Ok(RealtimeTracker {
            stream: EchoStream::new(setup, OriginPolicy::Fixed(origin.unwrap_or(0)))?,
            model,
            origin,
            detect_frames,
            energy: vec![0.0; cfg.frame_len],
            seen: 0,
            ring: VecDeque::with_capacity(layout.frames),
            window: layout.frames,
            rows: layout.rows,
            offset: (cfg.crop_full_px - cfg.crop_used_px) / 2,
            features: vec![0.0; layout.dims()],
        })
    }

    pub fn origin(&self) -> Option<usize> {
        self.origin
    }

    /// Processes one multi-microphone frame.
    pub fn push_frame(&mut self, mics: &[&[f64]]) -> Result<Option<[f64; 2]>> {
        self.seen += 1;
        let Some(origin) = self.origin else {
            self.stream.correlate_frame_with_energy(mics, &mut self.energy)?;
            if self.seen >= self.detect_frames {
                self.origin = Some(argmax(&self.energy));
            }
            return Ok(None);
        };
        let cols = self.stream.correlate_frame(mics)?;
        let n = cols[0].len();
        let mut column = Vec::with_capacity(cols.len() * self.rows);
        for col in &cols {
            for r in 0..self.rows {
                column.push(col[(origin + self.offset + r) % n] as f32);
            }
        }
        if self.ring.len() == self.window {
            self.ring.pop_front();
        }
        self.ring.push_back(column);
        if self.ring.len() < self.window {
            return Ok(None);
        }
        // Channel-major: channel, then frame, then row.
        let (rows, window) = (self.rows, self.window);
        for (f, column) in self.ring.iter().enumerate() {
            for (ch, chunk) in column.chunks_exact(rows).enumerate() {
                let at = (ch * window + f) * rows;
                self.features[at..at + rows].copy_from_slice(chunk);
            }
        }
        self.model.predict_features(&self.features).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub frames: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Frames per second of processing time alone.
    pub fps_sustained: f64,
}

impl LatencyStats {
    pub fn from_durations(d: &[Duration]) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::EmptyInput("no latency samples".into()));
        }
        let mut ms: Vec<f64> = d.iter().map(|x| x.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let total: f64 = ms.iter().sum();
        let p99 = ms[((ms.len() as f64 * 0.99).ceil() as usize).clamp(1, ms.len()) - 1];
        Ok(LatencyStats {
            frames: ms.len(),
            mean_ms: total / ms.len() as f64,
            p99_ms: p99,
            max_ms: ms[ms.len() - 1],
            fps_sustained: ms.len() as f64 / (total / 1e3),
        })
    }
}

/// Runs the tracker over `frames`, timing only the tracker's own work.
pub fn bench_tracker<'a, I>(tracker: &mut RealtimeTracker, frames: I) -> Result<(Vec<[f64; 2]>, LatencyStats)>
where
    I: IntoIterator<Item = Vec<&'a [f64]>>,
{
    let mut preds = Vec::new();
    let mut times = Vec::new();
    for f in frames {
        let t = Instant::now();
        let p = tracker.push_frame(&f)?;
        times.push(t.elapsed());
        if let Some(p) = p {
            preds.push(p);
        }
    }
    Ok((preds, LatencyStats::from_durations(&times)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::{window_instance, EchoStream};
    use crate::fmcw::FrameConfig;
    use crate::model::{fit_gbrt, GbrtParams};
    use crate::seed::Seed;
    use crate::sim::{default_scene, SessionSynth};

    #[test]
    fn tracker_matches_batch_instances() {
        let cfg = FrameConfig::default();
        let scene = default_scene();
        let setup = ProfileSetup::new(&cfg, true).unwrap();
        let mut synth = SessionSynth::new(&scene, &cfg, Seed(5)).unwrap();
        let gaze = |t: usize| [300.0 + 20.0 * t as f64, 500.0 - 3.0 * t as f64];
        let n = 120;
        let frames: Vec<Vec<Vec<f64>>> = (0..n).map(|t| synth.render_frame(gaze(t)).to_vec()).collect();

        let mut stream = EchoStream::new(setup.clone(), OriginPolicy::DirectPath).unwrap();
        for f in &frames {
            let refs: Vec<&[f64]> = f.iter().map(Vec::as_slice).collect();
            stream.push_frame(&refs).unwrap();
        }
        let set = stream.finish().unwrap();
        let origin = set.origin() as usize;
        let offset = (cfg.crop_full_px - cfg.crop_used_px) / 2;
        let train: Vec<_> = (25..n).map(|t| window_instance(&set, &cfg, t, offset, gaze(t), 0)).collect();
        let model = fit_gbrt(&train, &GbrtParams { n_trees: 10, ..GbrtParams::default() }).unwrap();

        let mut tracker = RealtimeTracker::new(setup, model.clone(), OriginPolicy::Fixed(origin)).unwrap();
        let mut k = 0;
        for (t, f) in frames.iter().enumerate() {
            let refs: Vec<&[f64]> = f.iter().map(Vec::as_slice).collect();
            let got = tracker.push_frame(&refs).unwrap();
            if t < 25 {
                assert!(got.is_none());
            } else {
                assert_eq!(got.unwrap(), model.predict_features(train[k].features()).unwrap());
                k += 1;
            }
        }
    }

    #[test]
    fn direct_path_detection_waits_one_second() {
        let cfg = FrameConfig::default();
        let setup = ProfileSetup::new(&cfg, false).unwrap();
        let layout = FeatureLayout {
            frames: 26,
            rows: 60,
            channels: 16,
        };
        let d = layout.dims();
        let model = ModelArtifact {
            layout,
            normalization: crate::model::Normalization::identity(d),
            params: crate::model::ModelParams::Linear {
                weights: vec![[0.0, 0.0]; d],
                intercept: [1.0, 2.0],
            },
            calibration: Default::default(),
        };
        let mut tracker = RealtimeTracker::new(setup, model, OriginPolicy::DirectPath).unwrap();
        let mut synth = SessionSynth::new(&default_scene(), &cfg, Seed(1)).unwrap();
        let mut first = None;
        for t in 0..140 {
            let f = synth.render_frame([960.0, 540.0]).to_vec();
            let refs: Vec<&[f64]> = f.iter().map(Vec::as_slice).collect();
            if tracker.push_frame(&refs).unwrap().is_some() && first.is_none() {
                first = Some(t);
            }
        }
        assert_eq!(first, Some(83 + 25));
        assert!(tracker.origin().is_some());
    }

    #[test]
    fn latency_stats() {
        let d: Vec<Duration> = (1..=100).map(Duration::from_millis).collect();
        let s = LatencyStats::from_durations(&d).unwrap();
        assert!((s.mean_ms - 50.5).abs() < 1e-9);
        assert!((s.p99_ms - 99.0).abs() < 1e-9);
        assert!((s.max_ms - 100.0).abs() < 1e-9);
        assert!(LatencyStats::from_durations(&[]).is_err());
    }
}
