//! Simulated recording sessions turned into model instances.
//!
//! A session is rendered frame by frame and fed straight into the echo
//! stream, so no session ever holds its raw audio in memory.

use serde::{Deserialize, Serialize};

use crate::echo::{crop_offset, window_instance, AssemblyOptions, EchoStream, GazeInstance, OriginPolicy, ProfileSet, ProfileSetup};
use crate::error::{Error, Result};
use crate::fmcw::FrameConfig;
use crate::protocol::{generate_session_trace, GazeTrace, ProtocolSpec};
use crate::seed::Seed;
use crate::sim::{NoiseProfile, SceneSpec, SessionSynth};

/// How many sessions to simulate and how densely to sample instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_sessions: u32,
    /// Per-session remount offset is uniform in `[-j, j]` samples.
    pub remount_jitter_samples: f64,
    /// Frames between consecutive instance end positions in the main segment.
    pub main_stride: usize,
    /// Same, inside the calibration segment.
    pub calib_stride: usize,
    /// Band-pass the microphones before correlation.
    pub filtered: bool,
    /// Random crop offsets for training instances.
    pub augment: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_sessions: 8,
            remount_jitter_samples: 2.0,
            main_stride: 80,
            calib_stride: 10,
            filtered: true,
            augment: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sessions == 0 {
            return Err(Error::config("n_sessions must be positive"));
        }
        if self.main_stride == 0 || self.calib_stride == 0 {
            return Err(Error::config("instance strides must be positive"));
        }
        if !(self.remount_jitter_samples >= 0.0) {
            return Err(Error::config("remount jitter must be non-negative"));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSetup {
    pub frame: FrameConfig,
    pub scene: SceneSpec,
    pub protocol: ProtocolSpec,
    pub dataset: DatasetSpec,
    pub seed: u64,
}

impl Default for SimulationSetup {
    fn default() -> Self {
        SimulationSetup {
            frame: FrameConfig::default(),
            scene: SceneSpec::default(),
            protocol: ProtocolSpec::default(),
            dataset: DatasetSpec::default(),
            seed: 42,
        }
    }
}

impl SimulationSetup {
    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        self.scene.validate(&self.frame)?;
        self.protocol.validate()?;
        self.dataset.validate()
    }

    pub fn session_seed(&self, id: u32) -> Seed {
        Seed(self.seed).child("session", u64::from(id))
    }

    pub fn trace(&self, id: u32) -> Result<GazeTrace> {
        generate_session_trace(&self.scene.screen, &self.protocol, &self.frame, self.session_seed(id).child("trace", 0))
    }

    /// The scene as mounted for session `id`.
    pub fn session_scene(&self, id: u32) -> SceneSpec {
        self.scene.remounted(
            &self.frame,
            self.dataset.remount_jitter_samples,
            self.session_seed(id).child("remount", 0),
        )
    }

    /// Renders a session frame by frame, handing each multi-mic frame to
    /// `sink` along with its frame index.
    pub fn render<F>(&self, id: u32, overlay: Option<&NoiseProfile>, mut sink: F) -> Result<GazeTrace>
    where
        F: FnMut(usize, &[Vec<f64>]) -> Result<()>,
    {
        let trace = self.trace(id)?;
        let seed = self.session_seed(id);
        let mut synth = SessionSynth::new(&self.session_scene(id), &self.frame, seed.child("synth", 0))?;
        if let Some(n) = overlay {
            synth = synth.with_overlay(n, seed.child("overlay", 0))?;
        }
        for p in &trace.points {
            let frame = synth.render_frame([p.x_px, p.y_px]);
            sink(p.frame_index, frame)?;
        }
        Ok(trace)
    }

    /// Simulates one session and computes its echo profiles.
    pub fn profiles(&self, id: u32, overlay: Option<&NoiseProfile>) -> Result<(ProfileSet, GazeTrace)> {
        let setup = ProfileSetup::new(&self.frame, self.dataset.filtered)?;
        let mut stream = EchoStream::new(setup, OriginPolicy::DirectPath)?;
        let trace = self.render(id, overlay, |_, frame| {
            let refs: Vec<&[f64]> = frame.iter().map(Vec::as_slice).collect();
            stream.push_frame(&refs).map(|_| ())
        })?;
        Ok((stream.finish()?, trace))
    }

    pub fn session(&self, id: u32, overlay: Option<&NoiseProfile>) -> Result<SessionRecord> {
        let (set, trace) = self.profiles(id, overlay)?;
        SessionRecord::from_profiles(&set, &trace, &self.frame, &self.dataset, id, Seed(self.seed))
    }
}

/// Instances cut from one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: u32,
    pub n_frames: usize,
    pub calib_frames: usize,
    /// Windows entirely inside the calibration segment.
    pub calib: Vec<GazeInstance>,
    /// Windows entirely inside the main segment.
    pub main: Vec<GazeInstance>,
    pub origin: i32,
}

impl SessionRecord {
    pub fn from_profiles(
        set: &ProfileSet,
        trace: &GazeTrace,
        cfg: &FrameConfig,
        spec: &DatasetSpec,
        session_id: u32,
        seed: Seed,
    ) -> Result<Self> {
        let n_frames = set.n_frames();
        if trace.n_frames() < n_frames {
            return Err(Error::contract("trace shorter than the profiles"));
        }
        let labels = trace.labels();
        let window = cfg.window_frames();
        let calib_frames = trace.calib_frames().min(n_frames);
        let opts = AssemblyOptions {
            augment: spec.augment,
            seed: seed.child("augment-root", 0),
            session_id,
            stride: 1,
            first_end: 0,
        };
        let cut = |t: usize| window_instance(set, cfg, t, crop_offset(cfg, &opts, t), labels[t], session_id);
        let calib = (window - 1..calib_frames).step_by(spec.calib_stride).map(cut).collect();
        let main = (calib_frames + window - 1..n_frames)
            .step_by(spec.main_stride)
            .map(cut)
            .collect();
        Ok(SessionRecord {
            session_id,
            n_frames,
            calib_frames,
            calib,
            main,
            origin: set.origin(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_setup() -> SimulationSetup {
        SimulationSetup {
            frame: FrameConfig::default(),
            scene: SceneSpec::default(),
            protocol: ProtocolSpec {
                n_regions: 4,
                calib_duration_s: 1.0,
                ..ProtocolSpec::default()
            },
            dataset: DatasetSpec {
                main_stride: 20,
                calib_stride: 5,
                ..DatasetSpec::default()
            },
            seed: 3,
        }
    }

    #[test]
    fn windows_stay_inside_their_segment() {
        let s = small_setup();
        let rec = s.session(0, None).unwrap();
        let w = s.frame.window_frames();
        assert!(!rec.calib.is_empty() && !rec.main.is_empty());
        assert!(rec.calib.iter().all(|i| i.t_end < rec.calib_frames));
        assert!(rec.main.iter().all(|i| i.t_start() >= rec.calib_frames));
        assert!(rec.main.iter().all(|i| i.t_end < rec.n_frames));
        assert_eq!(rec.main[0].t_end, rec.calib_frames + w - 1);
        assert_eq!(rec.main[0].tensor.shape(), [26, 60, 16]);
    }

    #[test]
    fn sessions_are_reproducible_and_distinct() {
        let s = small_setup();
        let a = s.session(1, None).unwrap();
        let b = s.session(1, None).unwrap();
        assert_eq!(a, b);
        let c = s.session(2, None).unwrap();
        assert_ne!(a.main[0].tensor, c.main[0].tensor);
        assert_ne!(s.session_scene(1).base_delay_jitter_s, s.session_scene(2).base_delay_jitter_s);
    }
}
