//! Parametric acoustic scene around the eyes.
//!
//! Two speakers and eight microphones sit on a glasses frame. Each speaker's
//! chirp reaches every microphone along a direct path and by bouncing off a
//! set of point reflectors (cornea bulges, eyelids, canthi, cheeks). Gaze
//! moves some reflectors through a linear coupling matrix, so it changes the
//! round-trip delays by a fraction of a sample up to a few samples.
//!
//! Fractional delays are rendered by linear interpolation of a table of the
//! periodic transmit signal sampled [`OVERSAMPLE`] times finer than the
//! audio. Interpolating at the audio rate itself would be far too crude for
//! content at 0.4 fs and above.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::echo::NUM_MICS;
use crate::error::{Error, Result};
use crate::fmcw::{chirp_at, generate_chirp, FrameConfig};
use crate::protocol::{GazeTrace, ScreenGeometry};
use crate::seed::Seed;

pub type Vec3 = [f64; 3];

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Largest displacement a reflector may reach over the gaze range (m).
pub const MAX_DISPLACEMENT_M: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectorSpec {
    /// Position at centre gaze, metres in the head frame (x right, y up, z forward).
    pub center: Vec3,
    /// Effective reflecting size; scales the echo gain.
    pub radius_gain: f64,
    /// Row 0: displacement per unit of normalized gaze x; row 1: per unit of gaze y.
    pub gaze_coupling: [Vec3; 2],
    pub amplitude: f64,
    /// Per-microphone visibility, 1.0 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mic_gains: Option<Vec<f64>>,
}

impl ReflectorSpec {
    pub fn position(&self, gaze: [f64; 2]) -> Vec3 {
        let [gx, gy] = self.gaze_coupling;
        [
            self.center[0] + gaze[0] * gx[0] + gaze[1] * gy[0],
            self.center[1] + gaze[0] * gx[1] + gaze[1] * gy[1],
            self.center[2] + gaze[0] * gx[2] + gaze[1] * gy[2],
        ]
    }

    pub fn mic_gain(&self, mic: usize) -> f64 {
        self.mic_gains.as_ref().map_or(1.0, |g| g[mic])
    }

    /// Largest displacement over the normalized gaze square.
    pub fn max_displacement(&self) -> f64 {
        let mut m: f64 = 0.0;
        for gx in [-1.0, 1.0] {
            for gy in [-1.0, 1.0] {
                m = m.max(dist(self.position([gx, gy]), self.center));
            }
        }
        m
    }

    pub fn is_gaze_coupled(&self) -> bool {
        self.gaze_coupling.iter().flatten().any(|&v| v != 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    /// User-supplied mono PCM, tiled and scaled by RMS.
    RecordedSample { samples: Vec<f64> },
}

/// Maps digital RMS to an A-weighted sound level.
///
/// `level = full_scale_dba + 20 log10(rms) + weighting`, where the
/// weighting is the A-curve power average over `[0, fs/2]` for white noise
/// and 0 for recorded samples. Levels at or below 0 dB(A) produce silence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelReference {
    /// A-weighted level of a full-scale (RMS 1.0) flat-weighted signal.
    pub full_scale_dba: f64,
}

impl Default for LevelReference {
    fn default() -> Self {
        LevelReference {
            full_scale_dba: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub kind: NoiseKind,
    pub target_level_dba: f64,
    #[serde(default)]
    pub reference: LevelReference,
}

impl NoiseProfile {
    pub fn white(level_dba: f64) -> Self {
        NoiseProfile {
            kind: NoiseKind::White,
            target_level_dba: level_dba,
            reference: LevelReference::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.target_level_dba) {
            return Err(Error::config(format!(
                "noise level {} dB(A) outside [0, 100]",
                self.target_level_dba
            )));
        }
        if let NoiseKind::RecordedSample { samples } = &self.kind {
            if samples.is_empty() || samples.iter().all(|&v| v == 0.0) {
                return Err(Error::config("recorded noise sample is empty or silent"));
            }
        }
        Ok(())
    }

    fn weighting_db(&self, sample_rate_hz: u32) -> f64 {
        match self.kind {
            NoiseKind::White => white_noise_a_weighting_db(sample_rate_hz),
            NoiseKind::RecordedSample { .. } => 0.0,
        }
    }

    /// Digital RMS that realizes the target level.
    pub fn target_rms(&self, sample_rate_hz: u32) -> f64 {
        if self.target_level_dba <= 0.0 {
            return 0.0;
        }
        let db = self.target_level_dba - self.reference.full_scale_dba - self.weighting_db(sample_rate_hz);
        10f64.powf(db / 20.0)
    }

    /// Level, in dB(A), that this profile assigns to a noise signal.
    pub fn measure_dba(&self, noise: &[f64], sample_rate_hz: u32) -> f64 {
        let rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
        self.reference.full_scale_dba + 20.0 * rms.log10() + self.weighting_db(sample_rate_hz)
    }
}

/// IEC 61672 A-weighting gain in dB.
pub fn a_weighting_db(f: f64) -> f64 {
    let f2 = f * f;
    let ra = 12194.0f64.powi(2) * f2 * f2
        / ((f2 + 20.6f64.powi(2))
            * ((f2 + 107.7f64.powi(2)) * (f2 + 737.9f64.powi(2))).sqrt()
            * (f2 + 12194.0f64.powi(2)));
    20.0 * ra.log10() + 2.0
}

/// Power-averaged A-weighting over `(0, fs/2]`: the level offset of white
/// noise once A-weighted.
pub fn white_noise_a_weighting_db(sample_rate_hz: u32) -> f64 {
    let nyquist = f64::from(sample_rate_hz) / 2.0;
    let steps = 20_000;
    let mean = (1..=steps)
        .map(|i| 10f64.powf(a_weighting_db(nyquist * i as f64 / steps as f64) / 10.0))
        .sum::<f64>()
        / steps as f64;
    10.0 * mean.log10()
}

/// Adds noise to every channel, scaled so each channel's added noise has
/// exactly the target level. Channels get independent noise.
pub fn overlay_noise(
    audio: &[Vec<f64>],
    noise: &NoiseProfile,
    sample_rate_hz: u32,
    seed: Seed,
) -> Result<Vec<Vec<f64>>> {
    noise.validate()?;
    if audio.is_empty() || audio.iter().any(Vec::is_empty) {
        return Err(Error::EmptyInput("no audio to overlay noise on".into()));
    }
    let rms = noise.target_rms(sample_rate_hz);
    if rms == 0.0 {
        return Ok(audio.to_vec());
    }
    Ok(audio
        .iter()
        .enumerate()
        .map(|(ch, x)| {
            let mut rng = seed.child("overlay", ch as u64).rng();
            let raw: Vec<f64> = match &noise.kind {
                NoiseKind::White => (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
                NoiseKind::RecordedSample { samples } => {
                    let start = rng.gen_range(0..samples.len());
                    (0..x.len()).map(|i| samples[(start + i) % samples.len()]).collect()
                }
            };
            let raw_rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
            let k = if raw_rms > 0.0 { rms / raw_rms } else { 0.0 };
            x.iter().zip(&raw).map(|(s, n)| s + k * n).collect()
        })
        .collect())
}

/// Streaming noise generator with analytic scaling (expected level exact).
#[derive(Debug, Clone)]
pub struct NoiseSource {
    kind: NoiseKind,
    scale: f64,
    rng: rand_chacha::ChaCha8Rng,
    cursor: Vec<usize>,
}

impl NoiseSource {
    pub fn new(noise: &NoiseProfile, sample_rate_hz: u32, channels: usize, seed: Seed) -> Result<Self> {
        noise.validate()?;
        let rms = noise.target_rms(sample_rate_hz);
        let mut rng = seed.rng();
        let (scale, cursor) = match &noise.kind {
            NoiseKind::White => (rms, vec![0; channels]),
            NoiseKind::RecordedSample { samples } => {
                let r = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
                let cursor = (0..channels).map(|_| rng.gen_range(0..samples.len())).collect();
                (rms / r, cursor)
            }
        };
        Ok(NoiseSource {
            kind: noise.kind.clone(),
            scale,
            rng,
            cursor,
        })
    }

    pub fn add_to(&mut self, channel: usize, buf: &mut [f64]) {
        if self.scale == 0.0 {
            return;
        }
        match &self.kind {
            NoiseKind::White => {
                for v in buf.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut self.rng);
                    *v += self.scale * n;
                }
            }
            NoiseKind::RecordedSample { samples } => {
                let c = &mut self.cursor[channel];
                for v in buf.iter_mut() {
                    *v += self.scale * samples[*c];
                    *c = (*c + 1) % samples.len();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub mics: Vec<Vec3>,
    /// Speaker `i` plays band `i` of the frame config.
    pub speakers: Vec<Vec3>,
    pub reflectors: Vec<ReflectorSpec>,
    /// Extra delay added to every path (remounting offset), seconds.
    pub base_delay_jitter_s: f64,
    /// Microphone noise floor, if any.
    pub noise: Option<NoiseProfile>,
    pub direct_path_gain: f64,
    /// Distance at which a unit-amplitude path has unit gain (m).
    pub distance_ref_m: f64,
    /// Unitless transmit gain in [0, 1].
    pub tx_gain: f64,
    pub screen: ScreenGeometry,
}

impl Default for SceneSpec {
    fn default() -> Self {
        default_scene()
    }
}

/// One propagation path for one (speaker, mic) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub delay_samples: f64,
    pub gain: f64,
}

impl SceneSpec {
    pub fn validate(&self, cfg: &FrameConfig) -> Result<()> {
        if self.mics.len() != NUM_MICS {
            return Err(Error::config(format!("scene needs {NUM_MICS} microphones")));
        }
        if self.speakers.len() != cfg.bands.len() {
            return Err(Error::config(format!(
                "scene has {} speakers but the config has {} bands",
                self.speakers.len(),
                cfg.bands.len()
            )));
        }
        if !(self.distance_ref_m > 0.0) || !(0.0..=1.0).contains(&self.tx_gain) {
            return Err(Error::config("distance_ref_m must be > 0 and tx_gain in [0, 1]"));
        }
        if self.direct_path_gain < 0.0 {
            return Err(Error::config("direct_path_gain must be non-negative"));
        }
        for (i, r) in self.reflectors.iter().enumerate() {
            if !(r.amplitude > 0.0 && r.amplitude <= 1.0) {
                return Err(Error::config(format!("reflector {i}: amplitude must be in (0, 1]")));
            }
            if r.radius_gain < 0.0 {
                return Err(Error::config(format!("reflector {i}: negative radius_gain")));
            }
            if r.max_displacement() >= MAX_DISPLACEMENT_M {
                return Err(Error::config(format!(
                    "reflector {i}: gaze displacement reaches {:.2} mm (limit 5 mm)",
                    r.max_displacement() * 1e3
                )));
            }
            if let Some(g) = &r.mic_gains {
                if g.len() != NUM_MICS {
                    return Err(Error::config(format!("reflector {i}: mic_gains needs {NUM_MICS} entries")));
                }
            }
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        self.screen.validate()?;

        let frame_s = cfg.frame_period_s();
        let c = cfg.speed_of_sound_m_s;
        for (s, &spk) in self.speakers.iter().enumerate() {
            for (m, &mic) in self.mics.iter().enumerate() {
                let d = dist(spk, mic);
                if d <= 0.0 {
                    return Err(Error::config(format!("speaker {s} coincides with mic {m}")));
                }
                let mut longest = d;
                for r in &self.reflectors {
                    for gx in [-1.0, 1.0] {
                        for gy in [-1.0, 1.0] {
                            let p = r.position([gx, gy]);
                            let (a, b) = (dist(spk, p), dist(p, mic));
                            if a <= 0.0 || b <= 0.0 {
                                return Err(Error::config("reflector coincides with a transducer"));
                            }
                            longest = longest.max(a + b);
                        }
                    }
                }
                let delay = longest / c + self.base_delay_jitter_s.max(0.0);
                if delay >= frame_s {
                    return Err(Error::config(format!(
                        "path delay {:.3} ms exceeds one frame ({:.3} ms)",
                        delay * 1e3,
                        frame_s * 1e3
                    )));
                }
                if d / c + self.base_delay_jitter_s < 0.0 {
                    return Err(Error::config("remount jitter makes a delay negative"));
                }
            }
        }
        Ok(())
    }

    /// Every propagation path from `speaker` to `mic` at the given
    /// normalized gaze, delays in samples.
    pub fn paths(&self, cfg: &FrameConfig, speaker: usize, mic: usize, gaze: [f64; 2]) -> Vec<PathSample> {
        let fs = f64::from(cfg.sample_rate_hz);
        let c = cfg.speed_of_sound_m_s;
        let spk = self.speakers[speaker];
        let m = self.mics[mic];
        let jitter = self.base_delay_jitter_s * fs;
        let ref2 = self.distance_ref_m * self.distance_ref_m;
        let mut out = Vec::with_capacity(self.reflectors.len() + 1);
        if self.direct_path_gain > 0.0 {
            let d = dist(spk, m);
            out.push(PathSample {
                delay_samples: d / c * fs + jitter,
                gain: self.tx_gain * self.direct_path_gain * ref2 / (d * d),
            });
        }
        for r in &self.reflectors {
            let g = r.mic_gain(mic);
            if g == 0.0 {
                continue;
            }
            let p = r.position(gaze);
            let d = dist(spk, p) + dist(p, m);
            out.push(PathSample {
                delay_samples: d / c * fs + jitter,
                gain: self.tx_gain * r.amplitude * r.radius_gain * g * ref2 / (d * d),
            });
        }
        out
    }

    /// Copy of the scene remounted with a uniform jitter of up to
    /// `max_jitter_samples` in either direction.
    pub fn remounted(&self, cfg: &FrameConfig, max_jitter_samples: f64, seed: Seed) -> SceneSpec {
        let mut s = self.clone();
        let j = if max_jitter_samples > 0.0 {
            seed.rng().gen_range(-max_jitter_samples..=max_jitter_samples)
        } else {
            0.0
        };
        s.base_delay_jitter_s = j / f64::from(cfg.sample_rate_hz);
        s
    }
}

/// Glasses-frame layout used throughout the test suites and the CLI default.
///
/// Speaker 1 (18-21 kHz) sits by the right outer canthus, speaker 2 by the
/// left. M1-M4 ring the right lens (inner-top, outer-top, outer-bottom,
/// inner-bottom) and M5-M8 mirror them on the left.
pub fn default_scene() -> SceneSpec {
    let mirror = |p: Vec3| [-p[0], p[1], p[2]];
    let right_mics = [
        [0.014, 0.013, 0.017],
        [0.050, 0.015, 0.016],
        [0.050, -0.015, 0.016],
        [0.014, -0.013, 0.017],
    ];
    let mut mics: Vec<Vec3> = right_mics.to_vec();
    mics.extend(right_mics.iter().map(|&p| mirror(p)));

    let eye_r: Vec3 = [0.032, 0.0, 0.0];
    let eye_l: Vec3 = mirror(eye_r);
    let add = |a: Vec3, b: Vec3| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let refl = |center: Vec3, gx: Vec3, gy: Vec3, amplitude: f64| ReflectorSpec {
        center,
        radius_gain: 1.0,
        gaze_coupling: [gx, gy],
        amplitude,
        mic_gains: None,
    };
    let mut reflectors = Vec::new();
    for (eye, side) in [(eye_r, 1.0), (eye_l, -1.0)] {
        // Cornea bulge follows the eye rotation.
        reflectors.push(refl(add(eye, [0.0, 0.0, 0.012]), [0.0036, 0.0, -0.0008], [0.0, -0.0024, -0.0005], 0.6));
        // Inner canthus skin is stretched by horizontal gaze.
        reflectors.push(refl(
            add(eye, [-side * 0.013, -0.002, 0.006]),
            [0.0012, 0.0, 0.0006 * side],
            [0.0, -0.0004, 0.0],
            0.5,
        ));
        // Outer canthus.
        reflectors.push(refl(
            add(eye, [side * 0.014, 0.0, 0.005]),
            [0.0008, 0.0, -0.0005 * side],
            [0.0, -0.0003, 0.0],
            0.35,
        ));
        // Upper and lower lids track vertical gaze.
        reflectors.push(refl(add(eye, [0.0, 0.011, 0.008]), [0.0003, 0.0, 0.0], [0.0, -0.0018, 0.0004], 0.45));
        reflectors.push(refl(add(eye, [0.0, -0.011, 0.007]), [0.0002, 0.0, 0.0], [0.0, -0.0010, -0.0003], 0.4));
        // Static cheek and brow.
        reflectors.push(refl(add(eye, [side * 0.004, -0.028, 0.012]), [0.0; 3], [0.0; 3], 0.7));
        reflectors.push(refl(add(eye, [side * 0.002, 0.024, 0.014]), [0.0; 3], [0.0; 3], 0.7));
    }

    SceneSpec {
        mics,
        speakers: vec![[0.060, 0.0, 0.012], [-0.060, 0.0, 0.012]],
        reflectors,
        base_delay_jitter_s: 0.0,
        noise: Some(NoiseProfile::white(33.8)),
        direct_path_gain: 0.25,
        distance_ref_m: 0.04,
        tx_gain: 0.5,
        screen: ScreenGeometry::default(),
    }
}

/// Frame-by-frame renderer for one session.
pub struct SessionSynth {
    scene: SceneSpec,
    cfg: FrameConfig,
    tables: Vec<DelayTable>,
    floor: Option<NoiseSource>,
    extra: Option<NoiseSource>,
    frames: Vec<Vec<f64>>,
}

impl SessionSynth {
    pub fn new(scene: &SceneSpec, cfg: &FrameConfig, seed: Seed) -> Result<Self> {
        cfg.validate()?;
        scene.validate(cfg)?;
        for b in &cfg.bands {
            generate_chirp(b, cfg)?;
        }
        let tables = cfg.bands.iter().map(|b| DelayTable::new(b, cfg)).collect();
        let floor = match &scene.noise {
            Some(n) => Some(NoiseSource::new(n, cfg.sample_rate_hz, NUM_MICS, seed.child("floor", 0))?),
            None => None,
        };
        Ok(SessionSynth {
            scene: scene.clone(),
            cfg: cfg.clone(),
            tables,
            floor,
            extra: None,
            frames: vec![vec![0.0; cfg.frame_len]; NUM_MICS],
        })
    }

    /// Adds an environmental noise overlay on top of the scene's floor.
    pub fn with_overlay(mut self, noise: &NoiseProfile, seed: Seed) -> Result<Self> {
        self.extra = Some(NoiseSource::new(noise, self.cfg.sample_rate_hz, NUM_MICS, seed)?);
        Ok(self)
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    /// Renders the next frame for a gaze point in screen pixels. The returned
    /// slices hold `frame_len` samples per microphone.
    pub fn render_frame(&mut self, gaze_px: [f64; 2]) -> &[Vec<f64>] {
        let gaze = self.scene.screen.normalized(gaze_px);
        let n = self.cfg.frame_len;
        for m in 0..NUM_MICS {
            let mut buf = std::mem::take(&mut self.frames[m]);
            buf.iter_mut().for_each(|v| *v = 0.0);
            for (s, table) in self.tables.iter().enumerate() {
                for path in self.scene.paths(&self.cfg, s, m, gaze) {
                    table.add_delayed(&mut buf[..n], path.delay_samples, path.gain);
                }
            }
            if let Some(f) = &mut self.floor {
                f.add_to(m, &mut buf);
            }
            if let Some(e) = &mut self.extra {
                e.add_to(m, &mut buf);
            }
            self.frames[m] = buf;
        }
        &self.frames
    }
}

/// Oversampling factor of the delay-line tables.
pub const OVERSAMPLE: usize = 32;

/// One period of a band's chirp on a fine grid, for fractional delays.
#[derive(Debug, Clone)]
pub struct DelayTable {
    fine: Vec<f64>,
    frame_len: usize,
}

impl DelayTable {
    pub fn new(band: &crate::fmcw::ChirpBand, cfg: &FrameConfig) -> Self {
        let m = cfg.frame_len * OVERSAMPLE;
        DelayTable {
            fine: (0..m)
                .map(|i| chirp_at(band, cfg, i as f64 / OVERSAMPLE as f64))
                .collect(),
            frame_len: cfg.frame_len,
        }
    }

    /// `buf[i] += gain * tx(i - delay)` with `tx` periodic in `frame_len`.
    pub fn add_delayed(&self, buf: &mut [f64], delay: f64, gain: f64) {
        let m = self.fine.len();
        let pos = (-delay * OVERSAMPLE as f64).rem_euclid(m as f64);
        let whole = pos.floor();
        let frac = pos - whole;
        let base = whole as usize % m;
        for (i, out) in buf.iter_mut().enumerate().take(self.frame_len) {
            let a = (base + i * OVERSAMPLE) % m;
            let b = (a + 1) % m;
            *out += gain * ((1.0 - frac) * self.fine[a] + frac * self.fine[b]);
        }
    }
}

/// Synthesized recording with its per-frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionAudio {
    /// One stream per microphone.
    pub mics: Vec<Vec<f64>>,
    pub labels: Vec<[f64; 2]>,
}

/// Renders one frame per trace point.
pub fn synthesize_session(
    scene: &SceneSpec,
    trace: &GazeTrace,
    cfg: &FrameConfig,
    seed: Seed,
) -> Result<SessionAudio> {
    let mut synth = SessionSynth::new(scene, cfg, seed)?;
    let n = cfg.frame_len;
    let mut mics = vec![Vec::with_capacity(trace.n_frames() * n); NUM_MICS];
    for p in &trace.points {
        let frame = synth.render_frame([p.x_px, p.y_px]);
        for (dst, src) in mics.iter_mut().zip(frame) {
            dst.extend_from_slice(src);
        }
    }
    Ok(SessionAudio {
        mics,
        labels: trace.labels(),
    })
}
