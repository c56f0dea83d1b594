//! On-disk session bundles.
//!
//! A bundle is a directory holding `audio.pcm` (int16 little-endian, 8
//! channels interleaved, frame after frame), `labels.csv` (the gaze trace)
//! and `meta.json` (the simulation setup plus hashes of both data files).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::echo::{EchoStream, OriginPolicy, ProfileSet, ProfileSetup, NUM_MICS};
use crate::error::{Error, Result};
use crate::format::{config_hash, ConfigHash};
use crate::protocol::GazeTrace;
use crate::session::SimulationSetup;
use crate::sim::NoiseProfile;

pub const AUDIO_FILE: &str = "audio.pcm";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "meta.json";
pub const BUNDLE_VERSION: u32 = 1;

/// Default amplitude mapped to int16 full scale.
pub const DEFAULT_FULL_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub format_version: u32,
    pub session_id: u32,
    pub n_channels: usize,
    pub sample_rate_hz: u32,
    pub frame_len: usize,
    pub n_frames: usize,
    /// Sample value stored as 32767.
    pub audio_full_scale: f64,
    pub clipped_samples: u64,
    pub setup: SimulationSetup,
    pub session_seed: u64,
    pub overlay: Option<NoiseProfile>,
    /// Hex SHA-256 of the canonical JSON of `setup`.
    pub config_hash: String,
    pub audio_sha256: String,
    pub labels_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionBundle {
    pub dir: PathBuf,
    pub meta: SessionMeta,
    pub trace: GazeTrace,
}

fn to_i16(v: f64, full_scale: f64) -> (i16, bool) {
    let s = (v / full_scale * 32767.0).round();
    (s.clamp(-32768.0, 32767.0) as i16, !(-32768.0..=32767.0).contains(&s))
}

/// Simulates session `id` of `setup` straight into a bundle directory.
pub fn write_session(
    dir: &Path,
    setup: &SimulationSetup,
    id: u32,
    overlay: Option<&NoiseProfile>,
    full_scale: f64,
) -> Result<SessionBundle> {
    setup.validate()?;
    if !(full_scale > 0.0 && full_scale.is_finite()) {
        return Err(Error::config("audio full scale must be positive"));
    }
    if let Some(n) = overlay {
        n.validate()?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let audio_path = dir.join(AUDIO_FILE);
    let mut out = BufWriter::new(File::create(&audio_path).map_err(|e| Error::io(&audio_path, e))?);
    let mut hasher = Sha256::new();
    let mut clipped = 0u64;
    let mut n_frames = 0usize;
    let frame_len = setup.frame.frame_len;
    let mut buf = Vec::with_capacity(frame_len * NUM_MICS * 2);
    let trace = setup.render(id, overlay, |_, frame| {
        buf.clear();
        for i in 0..frame_len {
            for mic in frame {
                let (s, c) = to_i16(mic[i], full_scale);
                clipped += u64::from(c);
                buf.extend_from_slice(&s.to_le_bytes());
            }
        }
        hasher.update(&buf);
        n_frames += 1;
        out.write_all(&buf).map_err(|e| Error::io(&audio_path, e))
    })?;
    out.flush().map_err(|e| Error::io(&audio_path, e))?;

    let mut labels = Vec::new();
    trace.write_csv(&mut labels)?;
    let labels_path = dir.join(LABELS_FILE);
    fs::write(&labels_path, &labels).map_err(|e| Error::io(&labels_path, e))?;
    // Keep only what the CSV carries so a reload compares equal.
    let trace = GazeTrace::read_csv(labels.as_slice()).map_err(Error::Contract)?;

    let meta = SessionMeta {
        format_version: BUNDLE_VERSION,
        session_id: id,
        n_channels: NUM_MICS,
        sample_rate_hz: setup.frame.sample_rate_hz,
        frame_len,
        n_frames,
        audio_full_scale: full_scale,
        clipped_samples: clipped,
        setup: setup.clone(),
        session_seed: setup.session_seed(id).0,
        overlay: overlay.cloned(),
        config_hash: hex::encode(config_hash(setup)?),
        audio_sha256: hex::encode(hasher.finalize()),
        labels_sha256: hex::encode(Sha256::digest(&labels)),
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::contract(format!("meta encode: {e}")))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(SessionBundle {
        dir: dir.to_path_buf(),
        meta,
        trace,
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Loads and validates a bundle: channel layout, file sizes, hashes and
/// label bounds are all cross-checked against `meta.json`.
pub fn load_session(dir: &Path) -> Result<SessionBundle> {
    let meta_path = dir.join(META_FILE);
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SessionMeta =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let bad = |reason: String| Error::format(&meta_path, reason);
    if meta.format_version != BUNDLE_VERSION {
        return Err(bad(format!("unsupported bundle version {}", meta.format_version)));
    }
    if meta.n_channels != NUM_MICS {
        return Err(bad(format!("declares {} channels, the pipeline needs {NUM_MICS}", meta.n_channels)));
    }
    meta.setup.validate()?;
    if meta.sample_rate_hz != meta.setup.frame.sample_rate_hz || meta.frame_len != meta.setup.frame.frame_len {
        return Err(bad("sample rate or frame length disagrees with the stored setup".into()));
    }
    if hex::encode(config_hash(&meta.setup)?) != meta.config_hash {
        return Err(bad("config hash does not match the stored setup".into()));
    }
    if !(meta.audio_full_scale > 0.0) {
        return Err(bad("audio full scale must be positive".into()));
    }

    let audio_path = dir.join(AUDIO_FILE);
    let expected = meta.n_frames as u64 * meta.frame_len as u64 * meta.n_channels as u64 * 2;
    let size = fs::metadata(&audio_path).map_err(|e| Error::io(&audio_path, e))?.len();
    if size != expected {
        return Err(Error::format(
            &audio_path,
            format!("{size} bytes, meta implies {expected} ({} frames of {} channels)", meta.n_frames, meta.n_channels),
        ));
    }
    let mut hasher = Sha256::new();
    let mut reader = BufReader::new(open(&audio_path)?);
    let mut chunk = vec![0u8; 1 << 16];
    loop {
        let k = reader.read(&mut chunk).map_err(|e| Error::io(&audio_path, e))?;
        if k == 0 {
            break;
        }
        hasher.update(&chunk[..k]);
    }
    if hex::encode(hasher.finalize()) != meta.audio_sha256 {
        return Err(Error::format(&audio_path, "audio hash does not match meta.json"));
    }

    let labels_path = dir.join(LABELS_FILE);
    let labels = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    if hex::encode(Sha256::digest(&labels)) != meta.labels_sha256 {
        return Err(Error::format(&labels_path, "labels hash does not match meta.json"));
    }
    let trace = GazeTrace::read_csv(labels.as_slice()).map_err(|e| Error::format(&labels_path, e))?;
    if trace.n_frames() > meta.n_frames {
        return Err(Error::format(
            &labels_path,
            format!("labels reach frame {} but the audio has {} frames", trace.n_frames() - 1, meta.n_frames),
        ));
    }
    Ok(SessionBundle {
        dir: dir.to_path_buf(),
        meta,
        trace,
    })
}

impl SessionBundle {
    /// The stored config hash as bytes, for artifacts derived from this bundle.
    pub fn config_hash(&self) -> Result<ConfigHash> {
        let mut h = [0u8; 32];
        hex::decode_to_slice(&self.meta.config_hash, &mut h)
            .map_err(|e| Error::format(self.dir.join(META_FILE), format!("config hash: {e}")))?;
        Ok(h)
    }

    pub fn audio_path(&self) -> PathBuf {
        self.dir.join(AUDIO_FILE)
    }

    /// Iterates over the audio, one `frame_len` buffer per mic.
    pub fn frames(&self) -> Result<FrameReader> {
        let path = self.audio_path();
        Ok(FrameReader {
            reader: BufReader::new(open(&path)?),
            path,
            frame_len: self.meta.frame_len,
            channels: self.meta.n_channels,
            scale: self.meta.audio_full_scale / 32767.0,
            remaining: self.meta.n_frames,
            raw: vec![0u8; self.meta.frame_len * self.meta.n_channels * 2],
        })
    }

    /// Streams the audio frame by frame.
    pub fn for_each_frame<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[Vec<f64>]) -> Result<()>,
    {
        for (t, frame) in self.frames()?.enumerate() {
            f(t, &frame?)?;
        }
        Ok(())
    }

    /// Echo profiles of the whole recording.
    pub fn profiles(&self, filtered: bool) -> Result<ProfileSet> {
        let setup = ProfileSetup::new(&self.meta.setup.frame, filtered)?;
        let mut stream = EchoStream::new(setup, OriginPolicy::DirectPath)?;
        self.for_each_frame(|_, frame| {
            let refs: Vec<&[f64]> = frame.iter().map(Vec::as_slice).collect();
            stream.push_frame(&refs).map(|_| ())
        })?;
        stream.finish()
    }

    /// Wraps the PCM data in a standard 44-byte WAV header.
    pub fn export_wav(&self, path: &Path) -> Result<()> {
        let data_len = u32::try_from(fs::metadata(self.audio_path()).map_err(|e| Error::io(self.audio_path(), e))?.len())
            .map_err(|_| Error::Unsupported("audio too large for a WAV file".into()))?;
        let ch = self.meta.n_channels as u16;
        let rate = self.meta.sample_rate_hz;
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let mut header = Vec::with_capacity(44);
        header.extend_from_slice(b"RIFF");
        header.extend_from_slice(&(36 + data_len).to_le_bytes());
        header.extend_from_slice(b"WAVEfmt ");
        header.extend_from_slice(&16u32.to_le_bytes());
        header.extend_from_slice(&1u16.to_le_bytes());
        header.extend_from_slice(&ch.to_le_bytes());
        header.extend_from_slice(&rate.to_le_bytes());
        header.extend_from_slice(&(rate * u32::from(ch) * 2).to_le_bytes());
        header.extend_from_slice(&(ch * 2).to_le_bytes());
        header.extend_from_slice(&16u16.to_le_bytes());
        header.extend_from_slice(b"data");
        header.extend_from_slice(&data_len.to_le_bytes());
        w.write_all(&header).map_err(|e| Error::io(path, e))?;
        let mut src = open(&self.audio_path())?;
        std::io::copy(&mut src, &mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub struct FrameReader {
    reader: BufReader<File>,
    path: PathBuf,
    frame_len: usize,
    channels: usize,
    scale: f64,
    remaining: usize,
    raw: Vec<u8>,
}

impl Iterator for FrameReader {
    type Item = Result<Vec<Vec<f64>>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        if let Err(e) = self.reader.read_exact(&mut self.raw) {
            self.remaining = 0;
            return Some(Err(Error::io(&self.path, e)));
        }
        let ch = self.channels;
        let mut frame = vec![vec![0.0; self.frame_len]; ch];
        for (k, pair) in self.raw.chunks_exact(2).enumerate() {
            frame[k % ch][k / ch] = f64::from(i16::from_le_bytes([pair[0], pair[1]])) * self.scale;
        }
        Some(Ok(frame))
    }
}
