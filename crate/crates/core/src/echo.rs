//! Echo profiles: per-frame circular cross-correlation of received audio
//! against the transmitted chirp, cropped to the range window of interest,
//! and assembly of sliding-window model instances.
//!
//! Row `k` of a raw correlation column is a round-trip delay of `k` samples.
//! Profiles keep only `crop_full_px` rows starting at the direct-path
//! origin, found as the row with the most correlation energy over the first
//! second of data, summed over every channel.

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::filter::{design_butterworth, BandPassSpec, FilterState, SosFilter, DEFAULT_ORDER};
use crate::fmcw::{generate_chirp, FrameConfig};
use crate::seed::Seed;

/// Microphones on the frame.
pub const NUM_MICS: usize = 8;

/// A (microphone, band) pair. Both ids are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ChannelId {
    pub mic: u8,
    pub band: u8,
}

impl ChannelId {
    /// Band-major channel ordering: all mics of band 1, then band 2.
    pub fn from_index(index: usize) -> Self {
        ChannelId {
            mic: (index % NUM_MICS) as u8 + 1,
            band: (index / NUM_MICS) as u8 + 1,
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.band - 1) * NUM_MICS + usize::from(self.mic - 1)
    }
}

/// Brute-force circular cross-correlation, `c[k] = sum_n rx[(n + k) % N] * tx[n]`.
///
/// O(N^2); kept as the reference every faster path is checked against.
pub fn cross_correlate_frame(rx: &[f64], tx: &[f64]) -> Result<Vec<f64>> {
    if rx.len() != tx.len() {
        return Err(Error::contract(format!(
            "rx frame has {} samples but tx frame has {}",
            rx.len(),
            tx.len()
        )));
    }
    let n = rx.len();
    Ok((0..n)
        .map(|k| {
            let (head, tail) = rx.split_at(k);
            let a: f64 = tail.iter().zip(tx).map(|(r, t)| r * t).sum();
            let b: f64 = head.iter().zip(&tx[n - k..]).map(|(r, t)| r * t).sum();
            a + b
        })
        .collect())
}

/// FFT circular correlation against one fixed transmit frame.
pub struct FftCorrelator {
    tx_conj: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl FftCorrelator {
    pub fn new(tx: &[f64]) -> Self {
        let n = tx.len();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::default(); scratch_len];
        let mut tx_conj: Vec<Complex64> = tx.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fwd.process_with_scratch(&mut tx_conj, &mut scratch);
        let scale = 1.0 / n as f64;
        tx_conj.iter_mut().for_each(|c| *c = c.conj() * scale);
        FftCorrelator {
            tx_conj,
            fwd,
            inv,
            buf: vec![Complex64::default(); n],
            scratch,
        }
    }

    pub fn len(&self) -> usize {
        self.tx_conj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx_conj.is_empty()
    }

    pub fn correlate_into(&mut self, rx: &[f64], out: &mut [f64]) {
        assert_eq!(rx.len(), self.len(), "rx frame length");
        assert_eq!(out.len(), self.len(), "output length");
        for (b, &v) in self.buf.iter_mut().zip(rx) {
            *b = Complex64::new(v, 0.0);
        }
        self.fwd.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (b, t) in self.buf.iter_mut().zip(&self.tx_conj) {
            *b *= t;
        }
        self.inv.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (o, b) in out.iter_mut().zip(&self.buf) {
            *o = b.re;
        }
    }

    /// Squared envelope of the correlation, added into `acc`. The envelope
    /// is the magnitude of the analytic correlation, so unlike the signed
    /// correlation it does not ripple at the carrier frequency.
    pub fn add_envelope_energy(&mut self, rx: &[f64], acc: &mut [f64]) {
        let n = self.len();
        assert_eq!(rx.len(), n, "rx frame length");
        assert_eq!(acc.len(), n, "accumulator length");
        for (b, &v) in self.buf.iter_mut().zip(rx) {
            *b = Complex64::new(v, 0.0);
        }
        self.fwd.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (k, (b, t)) in self.buf.iter_mut().zip(&self.tx_conj).enumerate() {
            let w = if k == 0 || 2 * k == n {
                1.0
            } else if 2 * k < n {
                2.0
            } else {
                0.0
            };
            *b *= t * w;
        }
        self.inv.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (a, b) in acc.iter_mut().zip(&self.buf) {
            *a += b.norm_sqr();
        }
    }

    pub fn correlate(&mut self, rx: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.correlate_into(rx, &mut out);
        out
    }
}

/// One channel's echo image, `rows x cols`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoProfile {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub channel: ChannelId,
    /// Absolute delay (samples) of row 0.
    pub range_origin_px: i32,
}

impl EchoProfile {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.at(r, col)).collect()
    }

    /// Row of the largest value in a column (first on ties).
    pub fn argmax_row(&self, col: usize) -> usize {
        let mut best = 0;
        for r in 1..self.rows {
            if self.at(r, col) > self.at(best, col) {
                best = r;
            }
        }
        best
    }

    /// Per-column argmax expressed as absolute delay in samples.
    pub fn argmax_delays(&self) -> Vec<i64> {
        (0..self.cols)
            .map(|c| self.argmax_row(c) as i64 + i64::from(self.range_origin_px))
            .collect()
    }
}

/// Frame-to-frame difference: column `j` of the result is `col[j+1] - col[j]`.
pub fn differential_profile(p: &EchoProfile) -> Result<EchoProfile> {
    if p.cols < 2 {
        return Err(Error::contract("differential profile needs at least two frames"));
    }
    let cols = p.cols - 1;
    let mut data = Vec::with_capacity(p.rows * cols);
    for r in 0..p.rows {
        let row = &p.data[r * p.cols..(r + 1) * p.cols];
        data.extend(row.windows(2).map(|w| w[1] - w[0]));
    }
    Ok(EchoProfile {
        rows: p.rows,
        cols,
        data,
        channel: p.channel,
        range_origin_px: p.range_origin_px,
    })
}

/// How the crop origin is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriginPolicy {
    /// Row with the most correlation-envelope energy over the first
    /// second, summed over channels.
    DirectPath,
    Fixed(usize),
}

/// Per-band transmit reference and optional band-pass filter.
#[derive(Debug, Clone)]
pub struct BandReference {
    pub band_id: u8,
    pub tx: Vec<f64>,
    pub filter: Option<SosFilter>,
}

/// Everything needed to turn raw microphone frames into profile columns.
#[derive(Debug, Clone)]
pub struct ProfileSetup {
    pub cfg: FrameConfig,
    pub bands: Vec<BandReference>,
    /// Store `|c|` instead of signed correlation.
    pub magnitude: bool,
}

impl ProfileSetup {
    /// Chirp references for every configured band, optionally band-pass
    /// filtered with the default Butterworth design.
    pub fn new(cfg: &FrameConfig, filtered: bool) -> Result<Self> {
        cfg.validate()?;
        let mut bands = Vec::with_capacity(cfg.bands.len());
        for (i, band) in cfg.bands.iter().enumerate() {
            let filter = if filtered {
                Some(design_butterworth(&BandPassSpec {
                    low_cut_hz: band.f_start_hz,
                    high_cut_hz: band.f_end_hz,
                    order: DEFAULT_ORDER,
                    sample_rate_hz: cfg.sample_rate_hz,
                })?)
            } else {
                None
            };
            bands.push(BandReference {
                band_id: i as u8 + 1,
                tx: generate_chirp(band, cfg)?,
                filter,
            });
        }
        Ok(ProfileSetup {
            cfg: cfg.clone(),
            bands,
            magnitude: false,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.bands.len() * NUM_MICS
    }

    /// Frames used for direct-path origin detection.
    pub fn origin_frames(&self) -> usize {
        (self.cfg.refresh_rate().floor() as usize).max(1)
    }
}

/// All channels of one recording, sharing a crop origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub profiles: Vec<EchoProfile>,
}

impl ProfileSet {
    pub fn n_frames(&self) -> usize {
        self.profiles.first().map_or(0, |p| p.cols)
    }

    pub fn rows(&self) -> usize {
        self.profiles.first().map_or(0, |p| p.rows)
    }

    pub fn origin(&self) -> i32 {
        self.profiles.first().map_or(0, |p| p.range_origin_px)
    }
}

/// Streaming profile computation over consecutive multi-mic frames.
///
/// Columns are buffered uncropped until the origin is known, then every
/// later frame is cropped on arrival.
pub struct EchoStream {
    setup: ProfileSetup,
    correlators: Vec<FftCorrelator>,
    states: Vec<FilterState>,
    policy: OriginPolicy,
    origin: Option<usize>,
    pending: Vec<Vec<f64>>,
    columns: Vec<Vec<f32>>,
    frames: usize,
    /// Envelope energy per lag, summed over channels until the origin is set.
    energy: Vec<f64>,
    scratch: Vec<f64>,
    corr: Vec<f64>,
}

impl EchoStream {
    pub fn new(setup: ProfileSetup, policy: OriginPolicy) -> Result<Self> {
        let n = setup.cfg.frame_len;
        if let OriginPolicy::Fixed(o) = policy {
            if o >= n {
                return Err(Error::config(format!("origin {o} outside frame of {n}")));
            }
        }
        let mut correlators = Vec::new();
        let mut states = Vec::new();
        for band in &setup.bands {
            for _ in 0..NUM_MICS {
                correlators.push(FftCorrelator::new(&band.tx));
                if let Some(f) = &band.filter {
                    states.push(f.state());
                }
            }
        }
        let n_ch = setup.n_channels();
        Ok(EchoStream {
            origin: match policy {
                OriginPolicy::Fixed(o) => Some(o),
                OriginPolicy::DirectPath => None,
            },
            policy,
            correlators,
            states,
            pending: Vec::new(),
            columns: vec![Vec::new(); n_ch],
            frames: 0,
            energy: vec![0.0; n],
            scratch: vec![0.0; n],
            corr: vec![0.0; n],
            setup,
        })
    }

    pub fn setup(&self) -> &ProfileSetup {
        &self.setup
    }

    pub fn origin(&self) -> Option<usize> {
        self.origin
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Raw (uncropped) correlation of every channel for one frame.
    /// `mics[m]` holds `frame_len` samples of microphone `m`.
    pub fn correlate_frame(&mut self, mics: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.correlate_inner(mics, None)
    }

    /// As [`EchoStream::correlate_frame`], also adding every channel's
    /// squared correlation envelope into `energy` for origin detection.
    pub fn correlate_frame_with_energy(&mut self, mics: &[&[f64]], energy: &mut [f64]) -> Result<Vec<Vec<f64>>> {
        self.correlate_inner(mics, Some(energy))
    }

    fn correlate_inner(&mut self, mics: &[&[f64]], mut energy: Option<&mut [f64]>) -> Result<Vec<Vec<f64>>> {
        let n = self.setup.cfg.frame_len;
        if mics.len() != NUM_MICS || mics.iter().any(|m| m.len() != n) {
            return Err(Error::contract(format!(
                "expected {NUM_MICS} microphone frames of {n} samples"
            )));
        }
        let mut out = Vec::with_capacity(self.setup.n_channels());
        let mut state_idx = 0;
        for (b, band) in self.setup.bands.iter().enumerate() {
            for (m, mic) in mics.iter().enumerate() {
                self.scratch.copy_from_slice(mic);
                if let Some(f) = &band.filter {
                    self.states[state_idx].process_in_place(f, &mut self.scratch);
                    state_idx += 1;
                }
                let ch = b * NUM_MICS + m;
                if let Some(e) = energy.as_deref_mut() {
                    self.correlators[ch].add_envelope_energy(&self.scratch, e);
                }
                self.correlators[ch].correlate_into(&self.scratch, &mut self.corr);
                let col = if self.setup.magnitude {
                    self.corr.iter().map(|v| v.abs()).collect()
                } else {
                    self.corr.clone()
                };
                out.push(col);
            }
        }
        Ok(out)
    }

    /// Feeds one frame; returns the number of cropped columns now available.
    pub fn push_frame(&mut self, mics: &[&[f64]]) -> Result<usize> {
        let cols = if self.origin.is_none() {
            let mut energy = std::mem::take(&mut self.energy);
            let cols = self.correlate_frame_with_energy(mics, &mut energy);
            self.energy = energy;
            cols?
        } else {
            self.correlate_frame(mics)?
        };
        self.frames += 1;
        match self.origin {
            Some(origin) => {
                for (ch, col) in cols.iter().enumerate() {
                    self.crop_into(ch, col, origin);
                }
            }
            None => {
                self.pending.extend(cols);
                if self.frames >= self.setup.origin_frames() {
                    self.resolve_origin();
                }
            }
        }
        Ok(self.columns[0].len() / self.setup.cfg.crop_full_px)
    }

    fn crop_into(&mut self, ch: usize, col: &[f64], origin: usize) {
        let n = col.len();
        let dst = &mut self.columns[ch];
        for r in 0..self.setup.cfg.crop_full_px {
            dst.push(col[(origin + r) % n] as f32);
        }
    }

    fn resolve_origin(&mut self) {
        let best = argmax(&self.energy);
        self.origin = Some(best);
        let n_ch = self.setup.n_channels();
        let pending = std::mem::take(&mut self.pending);
        for (i, col) in pending.iter().enumerate() {
            self.crop_into(i % n_ch, col, best);
        }
    }

    /// Finishes the stream. Fails if no complete frame was seen.
    pub fn finish(mut self) -> Result<ProfileSet> {
        if self.frames == 0 {
            return Err(Error::EmptyInput("stream shorter than one frame".into()));
        }
        if self.origin.is_none() {
            self.resolve_origin();
        }
        let origin = self.origin.unwrap_or(0);
        debug_assert!(matches!(self.policy, OriginPolicy::DirectPath) || origin < self.setup.cfg.frame_len);
        let rows = self.setup.cfg.crop_full_px;
        let cols = self.frames;
        let profiles = self
            .columns
            .into_iter()
            .enumerate()
            .map(|(ch, col_major)| {
                // Stored column-major while streaming; transpose to rows.
                let mut data = vec![0.0f32; rows * cols];
                for c in 0..cols {
                    for r in 0..rows {
                        data[r * cols + c] = col_major[c * rows + r];
                    }
                }
                EchoProfile {
                    rows,
                    cols,
                    data,
                    channel: ChannelId::from_index(ch),
                    range_origin_px: origin as i32,
                }
            })
            .collect();
        Ok(ProfileSet { profiles })
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(x: &[f64]) -> usize {
    (0..x.len()).fold(0, |b, k| if x[k] > x[b] { k } else { b })
}

/// Computes all channel profiles from whole-recording microphone streams.
/// Trailing samples that do not fill a frame are dropped.
pub fn compute_echo_profiles(
    mics: &[Vec<f64>],
    setup: &ProfileSetup,
    policy: OriginPolicy,
) -> Result<ProfileSet> {
    let n = setup.cfg.frame_len;
    if mics.len() != NUM_MICS {
        return Err(Error::contract(format!("expected {NUM_MICS} microphone streams")));
    }
    let len = mics.iter().map(Vec::len).min().unwrap_or(0);
    let n_frames = len / n;
    if n_frames == 0 {
        return Err(Error::EmptyInput("stream shorter than one frame".into()));
    }
    let mut stream = EchoStream::new(setup.clone(), policy)?;
    for f in 0..n_frames {
        let frame: Vec<&[f64]> = mics.iter().map(|m| &m[f * n..(f + 1) * n]).collect();
        stream.push_frame(&frame)?;
    }
    stream.finish()
}

/// Single-channel profile; the origin is this channel's own strongest row
/// unless fixed.
pub fn compute_echo_profile(
    rx: &[f64],
    tx: &[f64],
    cfg: &FrameConfig,
    filter: Option<&SosFilter>,
    policy: OriginPolicy,
) -> Result<EchoProfile> {
    let n = cfg.frame_len;
    if tx.len() != n {
        return Err(Error::contract("tx frame length differs from frame_len"));
    }
    let n_frames = rx.len() / n;
    if n_frames == 0 {
        return Err(Error::EmptyInput("stream shorter than one frame".into()));
    }
    let mut audio = rx[..n_frames * n].to_vec();
    if let Some(f) = filter {
        f.state().process_in_place(f, &mut audio);
    }
    let mut corr = FftCorrelator::new(tx);
    let raw: Vec<Vec<f64>> = audio.chunks_exact(n).map(|fr| corr.correlate(fr)).collect();
    let origin = match policy {
        OriginPolicy::Fixed(o) => o % n,
        OriginPolicy::DirectPath => {
            let head = n_frames.min((cfg.refresh_rate().floor() as usize).max(1));
            let mut energy = vec![0.0; n];
            for fr in audio.chunks_exact(n).take(head) {
                corr.add_envelope_energy(fr, &mut energy);
            }
            argmax(&energy)
        }
    };
    let rows = cfg.crop_full_px;
    let mut data = vec![0.0f32; rows * n_frames];
    for (c, col) in raw.iter().enumerate() {
        for r in 0..rows {
            data[r * n_frames + c] = col[(origin + r) % n] as f32;
        }
    }
    Ok(EchoProfile {
        rows,
        cols: n_frames,
        data,
        channel: ChannelId { mic: 1, band: 1 },
        range_origin_px: origin as i32,
    })
}

/// Dense `[frames x rows x channels]` tensor stored channel-major
/// (channel, then frame, then row), which is also the model's feature order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub frames: usize,
    pub rows: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(frames: usize, rows: usize, channels: usize) -> Self {
        Tensor3 {
            frames,
            rows,
            channels,
            data: vec![0.0; frames * rows * channels],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.rows, self.channels]
    }

    pub fn index(&self, frame: usize, row: usize, channel: usize) -> usize {
        (channel * self.frames + frame) * self.rows + row
    }

    pub fn at(&self, frame: usize, row: usize, channel: usize) -> f32 {
        self.data[self.index(frame, row, channel)]
    }

    /// Channel owning a flattened feature index.
    pub fn channel_of_feature(&self, feature: usize) -> usize {
        feature / (self.frames * self.rows)
    }
}

/// One model input plus its screen-pixel label.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeInstance {
    pub tensor: Tensor3,
    pub label: [f64; 2],
    pub session_id: u32,
    /// Frame index of the newest column.
    pub t_end: usize,
}

impl GazeInstance {
    pub fn features(&self) -> &[f32] {
        &self.tensor.data
    }

    /// First frame covered by the window.
    pub fn t_start(&self) -> usize {
        self.t_end + 1 - self.tensor.frames
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AssemblyOptions {
    /// Random contiguous `crop_used_px` slice per instance instead of the centre.
    pub augment: bool,
    pub seed: Seed,
    pub session_id: u32,
    /// Emit every `stride`-th window end position (1 = all of them).
    pub stride: usize,
    /// First window end position considered; clamped up to `window_frames - 1`.
    pub first_end: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions {
            augment: false,
            seed: Seed(0),
            session_id: 0,
            stride: 1,
            first_end: 0,
        }
    }
}

/// Row offset into the `crop_full_px` rows for one instance.
pub fn crop_offset(cfg: &FrameConfig, opts: &AssemblyOptions, t_end: usize) -> usize {
    let spare = cfg.crop_full_px - cfg.crop_used_px;
    if opts.augment {
        opts.seed
            .child("augment", u64::from(opts.session_id))
            .child("instance", t_end as u64)
            .rng()
            .gen_range(0..=spare)
    } else {
        spare / 2
    }
}

/// Builds one instance per valid window end position `t >= window_frames - 1`.
///
/// `labels[t]` is the gaze at frame `t`. Fewer frames than one window gives
/// an empty list.
pub fn assemble_instances(
    set: &ProfileSet,
    labels: &[[f64; 2]],
    cfg: &FrameConfig,
    opts: &AssemblyOptions,
) -> Result<Vec<GazeInstance>> {
    let window = cfg.window_frames();
    let n_frames = set.n_frames();
    if set.profiles.iter().any(|p| p.cols != n_frames) {
        return Err(Error::contract("profiles have unequal frame counts"));
    }
    if set.profiles.iter().any(|p| p.rows != cfg.crop_full_px) {
        return Err(Error::contract("profile rows differ from crop_full_px"));
    }
    if opts.stride == 0 {
        return Err(Error::config("instance stride must be positive"));
    }
    if n_frames < window {
        return Ok(Vec::new());
    }
    if labels.len() < n_frames {
        return Err(Error::contract(format!(
            "label trace covers {} frames, profiles have {n_frames}",
            labels.len()
        )));
    }
    let first = opts.first_end.max(window - 1);
    Ok((first..n_frames)
        .step_by(opts.stride)
        .map(|t| window_instance(set, cfg, t, crop_offset(cfg, opts, t), labels[t], opts.session_id))
        .collect())
}

/// The window ending at frame `t_end`, rows `offset..offset + crop_used_px`.
pub fn window_instance(
    set: &ProfileSet,
    cfg: &FrameConfig,
    t_end: usize,
    offset: usize,
    label: [f64; 2],
    session_id: u32,
) -> GazeInstance {
    let window = cfg.window_frames();
    let rows = cfg.crop_used_px;
    let mut tensor = Tensor3::zeros(window, rows, set.profiles.len());
    let t0 = t_end + 1 - window;
    let mut i = 0;
    for p in &set.profiles {
        for f in 0..window {
            for r in 0..rows {
                tensor.data[i] = p.data[(offset + r) * p.cols + t0 + f];
                i += 1;
            }
        }
    }
    GazeInstance {
        tensor,
        label,
        session_id,
        t_end,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn chirp() -> (FrameConfig, Vec<f64>) {
        let cfg = FrameConfig::default();
        let tx = generate_chirp(&cfg.bands[0], &cfg).unwrap();
        (cfg, tx)
    }

    fn shift(x: &[f64], d: usize) -> Vec<f64> {
        let n = x.len();
        (0..n).map(|i| x[(i + n - d % n) % n]).collect()
    }

    fn argmax(x: &[f64]) -> usize {
        (0..x.len()).fold(0, |b, k| if x[k] > x[b] { k } else { b })
    }

    #[test]
    fn autocorrelation_peaks_at_zero() {
        let (_, tx) = chirp();
        assert_eq!(argmax(&cross_correlate_frame(&tx, &tx).unwrap()), 0);
    }

    #[test]
    fn shifted_echo_peak() {
        let (_, tx) = chirp();
        let rx: Vec<f64> = shift(&tx, 17).iter().map(|v| 0.5 * v).collect();
        let c = cross_correlate_frame(&rx, &tx).unwrap();
        let energy: f64 = tx.iter().map(|v| v * v).sum();
        assert_eq!(argmax(&c), 17);
        assert!((c[17] - 0.5 * energy).abs() < 1e-9 * energy);
    }

    #[test]
    fn two_echoes_in_noise() {
        let (_, tx) = chirp();
        let a = shift(&tx, 10);
        let b = shift(&tx, 40);
        let clean: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 0.8 * p + 0.3 * q).collect();
        let p_sig = clean.iter().map(|v| v * v).sum::<f64>() / 600.0;
        let sigma = (p_sig / 100.0).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, sigma).unwrap();
        let rx: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let c = cross_correlate_frame(&rx, &tx).unwrap();
        let is_local_max = |k: usize| c[k] > c[k - 1] && c[k] > c[k + 1];
        assert!(is_local_max(10) && is_local_max(40));
        assert!(c[10] > c[40]);
        assert_eq!(argmax(&c), 10);
    }

    #[test]
    fn length_mismatch_is_contract_violation() {
        assert!(matches!(
            cross_correlate_frame(&[0.0; 4], &[0.0; 5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fft_matches_brute_force() {
        let (_, tx) = chirp();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rx: Vec<f64> = (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let brute = cross_correlate_frame(&rx, &tx).unwrap();
        let fast = FftCorrelator::new(&tx).correlate(&rx);
        let scale = brute.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in brute.iter().zip(&fast) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn static_scene_gives_constant_argmax() {
        let (cfg, tx) = chirp();
        let rx: Vec<f64> = tx.iter().copied().cycle().take(6_000).collect();
        let p = compute_echo_profile(&rx, &tx, &cfg, None, OriginPolicy::DirectPath).unwrap();
        assert_eq!((p.rows, p.cols), (70, 10));
        let rows: Vec<usize> = (0..10).map(|c| p.argmax_row(c)).collect();
        assert!(rows.iter().all(|&r| r == rows[0]));
    }

    #[test]
    fn moving_reflector_tracks_one_row_per_frame() {
        let (cfg, tx) = chirp();
        let mut rx = Vec::new();
        for j in 0..20 {
            rx.extend(shift(&tx, 5 + j));
        }
        let p = compute_echo_profile(&rx, &tx, &cfg, None, OriginPolicy::Fixed(0)).unwrap();
        let rows: Vec<usize> = (0..20).map(|c| p.argmax_row(c)).collect();
        assert!(rows.windows(2).all(|w| w[1] == w[0] + 1), "{rows:?}");
        assert_eq!(p.argmax_delays()[0], 5);
    }

    #[test]
    fn short_stream_is_empty_input() {
        let (cfg, tx) = chirp();
        let err = compute_echo_profile(&tx[..599], &tx, &cfg, None, OriginPolicy::DirectPath);
        assert!(matches!(err, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn trailing_partial_frame_dropped() {
        let (cfg, tx) = chirp();
        let rx: Vec<f64> = tx.iter().copied().cycle().take(1_500).collect();
        let p = compute_echo_profile(&rx, &tx, &cfg, None, OriginPolicy::DirectPath).unwrap();
        assert_eq!(p.cols, 2);
    }

    fn synthetic_set(frames: usize) -> ProfileSet {
        let profiles = (0..16)
            .map(|ch| EchoProfile {
                rows: 70,
                cols: frames,
                data: (0..70 * frames).map(|i| (i * 31 + ch * 7) as f32 % 13.0).collect(),
                channel: ChannelId::from_index(ch),
                range_origin_px: 3,
            })
            .collect();
        ProfileSet { profiles }
    }

    #[test]
    fn instance_counts_and_shape() {
        let cfg = FrameConfig::default();
        let opts = AssemblyOptions::default();
        let one = assemble_instances(&synthetic_set(26), &[[1.0, 2.0]; 26], &cfg, &opts).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].tensor.shape(), [26, 60, 16]);
        assert_eq!(one[0].label, [1.0, 2.0]);
        assert!(assemble_instances(&synthetic_set(25), &[[0.0; 2]; 25], &cfg, &opts)
            .unwrap()
            .is_empty());
        let many = assemble_instances(&synthetic_set(126), &[[0.0; 2]; 126], &cfg, &opts).unwrap();
        assert_eq!(many.len(), 101);
        assert_eq!(many[0].t_end, 25);
        assert_eq!(many[100].t_end, 125);
    }

    #[test]
    fn instance_layout_is_channel_major() {
        let cfg = FrameConfig::default();
        let set = synthetic_set(30);
        let inst = &assemble_instances(&set, &[[0.0; 2]; 30], &cfg, &AssemblyOptions::default())
            .unwrap()[2];
        // t_end = 27 -> window frames 2..=27, centre rows 5..65.
        for (f, r, ch) in [(0, 0, 0), (25, 59, 15), (3, 17, 9)] {
            assert_eq!(inst.tensor.at(f, r, ch), set.profiles[ch].at(5 + r, 2 + f));
        }
        assert_eq!(inst.tensor.channel_of_feature(26 * 60 * 9 + 5), 9);
    }

    #[test]
    fn augmentation_with_centre_offset_equals_plain() {
        let cfg = FrameConfig::default();
        let set = synthetic_set(80);
        let labels = [[0.0; 2]; 80];
        let plain = assemble_instances(&set, &labels, &cfg, &AssemblyOptions::default()).unwrap();
        let aug_opts = AssemblyOptions {
            augment: true,
            seed: Seed(99),
            ..Default::default()
        };
        let aug = assemble_instances(&set, &labels, &cfg, &aug_opts).unwrap();
        let mut seen_centre = 0;
        let mut offsets = std::collections::BTreeSet::new();
        for (p, a) in plain.iter().zip(&aug) {
            let off = crop_offset(&cfg, &aug_opts, a.t_end);
            offsets.insert(off);
            if off == 5 {
                assert_eq!(p, a);
                seen_centre += 1;
            } else {
                assert_ne!(p.tensor, a.tensor);
            }
        }
        assert!(seen_centre > 0);
        assert!(offsets.len() > 5 && *offsets.iter().max().unwrap() <= 10);
        // Reproducible.
        assert_eq!(aug, assemble_instances(&set, &labels, &cfg, &aug_opts).unwrap());
    }

    #[test]
    fn short_label_trace_rejected() {
        let cfg = FrameConfig::default();
        let r = assemble_instances(&synthetic_set(30), &[[0.0; 2]; 29], &cfg, &AssemblyOptions::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn differential_static_and_single_change() {
        let p = EchoProfile {
            rows: 3,
            cols: 5,
            data: vec![1.0; 15],
            channel: ChannelId { mic: 1, band: 1 },
            range_origin_px: 0,
        };
        let d = differential_profile(&p).unwrap();
        assert_eq!(d.cols, 4);
        assert!(d.data.iter().all(|&v| v == 0.0));
        let mut q = p.clone();
        q.data[1 * 5 + 2] = 4.0;
        let d = differential_profile(&q).unwrap();
        let nonzero_cols: std::collections::BTreeSet<usize> =
            (0..d.rows * d.cols).filter(|&i| d.data[i] != 0.0).map(|i| i % d.cols).collect();
        assert_eq!(nonzero_cols.into_iter().collect::<Vec<_>>(), vec![1, 2]);
        let single = EchoProfile { cols: 1, data: vec![0.0; 3], ..p };
        assert!(matches!(differential_profile(&single), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_ids_round_trip() {
        for i in 0..16 {
            assert_eq!(ChannelId::from_index(i).index(), i);
        }
        assert_eq!(ChannelId::from_index(9), ChannelId { mic: 2, band: 2 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn shift_covariance(d in 0usize..600, seed in 0u64..1_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tx: Vec<f64> = (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rx: Vec<f64> = (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = argmax(&cross_correlate_frame(&rx, &tx).unwrap());
            let moved = argmax(&cross_correlate_frame(&shift(&rx, d), &tx).unwrap());
            prop_assert_eq!(moved, (base + d) % 600);
        }

        #[test]
        fn scale_equivariance(alpha in 0.01f64..100.0, d in 0usize..600) {
            let (_, tx) = chirp();
            let rx = shift(&tx, d);
            let c = cross_correlate_frame(&rx, &tx).unwrap();
            let scaled: Vec<f64> = rx.iter().map(|v| alpha * v).collect();
            let cs = cross_correlate_frame(&scaled, &tx).unwrap();
            prop_assert_eq!(argmax(&c), argmax(&cs));
            for (a, b) in c.iter().zip(&cs) {
                prop_assert!((alpha * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }
}
