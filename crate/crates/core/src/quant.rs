//! Int8 inference path.
//!
//! The correlation is a 1x1 convolution: each raw window holds
//! `corr_len + rows_used` samples per frame and microphone, the first
//! `corr_len` chirp samples are fixed weights, and sliding the weights along
//! the sample axis gives `rows_used` correlation rows. Raw audio is not
//! band-pass filtered on this path.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::echo::{argmax, FftCorrelator, GazeInstance, Tensor3, NUM_MICS};
use crate::error::{Error, Result};
use crate::fmcw::{generate_chirp, FrameConfig};
use crate::model::ModelArtifact;

/// Symmetric per-tensor int8 values: `value ~= data * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub data: Vec<i8>,
    pub scale: f64,
    pub shape: Vec<usize>,
}

impl QuantTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&q| f64::from(q) * self.scale).collect()
    }
}

/// `scale = max|x| / 127`, `data = round(x / scale)`. An all-zero input gets
/// scale 1.
pub fn quantize(x: &[f64], shape: &[usize]) -> Result<QuantTensor> {
    if shape.iter().product::<usize>() != x.len() {
        return Err(Error::contract(format!("shape {shape:?} does not hold {} values", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("cannot quantize non-finite values"));
    }
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
    let data = x
        .iter()
        .map(|v| (v / scale).round().clamp(-128.0, 127.0) as i8)
        .collect();
    Ok(QuantTensor {
        data,
        scale,
        shape: shape.to_vec(),
    })
}

pub fn dequantize(q: &QuantTensor) -> Vec<f64> {
    q.dequantize()
}

/// Shape of the compressed raw instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedInstanceSpec {
    pub corr_len: usize,
    pub rows_used: usize,
    pub window_frames: usize,
    pub n_mics: usize,
}

impl Default for CompressedInstanceSpec {
    fn default() -> Self {
        CompressedInstanceSpec {
            corr_len: 34,
            rows_used: 30,
            window_frames: 26,
            n_mics: NUM_MICS,
        }
    }
}

impl CompressedInstanceSpec {
    /// Samples per frame and microphone in a raw window.
    pub fn raw_len(&self) -> usize {
        self.corr_len + self.rows_used
    }

    pub fn raw_shape(&self) -> [usize; 3] {
        [self.raw_len(), self.window_frames, self.n_mics]
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.rows_used, self.window_frames, self.n_mics]
    }

    pub fn validate(&self, cfg: &FrameConfig) -> Result<()> {
        if self.corr_len == 0 || self.rows_used == 0 || self.window_frames == 0 || self.n_mics == 0 {
            return Err(Error::config("compressed instance dimensions must be positive"));
        }
        if self.corr_len > cfg.frame_len || self.raw_len() > cfg.frame_len {
            return Err(Error::config("compressed window exceeds the frame"));
        }
        if self.rows_used > cfg.crop_full_px {
            return Err(Error::config("rows_used exceeds crop_full_px"));
        }
        if self.n_mics != NUM_MICS {
            return Err(Error::config(format!("n_mics must be {NUM_MICS}")));
        }
        Ok(())
    }

    /// Offset of the first raw sample past the direct-path origin, centring
    /// the used rows inside the `crop_full_px` window.
    pub fn row_offset(&self, cfg: &FrameConfig) -> usize {
        (cfg.crop_full_px - self.rows_used) / 2
    }

    /// Layout of the flattened features a compressed model sees.
    pub fn feature_layout(&self) -> crate::model::FeatureLayout {
        crate::model::FeatureLayout {
            frames: self.window_frames,
            rows: self.rows_used,
            channels: self.n_mics,
        }
    }
}

/// First `corr_len` samples of band 1's chirp.
pub fn tx_prefix(cfg: &FrameConfig, spec: &CompressedInstanceSpec) -> Result<Vec<f64>> {
    let band = cfg.bands.first().ok_or_else(|| Error::config("no chirp band"))?;
    let mut tx = generate_chirp(band, cfg)?;
    tx.truncate(spec.corr_len);
    Ok(tx)
}

/// [`tx_prefix`], quantized.
pub fn tx_weights(cfg: &FrameConfig, spec: &CompressedInstanceSpec) -> Result<QuantTensor> {
    quantize(&tx_prefix(cfg, spec)?, &[spec.corr_len])
}

/// Integer sliding dot product over the sample axis:
/// `out[r, f, m] = sum_n raw[r + n, f, m] * tx[n]` for `r < rows_used`.
/// Tensors are row-major in their shape order.
pub fn corr_as_conv(raw: &QuantTensor, tx: &QuantTensor, spec: &CompressedInstanceSpec) -> Result<Vec<i32>> {
    let [len, frames, mics] = spec.raw_shape();
    if raw.shape != [len, frames, mics] {
        return Err(Error::contract(format!("raw shape {:?}, expected {:?}", raw.shape, spec.raw_shape())));
    }
    if tx.shape != [spec.corr_len] {
        return Err(Error::contract(format!("tx shape {:?}, expected [{}]", tx.shape, spec.corr_len)));
    }
    let stride = frames * mics;
    let mut out = vec![0i32; spec.rows_used * stride];
    for r in 0..spec.rows_used {
        let acc = &mut out[r * stride..(r + 1) * stride];
        for (n, &w) in tx.data.iter().enumerate() {
            let w = i32::from(w);
            let src = &raw.data[(r + n) * stride..(r + n + 1) * stride];
            for (a, &x) in acc.iter_mut().zip(src) {
                *a += i32::from(x) * w;
            }
        }
    }
    Ok(out)
}

/// Float sliding correlation with the same layout as [`corr_as_conv`].
pub fn corr_float(raw: &[f64], tx: &[f64], spec: &CompressedInstanceSpec) -> Result<Vec<f64>> {
    let [len, frames, mics] = spec.raw_shape();
    if raw.len() != len * frames * mics || tx.len() != spec.corr_len {
        return Err(Error::contract("raw or tx length does not match the spec"));
    }
    let stride = frames * mics;
    let mut out = vec![0.0; spec.rows_used * stride];
    for r in 0..spec.rows_used {
        for (n, &w) in tx.iter().enumerate() {
            for k in 0..stride {
                out[r * stride + k] += raw[(r + n) * stride + k] * w;
            }
        }
    }
    Ok(out)
}

/// Kernel and stride of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

/// Layer constraints of the target accelerator: 1x1 or 3x3 kernels with
/// stride 1. Returns every violation found; empty means the layer is fine.
pub fn conv_constraint_check(layer: &ConvLayerSpec) -> Vec<String> {
    let mut v = Vec::new();
    if !matches!(layer.kernel, [1, 1] | [3, 3]) {
        v.push(format!("kernel {:?} not supported (1x1 or 3x3 only)", layer.kernel));
    }
    if layer.stride != [1, 1] {
        v.push(format!("stride {:?} not supported (must be [1, 1])", layer.stride));
    }
    v
}

/// Reorders `[rows, frames, mics]` values into the channel-major feature
/// order used by models.
fn to_features(values: impl Fn(usize) -> f64, spec: &CompressedInstanceSpec) -> Vec<f32> {
    let (rows, frames, mics) = (spec.rows_used, spec.window_frames, spec.n_mics);
    let mut out = Vec::with_capacity(rows * frames * mics);
    for m in 0..mics {
        for f in 0..frames {
            for r in 0..rows {
                out.push(values((r * frames + f) * mics + m) as f32);
            }
        }
    }
    out
}

/// Features from the float correlation of a raw window.
pub fn float_features(raw: &[f64], tx: &[f64], spec: &CompressedInstanceSpec) -> Result<Vec<f32>> {
    let c = corr_float(raw, tx, spec)?;
    Ok(to_features(|i| c[i], spec))
}

/// Features from the int8 path: quantize the window, run the integer
/// convolution and dequantize the accumulators.
pub fn quant_features(raw: &[f64], tx: &QuantTensor, spec: &CompressedInstanceSpec) -> Result<Vec<f32>> {
    let q = quantize(raw, &spec.raw_shape())?;
    let acc = corr_as_conv(&q, tx, spec)?;
    let s = q.scale * tx.scale;
    Ok(to_features(|i| f64::from(acc[i]) * s, spec))
}

/// Direct-path origin of the unfiltered microphones: the lag with the most
/// correlation-envelope energy against band 1's full chirp over `frames`,
/// summed over microphones. Capped so the raw window still fits the frame.
pub fn detect_origin(frames: &[Vec<Vec<f64>>], cfg: &FrameConfig, spec: &CompressedInstanceSpec) -> Result<usize> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames for origin detection".into()));
    }
    let band = cfg.bands.first().ok_or_else(|| Error::config("no chirp band"))?;
    let mut corr = FftCorrelator::new(&generate_chirp(band, cfg)?);
    let mut energy = vec![0.0; cfg.frame_len];
    for frame in frames {
        for mic in frame {
            if mic.len() != cfg.frame_len {
                return Err(Error::contract("microphone frame length differs from frame_len"));
            }
            corr.add_envelope_energy(mic, &mut energy);
        }
    }
    let max_origin = cfg.frame_len - spec.raw_len() - spec.row_offset(cfg);
    Ok(argmax(&energy[..=max_origin]))
}

/// Keeps the last `window_frames` raw snippets and builds compressed
/// windows from them.
pub struct RawWindow {
    spec: CompressedInstanceSpec,
    start: usize,
    ring: VecDeque<Vec<f64>>,
}

impl RawWindow {
    /// `origin` is the direct-path lag; the snippet starts `row_offset`
    /// samples later.
    pub fn new(spec: CompressedInstanceSpec, cfg: &FrameConfig, origin: usize) -> Result<Self> {
        spec.validate(cfg)?;
        let start = origin + spec.row_offset(cfg);
        if start + spec.raw_len() > cfg.frame_len {
            return Err(Error::config(format!("origin {origin} leaves no room for the raw window")));
        }
        Ok(RawWindow {
            spec,
            start,
            ring: VecDeque::with_capacity(spec.window_frames),
        })
    }

    /// Extracts this frame's `[raw_len, mics]` snippet, frame-major.
    pub fn snippet(&self, mics: &[&[f64]]) -> Vec<f64> {
        let len = self.spec.raw_len();
        let mut s = Vec::with_capacity(len * mics.len());
        for i in 0..len {
            for m in mics {
                s.push(m[self.start + i]);
            }
        }
        s
    }

    pub fn push(&mut self, snippet: Vec<f64>) {
        if self.ring.len() == self.spec.window_frames {
            self.ring.pop_front();
        }
        self.ring.push_back(snippet);
    }

    pub fn is_full(&self) -> bool {
        self.ring.len() == self.spec.window_frames
    }

    /// The `[raw_len, window_frames, mics]` window, oldest frame first.
    pub fn window(&self) -> Option<Vec<f64>> {
        self.is_full().then(|| assemble_window(self.ring.iter().map(Vec::as_slice), &self.spec))
    }
}

/// Interleaves per-frame `[raw_len, mics]` snippets into one raw window.
pub fn assemble_window<'a>(snippets: impl Iterator<Item = &'a [f64]>, spec: &CompressedInstanceSpec) -> Vec<f64> {
    let [len, frames, mics] = spec.raw_shape();
    let mut out = vec![0.0; len * frames * mics];
    for (f, s) in snippets.enumerate().take(frames) {
        for i in 0..len {
            for m in 0..mics {
                out[(i * frames + f) * mics + m] = s[i * mics + m];
            }
        }
    }
    out
}

/// One compressed session: per-frame raw snippets plus labels.
#[derive(Debug, Clone)]
pub struct CompressedSession {
    pub spec: CompressedInstanceSpec,
    pub origin: usize,
    /// Per frame, `[raw_len, mics]` samples.
    pub snippets: Vec<Vec<f32>>,
}

impl CompressedSession {
    pub fn raw_window(&self, t_end: usize) -> Result<Vec<f64>> {
        let w = self.spec.window_frames;
        if t_end + 1 < w || t_end >= self.snippets.len() {
            return Err(Error::contract(format!("window ending at {t_end} is out of range")));
        }
        let snips: Vec<Vec<f64>> = self.snippets[t_end + 1 - w..=t_end]
            .iter()
            .map(|s| s.iter().map(|&v| f64::from(v)).collect())
            .collect();
        Ok(assemble_window(snips.iter().map(Vec::as_slice), &self.spec))
    }

    /// Builds an instance with float or int8 features.
    pub fn instance(&self, t_end: usize, label: [f64; 2], session_id: u32, path: FeaturePath<'_>) -> Result<GazeInstance> {
        let raw = self.raw_window(t_end)?;
        let data = match path {
            FeaturePath::Float(tx) => float_features(&raw, tx, &self.spec)?,
            FeaturePath::Quant(tx) => quant_features(&raw, tx, &self.spec)?,
        };
        Ok(GazeInstance {
            tensor: Tensor3 {
                frames: self.spec.window_frames,
                rows: self.spec.rows_used,
                channels: self.spec.n_mics,
                data,
            },
            label,
            session_id,
            t_end,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FeaturePath<'a> {
    Float(&'a [f64]),
    Quant(&'a QuantTensor),
}

/// Streams frames into a [`CompressedSession`], detecting the origin over
/// the first `origin_frames` frames.
pub struct CompressedRecorder {
    cfg: FrameConfig,
    spec: CompressedInstanceSpec,
    origin_frames: usize,
    pending: Vec<Vec<Vec<f64>>>,
    window: Option<RawWindow>,
    snippets: Vec<Vec<f32>>,
}

impl CompressedRecorder {
    pub fn new(cfg: &FrameConfig, spec: CompressedInstanceSpec) -> Result<Self> {
        spec.validate(cfg)?;
        Ok(CompressedRecorder {
            cfg: cfg.clone(),
            spec,
            origin_frames: (cfg.refresh_rate().floor() as usize).max(1),
            pending: Vec::new(),
            window: None,
            snippets: Vec::new(),
        })
    }

    pub fn push_frame(&mut self, mics: &[Vec<f64>]) -> Result<()> {
        if mics.len() != self.spec.n_mics || mics.iter().any(|m| m.len() != self.cfg.frame_len) {
            return Err(Error::contract("frame does not match the microphone layout"));
        }
        match &self.window {
            Some(w) => {
                let refs: Vec<&[f64]> = mics.iter().map(Vec::as_slice).collect();
                self.snippets.push(w.snippet(&refs).iter().map(|&v| v as f32).collect());
            }
            None => {
                self.pending.push(mics.to_vec());
                if self.pending.len() >= self.origin_frames {
                    self.resolve()?;
                }
            }
        }
        Ok(())
    }

    fn resolve(&mut self) -> Result<()> {
        let origin = detect_origin(&self.pending, &self.cfg, &self.spec)?;
        let w = RawWindow::new(self.spec, &self.cfg, origin)?;
        for frame in std::mem::take(&mut self.pending) {
            let refs: Vec<&[f64]> = frame.iter().map(Vec::as_slice).collect();
            self.snippets.push(w.snippet(&refs).iter().map(|&v| v as f32).collect());
        }
        self.window = Some(w);
        Ok(())
    }

    pub fn finish(mut self) -> Result<CompressedSession> {
        if self.window.is_none() {
            if self.pending.is_empty() {
                return Err(Error::EmptyInput("no frames recorded".into()));
            }
            self.resolve()?;
        }
        let origin = self.window.as_ref().map_or(0, |w| w.start - self.spec.row_offset(&self.cfg));
        Ok(CompressedSession {
            spec: self.spec,
            origin,
            snippets: self.snippets,
        })
    }
}

/// Prediction for one frame of the streaming int8 path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantPrediction {
    pub frame: usize,
    pub pred: [f64; 2],
    /// From frame arrival to the finished prediction.
    pub latency: Duration,
}

/// Two-stage streaming predictor. Stage one extracts the raw window,
/// quantizes and convolves; stage two runs the model. Instances cross a
/// bounded single-producer single-consumer channel, so assembly of frame
/// `t` overlaps prediction of frame `t - 1`.
///
/// `origin` is the direct-path lag from [`detect_origin`]. Frames before
/// the first full window produce no prediction.
pub fn quant_pipeline_predict<I>(
    frames: I,
    cfg: &FrameConfig,
    origin: usize,
    model: &ModelArtifact,
    spec: &CompressedInstanceSpec,
) -> Result<Vec<QuantPrediction>>
where
    I: IntoIterator<Item = Vec<Vec<f64>>>,
    I::IntoIter: Send,
{
    if model.layout != spec.feature_layout() {
        return Err(Error::contract("model was not trained on compressed features"));
    }
    let tx = tx_weights(cfg, spec)?;
    let mut window = RawWindow::new(*spec, cfg, origin)?;
    let frames = frames.into_iter();
    let (send, recv) = mpsc::sync_channel::<(usize, Instant, Vec<f32>)>(1);
    thread::scope(|s| {
        let producer = s.spawn(move || -> Result<usize> {
            let mut seen = 0;
            for (t, mics) in frames.enumerate() {
                let arrived = Instant::now();
                if mics.len() != spec.n_mics || mics.iter().any(|m| m.len() != cfg.frame_len) {
                    return Err(Error::contract(format!("frame {t} does not match the microphone layout")));
                }
                let refs: Vec<&[f64]> = mics.iter().map(Vec::as_slice).collect();
                window.push(window.snippet(&refs));
                seen += 1;
                if let Some(raw) = window.window() {
                    let feats = quant_features(&raw, &tx, spec)?;
                    if send.send((t, arrived, feats)).is_err() {
                        break;
                    }
                }
            }
            Ok(seen)
        });
        let mut out = Vec::new();
        for (t, arrived, feats) in recv {
            let pred = model.predict_features(&feats)?;
            out.push(QuantPrediction {
                frame: t,
                pred,
                latency: arrived.elapsed(),
            });
        }
        let seen = producer
            .join()
            .map_err(|_| Error::contract("assembly stage panicked"))??;
        if seen < spec.window_frames {
            return Err(Error::EmptyInput(format!(
                "{seen} frames, need at least {} for one window",
                spec.window_frames
            )));
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn spec() -> CompressedInstanceSpec {
        CompressedInstanceSpec::default()
    }

    /// Brute-force integer oracle, indexing the shape directly.
    fn oracle(raw: &QuantTensor, tx: &QuantTensor, s: &CompressedInstanceSpec) -> Vec<i64> {
        let [_, frames, mics] = s.raw_shape();
        let mut out = Vec::new();
        for r in 0..s.rows_used {
            for f in 0..frames {
                for m in 0..mics {
                    let mut acc = 0i64;
                    for n in 0..s.corr_len {
                        acc += i64::from(raw.data[((r + n) * frames + f) * mics + m]) * i64::from(tx.data[n]);
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    fn random_raw(seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..64 * 26 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn quantize_endpoints() {
        let q = quantize(&[-1.0, 0.0, 1.0], &[3]).unwrap();
        assert_eq!(q.data, vec![-127, 0, 127]);
        assert!((q.scale - 1.0 / 127.0).abs() < 1e-15);
        let z = quantize(&[0.0; 4], &[4]).unwrap();
        assert_eq!(z.scale, 1.0);
        assert!(quantize(&[f64::NAN], &[1]).is_err());
        assert!(quantize(&[1.0, 2.0], &[3]).is_err());
    }

    #[test]
    fn no_accumulator_overflow() {
        let worst = 34i64 * 128 * 128;
        assert!(worst < i64::from(i32::MAX));
        let s = spec();
        let raw = QuantTensor {
            data: vec![-128; 64 * 26 * 8],
            scale: 1.0,
            shape: s.raw_shape().to_vec(),
        };
        let tx = QuantTensor {
            data: vec![-128; 34],
            scale: 1.0,
            shape: vec![34],
        };
        assert!(corr_as_conv(&raw, &tx, &s).unwrap().iter().all(|&v| i64::from(v) == worst));
    }

    #[test]
    fn conv_equals_integer_oracle() {
        let s = spec();
        let cfg = FrameConfig::default();
        let tx = tx_weights(&cfg, &s).unwrap();
        for seed in 0..5 {
            let raw = quantize(&random_raw(seed), &s.raw_shape()).unwrap();
            let got: Vec<i64> = corr_as_conv(&raw, &tx, &s).unwrap().into_iter().map(i64::from).collect();
            assert_eq!(got, oracle(&raw, &tx, &s));
        }
    }

    #[test]
    fn matched_filter_peak_at_offset() {
        let s = spec();
        let cfg = FrameConfig::default();
        let tx = tx_weights(&cfg, &s).unwrap();
        let [len, frames, mics] = s.raw_shape();
        let mut data = vec![0i8; len * frames * mics];
        for n in 0..34 {
            for k in 0..frames * mics {
                data[(7 + n) * frames * mics + k] = tx.data[n];
            }
        }
        let raw = QuantTensor {
            data,
            scale: 1.0,
            shape: s.raw_shape().to_vec(),
        };
        let out = corr_as_conv(&raw, &tx, &s).unwrap();
        for k in 0..frames * mics {
            let col: Vec<i32> = (0..30).map(|r| out[r * frames * mics + k]).collect();
            let best = (0..30).fold(0, |b, r| if col[r] > col[b] { r } else { b });
            assert_eq!(best, 7);
        }
        let zero = QuantTensor {
            data: vec![0; len * frames * mics],
            scale: 1.0,
            shape: s.raw_shape().to_vec(),
        };
        assert!(corr_as_conv(&zero, &tx, &s).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn dequantized_conv_tracks_float_correlation() {
        let s = spec();
        let cfg = FrameConfig::default();
        let tx = tx_weights(&cfg, &s).unwrap();
        let raw = quantize(&random_raw(11), &s.raw_shape()).unwrap();
        let acc = corr_as_conv(&raw, &tx, &s).unwrap();
        let deq: Vec<f64> = acc.iter().map(|&a| f64::from(a) * raw.scale * tx.scale).collect();
        let float = corr_float(&raw.dequantize(), &tx.dequantize(), &s).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let diff: Vec<f64> = deq.iter().zip(&float).map(|(a, b)| a - b).collect();
        assert!(rms(&diff) / rms(&float) < 0.02);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = spec();
        let tx = tx_weights(&FrameConfig::default(), &s).unwrap();
        let bad = quantize(&vec![0.5; 63 * 26 * 8], &[63, 26, 8]).unwrap();
        assert!(matches!(corr_as_conv(&bad, &tx, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn accelerator_constraints() {
        let ok = |k, st| conv_constraint_check(&ConvLayerSpec { kernel: [k, k], stride: [st, st] }).is_empty();
        assert!(ok(1, 1));
        assert!(ok(3, 1));
        assert!(!ok(5, 1));
        assert!(!ok(1, 2));
        assert_eq!(conv_constraint_check(&ConvLayerSpec { kernel: [5, 5], stride: [2, 2] }).len(), 2);
    }

    #[test]
    fn default_spec_totals_sixty_four() {
        let s = spec();
        assert_eq!(s.raw_len(), 64);
        assert_eq!(s.row_offset(&FrameConfig::default()), 20);
        s.validate(&FrameConfig::default()).unwrap();
    }

    proptest! {
        #[test]
        fn quantization_error_bounded(v in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let q = quantize(&v, &[v.len()]).unwrap();
            for (a, b) in v.iter().zip(q.dequantize()) {
                prop_assert!((a - b).abs() <= q.scale / 2.0 + 1e-12 * q.scale);
            }
            let again = quantize(&q.dequantize(), &[v.len()]).unwrap();
            prop_assert_eq!(&again.data, &q.data);
            prop_assert!((again.scale - q.scale).abs() <= 1e-15 * q.scale.max(1.0));
        }
    }
}
