//! The whole experiment in one call: simulate, profile, train, calibrate and
//! score, then repeat the test sessions under noise and through the int8
//! path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::echo::{EchoStream, GazeInstance, OriginPolicy, ProfileSetup};
use crate::error::{Error, Result};
use crate::eval::{evaluate_protocol_with_models, score_sessions, EvalMode, EvalReport, ModelSpec};
use crate::fmcw::FrameConfig;
use crate::format::config_hash;
use crate::model::GbrtParams;
use crate::protocol::GazeTrace;
use crate::quant::{tx_prefix, tx_weights, CompressedInstanceSpec, CompressedRecorder, CompressedSession, FeaturePath};
use crate::seed::Seed;
use crate::session::{DatasetSpec, SessionRecord, SimulationSetup};
use crate::sim::NoiseProfile;

/// Overlay levels of the noise sweep, dB(A).
pub const NOISE_LEVELS_DBA: [f64; 4] = [54.5, 64.5, 65.6, 70.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub setup: SimulationSetup,
    pub folds: usize,
    /// Only the first `max_folds` cross-session folds are run.
    pub max_folds: Option<usize>,
    pub in_session_train_fraction: f64,
    pub gbrt: GbrtParams,
    pub linear_l2: f64,
    pub noise_levels_dba: Vec<f64>,
    /// `None` skips the compressed float/int8 comparison.
    pub quant: Option<CompressedInstanceSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            setup: SimulationSetup::default(),
            folds: 4,
            max_folds: Some(1),
            in_session_train_fraction: 0.8,
            gbrt: GbrtParams::default(),
            linear_l2: 1.0,
            noise_levels_dba: NOISE_LEVELS_DBA.to_vec(),
            quant: Some(CompressedInstanceSpec::default()),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.setup.validate()?;
        self.gbrt.validate()?;
        if !(self.linear_l2 >= 0.0) {
            return Err(Error::config("linear_l2 must be non-negative"));
        }
        if !(self.in_session_train_fraction > 0.0 && self.in_session_train_fraction < 1.0) {
            return Err(Error::config("in_session_train_fraction must be in (0, 1)"));
        }
        let n = self.setup.dataset.n_sessions as usize;
        if self.folds < 2 || self.folds > n {
            return Err(Error::config(format!("folds must be in 2..={n}")));
        }
        if self.max_folds == Some(0) {
            return Err(Error::config("max_folds must be positive"));
        }
        for &l in &self.noise_levels_dba {
            NoiseProfile::white(l).validate()?;
        }
        if let Some(q) = &self.quant {
            q.validate(&self.setup.frame)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: u32,
    pub n_frames: usize,
    pub calib_frames: usize,
    pub origin: i32,
    pub n_calib_instances: usize,
    pub n_main_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub level_dba: f64,
    pub mgae_raw_deg: f64,
    pub mgae_deg: f64,
    /// `(mgae - clean) / clean` on calibrated MGAE.
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub test_sessions: Vec<u32>,
    pub clean_mgae_deg: f64,
    pub levels: Vec<NoisePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantComparison {
    pub spec: CompressedInstanceSpec,
    pub train_sessions: Vec<u32>,
    pub test_sessions: Vec<u32>,
    pub n_train: usize,
    pub n_test: usize,
    pub float_mgae_raw_deg: f64,
    pub float_mgae_deg: f64,
    pub int8_mgae_raw_deg: f64,
    pub int8_mgae_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub sessions: Vec<SessionSummary>,
    pub cross_session_gbrt: EvalReport,
    pub cross_session_linear: EvalReport,
    pub in_session_gbrt: EvalReport,
    /// Scored with the first cross-session fold's GBRT.
    pub noise: Option<NoiseSweep>,
    pub quant: Option<QuantComparison>,
}

impl RunReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self).map_err(|e| Error::contract(format!("report encode: {e}")))?;
        v.push(b'\n');
        Ok(v)
    }
}

/// One rendered session: full-resolution instances plus, optionally, the
/// compressed raw snippets.
pub struct SimulatedSession {
    pub record: SessionRecord,
    pub trace: GazeTrace,
    pub compressed: Option<CompressedSession>,
}

/// Renders a session once and feeds every frame to both front ends.
pub fn simulate_session(
    setup: &SimulationSetup,
    id: u32,
    overlay: Option<&NoiseProfile>,
    quant: Option<&CompressedInstanceSpec>,
) -> Result<SimulatedSession> {
    let profile_setup = ProfileSetup::new(&setup.frame, setup.dataset.filtered)?;
    let mut stream = EchoStream::new(profile_setup, OriginPolicy::DirectPath)?;
    let mut recorder = quant.map(|q| CompressedRecorder::new(&setup.frame, *q)).transpose()?;
    let trace = setup.render(id, overlay, |_, frame| {
        let refs: Vec<&[f64]> = frame.iter().map(Vec::as_slice).collect();
        stream.push_frame(&refs)?;
        if let Some(r) = recorder.as_mut() {
            r.push_frame(frame)?;
        }
        Ok(())
    })?;
    let set = stream.finish()?;
    let record = SessionRecord::from_profiles(&set, &trace, &setup.frame, &setup.dataset, id, Seed(setup.seed))?;
    Ok(SimulatedSession {
        record,
        trace,
        compressed: recorder.map(CompressedRecorder::finish).transpose()?,
    })
}

/// Cuts compressed instances at the same window positions as
/// [`SessionRecord::from_profiles`].
pub fn compressed_record(
    sess: &CompressedSession,
    trace: &GazeTrace,
    cfg: &FrameConfig,
    dataset: &DatasetSpec,
    session_id: u32,
    path: FeaturePath<'_>,
) -> Result<SessionRecord> {
    let n_frames = sess.snippets.len().min(trace.n_frames());
    let window = sess.spec.window_frames;
    if window != cfg.window_frames() {
        return Err(Error::contract("compressed window differs from the frame config"));
    }
    let labels = trace.labels();
    let calib_frames = trace.calib_frames().min(n_frames);
    let cut = |t: usize| sess.instance(t, labels[t], session_id, path);
    let calib = (window - 1..calib_frames)
        .step_by(dataset.calib_stride)
        .map(cut)
        .collect::<Result<Vec<_>>>()?;
    let main = (calib_frames + window - 1..n_frames)
        .step_by(dataset.main_stride)
        .map(cut)
        .collect::<Result<Vec<_>>>()?;
    Ok(SessionRecord {
        session_id,
        n_frames,
        calib_frames,
        calib,
        main,
        origin: sess.origin as i32,
    })
}

struct QuantRecords {
    float: SessionRecord,
    int8: SessionRecord,
}

/// Runs the full experiment. `progress` receives short status lines.
pub fn run_end_to_end(cfg: &RunConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<RunReport> {
    cfg.validate()?;
    let setup = &cfg.setup;
    let geom = &setup.scene.screen;
    let root = Seed(setup.seed);
    let n = setup.dataset.n_sessions;
    let quant_spec = cfg.quant;
    let (tx_f, tx_q) = match &quant_spec {
        Some(q) => (tx_prefix(&setup.frame, q)?, Some(tx_weights(&setup.frame, q)?)),
        None => (Vec::new(), None),
    };

    progress(&format!("simulating {n} sessions"));
    let sims: Vec<(SessionRecord, Option<QuantRecords>)> = (0..n)
        .into_par_iter()
        .map(|id| {
            let s = simulate_session(setup, id, None, quant_spec.as_ref())?;
            let q = match (&s.compressed, &tx_q) {
                (Some(c), Some(txq)) => Some(QuantRecords {
                    float: compressed_record(c, &s.trace, &setup.frame, &setup.dataset, id, FeaturePath::Float(&tx_f))?,
                    int8: compressed_record(c, &s.trace, &setup.frame, &setup.dataset, id, FeaturePath::Quant(txq))?,
                }),
                _ => None,
            };
            progress(&format!("session {id}: origin {}", s.record.origin));
            Ok((s.record, q))
        })
        .collect::<Result<_>>()?;
    let (records, quant_records): (Vec<SessionRecord>, Vec<Option<QuantRecords>>) = sims.into_iter().unzip();
    let sessions = records
        .iter()
        .map(|r| SessionSummary {
            session_id: r.session_id,
            n_frames: r.n_frames,
            calib_frames: r.calib_frames,
            origin: r.origin,
            n_calib_instances: r.calib.len(),
            n_main_instances: r.main.len(),
        })
        .collect();

    let cross = EvalMode::CrossSession {
        folds: cfg.folds,
        max_folds: cfg.max_folds,
    };
    let gbrt = ModelSpec::Gbrt(cfg.gbrt);
    progress("cross-session gbrt");
    let (cross_gbrt, gbrt_models) = evaluate_protocol_with_models(&records, cross, &gbrt, root.child("cross-gbrt", 0), geom)?;
    progress("cross-session linear");
    let (cross_linear, _) = evaluate_protocol_with_models(
        &records,
        cross,
        &ModelSpec::Linear { l2: cfg.linear_l2 },
        root.child("cross-linear", 0),
        geom,
    )?;
    progress("in-session gbrt");
    let (in_session, _) = evaluate_protocol_with_models(
        &records,
        EvalMode::InSession {
            train_fraction: cfg.in_session_train_fraction,
        },
        &gbrt,
        root.child("in-session", 0),
        geom,
    )?;

    let fold0 = &cross_gbrt.folds[0];
    let test_ids = fold0.test_sessions.clone();
    let train_ids = fold0.train_sessions.clone();

    let noise = if cfg.noise_levels_dba.is_empty() {
        None
    } else {
        progress("noise sweep");
        let model = &gbrt_models[0];
        let jobs: Vec<(f64, u32)> = cfg
            .noise_levels_dba
            .iter()
            .flat_map(|&l| test_ids.iter().map(move |&id| (l, id)))
            .collect();
        let noisy: Vec<SessionRecord> = jobs
            .par_iter()
            .map(|&(l, id)| simulate_session(setup, id, Some(&NoiseProfile::white(l)), None).map(|s| s.record))
            .collect::<Result<_>>()?;
        let clean = fold0.mgae_deg;
        let levels = cfg
            .noise_levels_dba
            .iter()
            .zip(noisy.chunks(test_ids.len()))
            .map(|(&level_dba, recs)| {
                let tests: Vec<(&SessionRecord, &[GazeInstance])> = recs.iter().map(|r| (r, r.main.as_slice())).collect();
                let scored = score_sessions(model, &tests, geom, 0)?;
                let mgae = scored.mgae();
                Ok(NoisePoint {
                    level_dba,
                    mgae_raw_deg: scored.mgae_raw(),
                    mgae_deg: mgae,
                    relative_change: (mgae - clean) / clean,
                })
            })
            .collect::<Result<_>>()?;
        Some(NoiseSweep {
            test_sessions: test_ids.clone(),
            clean_mgae_deg: clean,
            levels,
        })
    };

    let quant = match quant_spec {
        Some(spec) => {
            progress("compressed float/int8 comparison");
            let pick = |ids: &[u32]| -> Vec<&QuantRecords> {
                ids.iter()
                    .filter_map(|id| records.iter().position(|r| r.session_id == *id))
                    .filter_map(|i| quant_records[i].as_ref())
                    .collect()
            };
            let train: Vec<GazeInstance> = pick(&train_ids).iter().flat_map(|q| q.float.main.iter().cloned()).collect();
            let model = gbrt.fit(&train, root.child("quant", 0))?;
            let tests = pick(&test_ids);
            let score = |int8: bool| {
                let t: Vec<(&SessionRecord, &[GazeInstance])> = tests
                    .iter()
                    .map(|q| {
                        let r = if int8 { &q.int8 } else { &q.float };
                        (r, r.main.as_slice())
                    })
                    .collect();
                score_sessions(&model, &t, geom, 0)
            };
            let (f, q) = (score(false)?, score(true)?);
            Some(QuantComparison {
                spec,
                train_sessions: train_ids,
                test_sessions: test_ids,
                n_train: train.len(),
                n_test: f.errors.len(),
                float_mgae_raw_deg: f.mgae_raw(),
                float_mgae_deg: f.mgae(),
                int8_mgae_raw_deg: q.mgae_raw(),
                int8_mgae_deg: q.mgae(),
            })
        }
        None => None,
    };

    Ok(RunReport {
        config_hash: hex::encode(config_hash(cfg)?),
        config: cfg.clone(),
        sessions,
        cross_session_gbrt: cross_gbrt,
        cross_session_linear: cross_linear,
        in_session_gbrt: in_session,
        noise,
        quant,
    })
}
