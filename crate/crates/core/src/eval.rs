//! Session-based evaluation: cross-session k-fold and in-session splits.
//!
//! Every test session is scored twice, with the raw model and after fitting
//! the output correction on that session's own calibration segment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::echo::GazeInstance;
use crate::error::{Error, Result};
use crate::metrics::{gaze_angular_error, GazeEvalPoint};
use crate::model::{calibrate, fit_gbrt, fit_linear, GbrtParams, ModelArtifact};
use crate::protocol::ScreenGeometry;
use crate::seed::Seed;
use crate::session::SessionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Linear { l2: f64 },
    Gbrt(GbrtParams),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Gbrt(GbrtParams::default())
    }
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Linear { .. } => "linear",
            ModelSpec::Gbrt(_) => "gbrt",
        }
    }

    /// Trains on `train`. For GBRT, `seed` replaces the subsampling seed.
    pub fn fit(&self, train: &[GazeInstance], seed: Seed) -> Result<ModelArtifact> {
        match self {
            ModelSpec::Linear { l2 } => fit_linear(train, *l2),
            ModelSpec::Gbrt(p) => fit_gbrt(train, &GbrtParams { seed, ..*p }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EvalMode {
    /// Whole sessions held out per fold. `max_folds` runs only the first few.
    CrossSession { folds: usize, max_folds: Option<usize> },
    /// Each session's main segment split into a leading train block and a
    /// trailing test block.
    InSession { train_fraction: f64 },
}

impl EvalMode {
    fn note(&self) -> String {
        match *self {
            EvalMode::CrossSession { folds, .. } => {
                format!("{folds}-fold cross-session; contiguous session blocks held out per fold")
            }
            EvalMode::InSession { train_fraction } => format!(
                "in-session contiguous split: first {:.0}% of each main segment trains, the rest tests; \
                 windows straddling the boundary are dropped",
                train_fraction * 100.0
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session_id: u32,
    pub n_test: usize,
    pub mgae_raw_deg: f64,
    pub mgae_deg: f64,
    pub calibration_offset_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_sessions: Vec<u32>,
    pub test_sessions: Vec<u32>,
    pub n_train: usize,
    pub n_test: usize,
    /// Pooled over all test instances, before calibration.
    pub mgae_raw_deg: f64,
    /// Pooled over all test instances, after per-session calibration.
    pub mgae_deg: f64,
    pub sessions: Vec<SessionScore>,
}

/// Error of one test instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceError {
    pub fold: usize,
    pub session_id: u32,
    pub t_end: usize,
    pub truth_x: f64,
    pub truth_y: f64,
    pub pred_x: f64,
    pub pred_y: f64,
    pub error_raw_deg: f64,
    pub error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub model: ModelSpec,
    pub split: String,
    pub folds: Vec<FoldReport>,
    /// Mean over folds of the calibrated MGAE.
    pub mean_mgae_deg: f64,
    pub mean_mgae_raw_deg: f64,
    #[serde(skip)]
    pub errors: Vec<InstanceError>,
}

impl EvalReport {
    pub fn write_errors_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        for e in &self.errors {
            csv.serialize(e).map_err(|e| Error::contract(format!("csv: {e}")))?;
        }
        csv.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Scores of one model on test instances from several sessions.
pub struct Scored {
    pub sessions: Vec<SessionScore>,
    pub errors: Vec<InstanceError>,
}

impl Scored {
    pub fn mgae_raw(&self) -> f64 {
        mean(self.errors.iter().map(|e| e.error_raw_deg))
    }

    pub fn mgae(&self) -> f64 {
        mean(self.errors.iter().map(|e| e.error_deg))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Scores `model` on each `(session, test instances)` pair, calibrating on
/// the session's calibration segment first.
pub fn score_sessions(
    model: &ModelArtifact,
    tests: &[(&SessionRecord, &[GazeInstance])],
    geom: &ScreenGeometry,
    fold: usize,
) -> Result<Scored> {
    let mut sessions = Vec::new();
    let mut errors = Vec::new();
    for (rec, insts) in tests {
        if insts.is_empty() {
            return Err(Error::EmptyInput(format!("session {} has no test instances", rec.session_id)));
        }
        let cal = calibrate(model, &rec.calib)?;
        let first = errors.len();
        for inst in *insts {
            let raw = model.predict_raw(inst.features())?;
            let pred = cal.calibration.apply(raw);
            let err = |p| gaze_angular_error(&GazeEvalPoint { pred: p, truth: inst.label, geom: *geom });
            errors.push(InstanceError {
                fold,
                session_id: rec.session_id,
                t_end: inst.t_end,
                truth_x: inst.label[0],
                truth_y: inst.label[1],
                pred_x: pred[0],
                pred_y: pred[1],
                error_raw_deg: err(raw)?,
                error_deg: err(pred)?,
            });
        }
        let mine = &errors[first..];
        sessions.push(SessionScore {
            session_id: rec.session_id,
            n_test: mine.len(),
            mgae_raw_deg: mean(mine.iter().map(|e| e.error_raw_deg)),
            mgae_deg: mean(mine.iter().map(|e| e.error_deg)),
            calibration_offset_only: cal.calibration.offset_only,
        });
    }
    Ok(Scored { sessions, errors })
}

/// Test-session indices of each cross-session fold: contiguous blocks, so
/// every session is tested exactly once over all folds.
pub fn fold_assignment(n_sessions: usize, folds: usize) -> Result<Vec<Vec<usize>>> {
    if n_sessions < 2 {
        return Err(Error::config("cross-session evaluation needs at least 2 sessions"));
    }
    if folds < 2 || folds > n_sessions {
        return Err(Error::config(format!("folds must be in 2..={n_sessions}, got {folds}")));
    }
    Ok((0..folds)
        .map(|f| (0..n_sessions).filter(|&i| i * folds / n_sessions == f).collect())
        .collect())
}

/// In-session boundary frame: windows ending before it train, windows
/// starting at or after it test.
pub fn in_session_boundary(rec: &SessionRecord, train_fraction: f64) -> usize {
    let main = rec.n_frames - rec.calib_frames;
    rec.calib_frames + (main as f64 * train_fraction).floor() as usize
}

pub fn evaluate_protocol(
    sessions: &[SessionRecord],
    mode: EvalMode,
    model: &ModelSpec,
    seed: Seed,
    geom: &ScreenGeometry,
) -> Result<EvalReport> {
    evaluate_protocol_with_models(sessions, mode, model, seed, geom).map(|(r, _)| r)
}

/// Like [`evaluate_protocol`], also returning the model fitted for each fold.
pub fn evaluate_protocol_with_models(
    sessions: &[SessionRecord],
    mode: EvalMode,
    model: &ModelSpec,
    seed: Seed,
    geom: &ScreenGeometry,
) -> Result<(EvalReport, Vec<ModelArtifact>)> {
    let folds: Vec<(FoldReport, Vec<InstanceError>, ModelArtifact)> = match mode {
        EvalMode::CrossSession { folds, max_folds } => {
            let mut assignment = fold_assignment(sessions.len(), folds)?;
            if let Some(m) = max_folds {
                if m == 0 {
                    return Err(Error::config("max_folds must be positive"));
                }
                assignment.truncate(m);
            }
            assignment
                .into_par_iter()
                .enumerate()
                .map(|(f, test_idx)| {
                    let train: Vec<GazeInstance> = sessions
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !test_idx.contains(i))
                        .flat_map(|(_, s)| s.main.iter().cloned())
                        .collect();
                    let m = model.fit(&train, seed.child("fold", f as u64))?;
                    let tests: Vec<(&SessionRecord, &[GazeInstance])> =
                        test_idx.iter().map(|&i| (&sessions[i], sessions[i].main.as_slice())).collect();
                    let scored = score_sessions(&m, &tests, geom, f)?;
                    let ids = |keep: bool| {
                        (0..sessions.len())
                            .filter(|i| test_idx.contains(i) == keep)
                            .map(|i| sessions[i].session_id)
                            .collect()
                    };
                    Ok((
                        FoldReport {
                            fold: f,
                            train_sessions: ids(false),
                            test_sessions: ids(true),
                            n_train: train.len(),
                            n_test: scored.errors.len(),
                            mgae_raw_deg: scored.mgae_raw(),
                            mgae_deg: scored.mgae(),
                            sessions: scored.sessions,
                        },
                        scored.errors,
                        m,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        }
        EvalMode::InSession { train_fraction } => {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(Error::config("train_fraction must be in (0, 1)"));
            }
            if sessions.is_empty() {
                return Err(Error::config("in-session evaluation needs at least 1 session"));
            }
            let mut train = Vec::new();
            let mut test_blocks = Vec::new();
            for s in sessions {
                let b = in_session_boundary(s, train_fraction);
                let tr: Vec<GazeInstance> = s.main.iter().filter(|i| i.t_end < b).cloned().collect();
                let te: Vec<GazeInstance> = s.main.iter().filter(|i| i.t_start() >= b).cloned().collect();
                if tr.is_empty() || te.is_empty() {
                    return Err(Error::config(format!(
                        "session {} is too short to split at {train_fraction}",
                        s.session_id
                    )));
                }
                train.extend(tr);
                test_blocks.push(te);
            }
            let m = model.fit(&train, seed.child("fold", 0))?;
            let tests: Vec<(&SessionRecord, &[GazeInstance])> =
                sessions.iter().zip(&test_blocks).map(|(s, t)| (s, t.as_slice())).collect();
            let scored = score_sessions(&m, &tests, geom, 0)?;
            let ids: Vec<u32> = sessions.iter().map(|s| s.session_id).collect();
            vec![(
                FoldReport {
                    fold: 0,
                    train_sessions: ids.clone(),
                    test_sessions: ids,
                    n_train: train.len(),
                    n_test: scored.errors.len(),
                    mgae_raw_deg: scored.mgae_raw(),
                    mgae_deg: scored.mgae(),
                    sessions: scored.sessions,
                },
                scored.errors,
                m,
            )]
        }
    };
    let mut reports = Vec::with_capacity(folds.len());
    let mut errors = Vec::new();
    let mut models = Vec::with_capacity(folds.len());
    for (r, e, m) in folds {
        reports.push(r);
        errors.extend(e);
        models.push(m);
    }
    let folds = reports;
    let report = EvalReport {
        mode,
        model: model.clone(),
        split: mode.note(),
        mean_mgae_deg: mean(folds.iter().map(|f| f.mgae_deg)),
        mean_mgae_raw_deg: mean(folds.iter().map(|f| f.mgae_raw_deg)),
        folds,
        errors,
    };
    Ok((report, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::Tensor3;

    #[test]
    fn twelve_sessions_six_folds() {
        let a = fold_assignment(12, 6).unwrap();
        assert_eq!(a.len(), 6);
        let mut seen = vec![0; 12];
        for f in &a {
            assert_eq!(f.len(), 2);
            for &i in f {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(fold_assignment(8, 4).unwrap()[0], vec![0, 1]);
        assert!(matches!(fold_assignment(1, 2), Err(Error::Config(_))));
        assert!(matches!(fold_assignment(8, 9), Err(Error::Config(_))));
    }

    /// A session whose features encode the label directly, so a linear
    /// model fits it well.
    fn toy_session(id: u32, n_frames: usize) -> SessionRecord {
        let window = 3;
        let inst = |t: usize| {
            let x = ((t * 37 + id as usize * 11) % 1900) as f64;
            let y = ((t * 53) % 1000) as f64 + 40.0;
            GazeInstance {
                tensor: Tensor3 {
                    frames: window,
                    rows: 1,
                    channels: 2,
                    data: vec![x as f32, y as f32, 1.0, (x / 2.0) as f32, (y / 3.0) as f32, -1.0],
                },
                label: [x, y],
                session_id: id,
                t_end: t,
            }
        };
        let calib_frames = 30;
        SessionRecord {
            session_id: id,
            n_frames,
            calib_frames,
            calib: (window - 1..calib_frames).map(inst).collect(),
            main: (calib_frames + window - 1..n_frames).map(inst).collect(),
            origin: 0,
        }
    }

    #[test]
    fn in_session_split_has_no_overlap() {
        let s = vec![toy_session(0, 230)];
        let r = evaluate_protocol(
            &s,
            EvalMode::InSession { train_fraction: 0.8 },
            &ModelSpec::Linear { l2: 1e-6 },
            Seed(1),
            &ScreenGeometry::default(),
        )
        .unwrap();
        let b = in_session_boundary(&s[0], 0.8);
        assert_eq!(b, 30 + 160);
        assert_eq!(r.folds.len(), 1);
        let test_start = r.errors.iter().map(|e| e.t_end + 1 - 3).min().unwrap();
        assert!(test_start >= b);
        // Train windows end before b; test windows start at or after it.
        assert_eq!(r.folds[0].n_train, (32..b).count());
        assert_eq!(r.folds[0].n_test, (b + 2..230).count());
        assert!(r.mean_mgae_deg < 0.01, "{}", r.mean_mgae_deg);
    }

    #[test]
    fn cross_session_tests_every_session_once() {
        let s: Vec<SessionRecord> = (0..6).map(|i| toy_session(i, 120)).collect();
        let r = evaluate_protocol(
            &s,
            EvalMode::CrossSession { folds: 3, max_folds: None },
            &ModelSpec::Linear { l2: 1e-6 },
            Seed(2),
            &ScreenGeometry::default(),
        )
        .unwrap();
        let mut tested: Vec<u32> = r.folds.iter().flat_map(|f| f.test_sessions.clone()).collect();
        tested.sort_unstable();
        assert_eq!(tested, (0..6).collect::<Vec<_>>());
        for f in &r.folds {
            assert_eq!(f.train_sessions.len(), 4);
            assert!(f.train_sessions.iter().all(|t| !f.test_sessions.contains(t)));
            assert_eq!(f.sessions.len(), 2);
        }
        let mean_of_folds = r.folds.iter().map(|f| f.mgae_deg).sum::<f64>() / 3.0;
        assert!((r.mean_mgae_deg - mean_of_folds).abs() < 1e-12);

        let limited = evaluate_protocol(
            &s,
            EvalMode::CrossSession { folds: 3, max_folds: Some(1) },
            &ModelSpec::Linear { l2: 1e-6 },
            Seed(2),
            &ScreenGeometry::default(),
        )
        .unwrap();
        assert_eq!(limited.folds, r.folds[..1]);
    }

    #[test]
    fn report_json_is_deterministic() {
        let s: Vec<SessionRecord> = (0..4).map(|i| toy_session(i, 100)).collect();
        let spec = ModelSpec::Gbrt(GbrtParams {
            n_trees: 5,
            ..GbrtParams::default()
        });
        let run = || {
            let r = evaluate_protocol(
                &s,
                EvalMode::CrossSession { folds: 2, max_folds: None },
                &spec,
                Seed(3),
                &ScreenGeometry::default(),
            )
            .unwrap();
            serde_json::to_string(&r).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn too_short_to_split_is_config_error() {
        let s = vec![toy_session(0, 34)];
        let r = evaluate_protocol(
            &s,
            EvalMode::InSession { train_fraction: 0.5 },
            &ModelSpec::Linear { l2: 1.0 },
            Seed(1),
            &ScreenGeometry::default(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
