use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use echogaze::bundle::{load_session, write_session, SessionBundle, DEFAULT_FULL_SCALE};
use echogaze::echo::{OriginPolicy, ProfileSetup};
use echogaze::eval::ModelSpec;
use echogaze::filter::{design_butterworth, BandPassSpec, DEFAULT_ORDER};
use echogaze::fmcw::FrameConfig;
use echogaze::format::{read_eprf, read_model, write_eprf, write_model, ConfigHash};
use echogaze::metrics::mgae_pairs;
use echogaze::model::{calibrate, GbrtParams};
use echogaze::pipeline::{compressed_record, run_end_to_end, RunConfig};
use echogaze::protocol::Segment;
use echogaze::quant::{
    detect_origin, quant_pipeline_predict, tx_prefix, CompressedInstanceSpec, CompressedRecorder, FeaturePath,
};
use echogaze::realtime::{LatencyStats, RealtimeTracker};
use echogaze::seed::Seed;
use echogaze::session::SessionRecord;
use echogaze::sim::NoiseProfile;
use echogaze::Error;

#[derive(Parser)]
#[command(name = "echogaze", version, about = "Acoustic echo-profile gaze tracking")]
struct Cli {
    /// Run configuration (JSON). A bare frame configuration is also accepted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKindArg {
    Gbrt,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sessions into bundle directories under --out.
    Simulate {
        /// Defaults to the configured session count.
        #[arg(long)]
        sessions: Option<u32>,
        #[arg(long, default_value_t = 0)]
        first: u32,
        /// White-noise overlay level in dB(A).
        #[arg(long)]
        noise_dba: Option<f64>,
        /// Also write a WAV copy of each session's audio.
        #[arg(long)]
        wav: bool,
    },
    /// Write one session's gaze trace as CSV.
    GenProtocol {
        #[arg(long, default_value_t = 0)]
        session: u32,
    },
    /// Compute echo profiles of a session bundle.
    Preprocess {
        #[arg(long)]
        session: PathBuf,
    },
    /// Train a regressor on the main segments of session bundles.
    Train {
        #[arg(long, num_args = 1.., required = true)]
        sessions: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModelKindArg::Gbrt)]
        model: ModelKindArg,
        #[arg(long)]
        trees: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        l2: f64,
    },
    /// Stream a session through the frame-by-frame tracker.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        session: PathBuf,
    },
    /// Fit the output correction on a session's calibration segment.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        session: PathBuf,
    },
    /// Simulate, train and score the full experiment; writes a JSON report.
    Evaluate {
        /// Per-instance errors as CSV.
        #[arg(long)]
        errors: Option<PathBuf>,
    },
    /// Train a regressor on compressed raw-window features.
    Quantize {
        #[arg(long, num_args = 1.., required = true)]
        sessions: Vec<PathBuf>,
        #[arg(long)]
        trees: Option<usize>,
    },
    /// Run a compressed-feature model through the float and int8 paths.
    BenchQuant {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dump the band-pass designs and their frequency responses.
    FilterDump {
        #[arg(long, default_value_t = DEFAULT_ORDER)]
        order: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Lib(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad_file(p, e))?;
            if value.get("sample_rate_hz").is_some() {
                let mut cfg = RunConfig::default();
                cfg.setup.frame = serde_json::from_value::<FrameConfig>(value).map_err(|e| bad_file(p, e))?;
                cfg
            } else {
                serde_json::from_value(value).map_err(|e| bad_file(p, e))?
            }
        }
    };
    if let Some(s) = seed {
        cfg.setup.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn bad_file(p: &Path, e: serde_json::Error) -> CliError {
    CliError::Lib(Error::Format {
        path: p.to_path_buf(),
        reason: e.to_string(),
    })
}

fn hash_of(bundle: &SessionBundle) -> CliResult<ConfigHash> {
    Ok(bundle.config_hash()?)
}

/// All bundles must come from the same setup.
fn load_bundles(dirs: &[PathBuf]) -> CliResult<(Vec<SessionBundle>, ConfigHash)> {
    let bundles = dirs.iter().map(|d| load_session(d)).collect::<Result<Vec<_>, _>>()?;
    let hash = hash_of(&bundles[0])?;
    for b in &bundles[1..] {
        if hash_of(b)? != hash {
            return Err(CliError::Usage(format!(
                "{} was simulated with a different configuration than {}",
                b.dir.display(),
                bundles[0].dir.display()
            )));
        }
    }
    Ok((bundles, hash))
}

fn eprf_path(bundle: &SessionBundle) -> PathBuf {
    bundle.dir.join("profiles.eprf")
}

/// Instances of a bundle, reusing `profiles.eprf` when present.
fn session_record(bundle: &SessionBundle) -> CliResult<SessionRecord> {
    let hash = hash_of(bundle)?;
    let cached = eprf_path(bundle);
    let set = if cached.exists() {
        read_eprf(&cached, Some(&hash))?.0
    } else {
        bundle.profiles(bundle.meta.setup.dataset.filtered)?
    };
    let setup = &bundle.meta.setup;
    Ok(SessionRecord::from_profiles(
        &set,
        &bundle.trace,
        &setup.frame,
        &setup.dataset,
        bundle.meta.session_id,
        Seed(setup.seed),
    )?)
}

fn out_or(out: &Option<PathBuf>, default: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    v.push(b'\n');
    fs::write(path, v).map_err(|e| {
        CliError::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| {
        CliError::Lib(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
    }
}

fn gbrt_params(cfg: &RunConfig, trees: Option<usize>) -> GbrtParams {
    GbrtParams {
        n_trees: trees.unwrap_or(cfg.gbrt.n_trees),
        ..cfg.gbrt
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Simulate {
            sessions,
            first,
            noise_dba,
            wav,
        } => {
            let root = out_or(&cli.out, "sessions");
            let overlay = noise_dba.map(NoiseProfile::white);
            let n = sessions.unwrap_or(cfg.setup.dataset.n_sessions);
            for id in first..first + n {
                let dir = root.join(format!("session_{id:02}"));
                let b = write_session(&dir, &cfg.setup, id, overlay.as_ref(), DEFAULT_FULL_SCALE)?;
                if wav {
                    b.export_wav(&dir.join("audio.wav"))?;
                }
                println!(
                    "{}: {} frames, {} clipped samples",
                    dir.display(),
                    b.meta.n_frames,
                    b.meta.clipped_samples
                );
            }
        }
        Command::GenProtocol { session } => {
            let trace = cfg.setup.trace(session)?;
            let path = out_or(&cli.out, "protocol.csv");
            let file = fs::File::create(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            trace.write_csv(file)?;
            let main: Vec<_> = trace.fixations.iter().filter(|f| f.segment == Segment::Main).collect();
            let dwell = main.iter().map(|f| f.dwell_s).sum::<f64>() / main.len().max(1) as f64;
            println!(
                "{}: {} frames, {} calibration frames, {} regions, mean dwell {dwell:.3} s",
                path.display(),
                trace.n_frames(),
                trace.calib_frames(),
                main.len()
            );
        }
        Command::Preprocess { session } => {
            let b = load_session(&session)?;
            let set = b.profiles(b.meta.setup.dataset.filtered)?;
            let path = cli.out.clone().unwrap_or_else(|| eprf_path(&b));
            write_eprf(&path, &set, &hash_of(&b)?)?;
            println!(
                "{}: {} channels x {} rows x {} frames, origin {}",
                path.display(),
                set.profiles.len(),
                set.rows(),
                set.n_frames(),
                set.origin()
            );
        }
        Command::Train {
            sessions,
            model,
            trees,
            l2,
        } => {
            let (bundles, hash) = load_bundles(&sessions)?;
            let mut train = Vec::new();
            for b in &bundles {
                train.extend(session_record(b)?.main);
            }
            let spec = match model {
                ModelKindArg::Gbrt => ModelSpec::Gbrt(gbrt_params(&cfg, trees)),
                ModelKindArg::Linear => ModelSpec::Linear { l2 },
            };
            let m = spec.fit(&train, Seed(cfg.setup.seed).child("train", 0))?;
            let path = out_or(&cli.out, "model.gzmd");
            write_model(&path, &m, &hash)?;
            println!("{}: {} trained on {} instances", path.display(), spec.name(), train.len());
        }
        Command::Infer { model, session } => {
            let b = load_session(&session)?;
            let (m, _) = read_model(&model, Some(&hash_of(&b)?))?;
            let setup = ProfileSetup::new(&b.meta.setup.frame, b.meta.setup.dataset.filtered)?;
            let mut tracker = RealtimeTracker::new(setup, m, OriginPolicy::DirectPath)?;
            let path = out_or(&cli.out, "predictions.csv");
            let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
            w.write_record(["frame_index", "pred_x_px", "pred_y_px", "truth_x_px", "truth_y_px", "segment"])
                .map_err(csv_err(&path))?;
            let (mut preds, mut truths, mut times) = (Vec::new(), Vec::new(), Vec::new());
            for (t, frame) in b.frames()?.enumerate() {
                let frame = frame?;
                let refs: Vec<&[f64]> = frame.iter().map(Vec::as_slice).collect();
                let start = std::time::Instant::now();
                let p = tracker.push_frame(&refs)?;
                times.push(start.elapsed());
                let (Some(p), Some(truth)) = (p, b.trace.points.get(t)) else {
                    continue;
                };
                w.write_record([
                    t.to_string(),
                    p[0].to_string(),
                    p[1].to_string(),
                    truth.x_px.to_string(),
                    truth.y_px.to_string(),
                    truth.segment.as_str().to_string(),
                ])
                .map_err(csv_err(&path))?;
                if truth.segment == Segment::Main {
                    preds.push(p);
                    truths.push([truth.x_px, truth.y_px]);
                }
            }
            w.flush().map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let stats = LatencyStats::from_durations(&times)?;
            let geom = &b.meta.setup.scene.screen;
            println!(
                "{}: {} predictions, main-segment MGAE {:.2} deg, origin {:?}, mean {:.3} ms/frame, p99 {:.3} ms",
                path.display(),
                preds.len(),
                mgae_pairs(geom, &preds, &truths)?,
                tracker.origin(),
                stats.mean_ms,
                stats.p99_ms
            );
        }
        Command::Calibrate { model, session } => {
            let b = load_session(&session)?;
            let hash = hash_of(&b)?;
            let (m, _) = read_model(&model, Some(&hash))?;
            let rec = session_record(&b)?;
            let c = calibrate(&m, &rec.calib)?;
            let path = out_or(&cli.out, "calibrated.gzmd");
            write_model(&path, &c, &hash)?;
            println!("{}: {:?}", path.display(), c.calibration);
        }
        Command::Evaluate { errors } => {
            let report = run_end_to_end(&cfg, &|msg| eprintln!("{msg}"))?;
            let path = out_or(&cli.out, "report.json");
            fs::write(&path, report.to_json()?).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            if let Some(p) = errors {
                let f = fs::File::create(&p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                report.cross_session_gbrt.write_errors_csv(f)?;
            }
            println!(
                "{}: cross-session gbrt {:.2} deg (raw {:.2}), linear {:.2} deg, in-session gbrt {:.2} deg",
                path.display(),
                report.cross_session_gbrt.mean_mgae_deg,
                report.cross_session_gbrt.mean_mgae_raw_deg,
                report.cross_session_linear.mean_mgae_deg,
                report.in_session_gbrt.mean_mgae_deg
            );
        }
        Command::Quantize { sessions, trees } => {
            let (bundles, hash) = load_bundles(&sessions)?;
            let spec = cfg.quant.unwrap_or_default();
            let frame = &bundles[0].meta.setup.frame;
            let tx = tx_prefix(frame, &spec)?;
            let mut train = Vec::new();
            for b in &bundles {
                let mut rec = CompressedRecorder::new(frame, spec)?;
                b.for_each_frame(|_, f| rec.push_frame(f))?;
                let sess = rec.finish()?;
                let setup = &b.meta.setup;
                let r = compressed_record(&sess, &b.trace, frame, &setup.dataset, b.meta.session_id, FeaturePath::Float(&tx))?;
                train.extend(r.main);
            }
            let m = ModelSpec::Gbrt(gbrt_params(&cfg, trees)).fit(&train, Seed(cfg.setup.seed).child("quant", 0))?;
            let path = out_or(&cli.out, "quant.gzmd");
            write_model(&path, &m, &hash)?;
            println!("{}: compressed-feature gbrt trained on {} instances", path.display(), train.len());
        }
        Command::BenchQuant { model, session, report } => {
            let b = load_session(&session)?;
            let (m, _) = read_model(&model, Some(&hash_of(&b)?))?;
            let bench = bench_quant(&b, &m, cfg.quant.unwrap_or_default())?;
            let path = report.or(cli.out).unwrap_or_else(|| PathBuf::from("bench.json"));
            write_json(&path, &bench)?;
            println!(
                "{}: float {:.2} deg, int8 {:.2} deg, mean {:.3} ms, p99 {:.3} ms, {:.0} fps",
                path.display(),
                bench.mgae_float_deg,
                bench.mgae_quant_deg,
                bench.mean_latency_ms,
                bench.p99_latency_ms,
                bench.fps_sustained
            );
        }
        Command::FilterDump { order, points } => {
            let frame = &cfg.setup.frame;
            if points < 2 {
                return Err(CliError::Usage("--points must be at least 2".into()));
            }
            let nyquist = f64::from(frame.sample_rate_hz) / 2.0;
            let mut bands = Vec::new();
            for band in &frame.bands {
                let spec = BandPassSpec {
                    low_cut_hz: band.f_start_hz,
                    high_cut_hz: band.f_end_hz,
                    order,
                    sample_rate_hz: frame.sample_rate_hz,
                };
                let f = design_butterworth(&spec)?;
                let response: Vec<[f64; 2]> = (0..points)
                    .map(|i| {
                        let hz = nyquist * i as f64 / (points - 1) as f64;
                        [hz, f.magnitude_db(hz)]
                    })
                    .collect();
                println!(
                    "speaker {}: {:.0}-{:.0} Hz, {} sections, centre {:.2} dB, 10 kHz {:.1} dB, stable {}",
                    band.speaker_id,
                    band.f_start_hz,
                    band.f_end_hz,
                    f.sections.len(),
                    f.magnitude_db(band.center_hz()),
                    f.magnitude_db(10_000.0),
                    f.is_stable()
                );
                bands.push(serde_json::json!({
                    "speaker_id": band.speaker_id,
                    "spec": spec,
                    "filter": f,
                    "response_db": response,
                }));
            }
            write_json(&out_or(&cli.out, "filters.json"), &bands)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    frames: usize,
    origin: usize,
    mean_latency_ms: f64,
    p99_latency_ms: f64,
    fps_sustained: f64,
    mgae_float_deg: f64,
    mgae_quant_deg: f64,
}

fn bench_quant(b: &SessionBundle, model: &echogaze::model::ModelArtifact, spec: CompressedInstanceSpec) -> CliResult<BenchReport> {
    let frame = &b.meta.setup.frame;
    let head: Vec<Vec<Vec<f64>>> = b
        .frames()?
        .take((frame.refresh_rate().floor() as usize).max(1))
        .collect::<Result<_, _>>()?;
    let origin = detect_origin(&head, frame, &spec)?;
    let preds = quant_pipeline_predict(b.frames()?.map_while(|f| f.ok()), frame, origin, model, &spec)?;
    let expected = b.meta.n_frames + 1 - spec.window_frames;
    if preds.len() != expected {
        return Err(CliError::Lib(Error::Io {
            path: b.audio_path(),
            source: std::io::Error::other(format!("{} predictions, expected {expected}", preds.len())),
        }));
    }

    // The float path sees the same windows through the recorder.
    let mut rec = CompressedRecorder::new(frame, spec)?;
    b.for_each_frame(|_, f| rec.push_frame(f))?;
    let sess = rec.finish()?;
    let tx = tx_prefix(frame, &spec)?;
    let calib = b.trace.calib_frames();
    let (mut pf, mut pq, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for p in &preds {
        let t = p.frame;
        if t + 1 < calib + spec.window_frames || t >= b.trace.n_frames() {
            continue;
        }
        let label = [b.trace.points[t].x_px, b.trace.points[t].y_px];
        let inst = sess.instance(t, label, b.meta.session_id, FeaturePath::Float(&tx))?;
        pf.push(model.predict_features(inst.features())?);
        pq.push(p.pred);
        truth.push(label);
    }
    let geom = &b.meta.setup.scene.screen;
    let stats = LatencyStats::from_durations(&preds.iter().map(|p| p.latency).collect::<Vec<_>>())?;
    Ok(BenchReport {
        frames: preds.len(),
        origin,
        mean_latency_ms: stats.mean_ms,
        p99_latency_ms: stats.p99_ms,
        fps_sustained: stats.fps_sustained,
        mgae_float_deg: mgae_pairs(geom, &pf, &truth)?,
        mgae_quant_deg: mgae_pairs(geom, &pq, &truth)?,
    })
}
