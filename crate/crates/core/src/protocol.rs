//! Synthetic study protocol: calibration anchors followed by one fixation in
//! every screen region, in random order, with random dwell times.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Triangular};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fmcw::FrameConfig;
use crate::seed::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub width_px: u32,
    pub height_px: u32,
    pub px_size_cm: f64,
    pub eye_distance_cm: f64,
}

impl Default for ScreenGeometry {
    /// 1920x1080 at 0.031 cm/px (59.5 cm wide), viewed from 60 cm.
    fn default() -> Self {
        ScreenGeometry {
            width_px: 1920,
            height_px: 1080,
            px_size_cm: 0.031,
            eye_distance_cm: 60.0,
        }
    }
}

impl ScreenGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::config("screen dimensions must be positive"));
        }
        if !(self.px_size_cm > 0.0 && self.eye_distance_cm > 0.0) {
            return Err(Error::config("pixel size and eye distance must be positive"));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < f64::from(self.width_px) && p[1] < f64::from(self.height_px)
    }

    pub fn center_px(&self) -> [f64; 2] {
        [f64::from(self.width_px) / 2.0, f64::from(self.height_px) / 2.0]
    }

    /// Centimetres from the screen centre, x right and y down, no bounds check.
    pub fn to_cm_unchecked(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.center_px();
        [(p[0] - c[0]) * self.px_size_cm, (p[1] - c[1]) * self.px_size_cm]
    }

    /// Gaze in `[-1, 1]^2` screen-normalized coordinates.
    pub fn normalized(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.center_px();
        [(p[0] - c[0]) / c[0], (p[1] - c[1]) / c[1]]
    }
}

/// Converts an on-screen pixel to centimetres relative to the screen centre.
pub fn px_to_cm(geom: &ScreenGeometry, p: [f64; 2]) -> Result<[f64; 2]> {
    if !geom.contains(p) {
        return Err(Error::contract(format!(
            "point ({}, {}) is outside the {}x{} screen",
            p[0], p[1], geom.width_px, geom.height_px
        )));
    }
    Ok(geom.to_cm_unchecked(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    pub n_regions: u32,
    pub dwell_min_s: f64,
    pub dwell_max_s: f64,
    pub dwell_mean_s: f64,
    pub calib_duration_s: f64,
    pub sessions: u32,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            n_regions: 100,
            dwell_min_s: 0.5,
            dwell_max_s: 3.5,
            dwell_mean_s: 2.0,
            calib_duration_s: 15.0,
            sessions: 12,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        let side = self.grid_side();
        if self.n_regions == 0 || side * side != self.n_regions {
            return Err(Error::config(format!(
                "n_regions = {} is not a positive perfect square",
                self.n_regions
            )));
        }
        if !(self.dwell_min_s > 0.0
            && self.dwell_min_s < self.dwell_mean_s
            && self.dwell_mean_s < self.dwell_max_s)
        {
            return Err(Error::config("need 0 < dwell_min < dwell_mean < dwell_max"));
        }
        let mode = self.dwell_mode_s();
        if !(self.dwell_min_s..=self.dwell_max_s).contains(&mode) {
            return Err(Error::config(
                "dwell mean is not reachable by a triangular law on [min, max]",
            ));
        }
        if !(self.calib_duration_s >= 0.0) {
            return Err(Error::config("calibration duration must be non-negative"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> u32 {
        (f64::from(self.n_regions).sqrt().round()) as u32
    }

    /// Mode of the triangular dwell law; the law's mean is (min + max + mode) / 3.
    pub fn dwell_mode_s(&self) -> f64 {
        3.0 * self.dwell_mean_s - self.dwell_min_s - self.dwell_max_s
    }

    pub fn dwell_distribution(&self) -> Result<Triangular<f64>> {
        Triangular::new(self.dwell_min_s, self.dwell_max_s, self.dwell_mode_s())
            .map_err(|e| Error::config(format!("dwell distribution: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Calib,
    Main,
}

impl Segment {
    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Calib => "calib",
            Segment::Main => "main",
        }
    }
}

/// One held gaze target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub point: [f64; 2],
    pub segment: Segment,
    /// Grid cell for main-segment fixations.
    pub region: Option<u32>,
    pub dwell_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub frame_index: usize,
    pub x_px: f64,
    pub y_px: f64,
    pub segment: Segment,
}

/// Frame-indexed gaze labels plus the fixations that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeTrace {
    pub points: Vec<TracePoint>,
    pub fixations: Vec<Fixation>,
}

impl GazeTrace {
    pub fn n_frames(&self) -> usize {
        self.points.len()
    }

    pub fn labels(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p.x_px, p.y_px]).collect()
    }

    pub fn calib_frames(&self) -> usize {
        self.points
            .iter()
            .take_while(|p| p.segment == Segment::Calib)
            .count()
    }

    /// Builds a trace from explicit per-frame labels, deriving fixations from
    /// runs of identical labels.
    pub fn from_points(points: Vec<TracePoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.frame_index != i {
                return Err(Error::contract(format!(
                    "trace row {i} has frame_index {}",
                    p.frame_index
                )));
            }
        }
        let mut fixations: Vec<Fixation> = Vec::new();
        for p in &points {
            match fixations.last_mut() {
                Some(f) if f.point == [p.x_px, p.y_px] && f.segment == p.segment => f.end_frame += 1,
                _ => fixations.push(Fixation {
                    start_frame: p.frame_index,
                    end_frame: p.frame_index + 1,
                    point: [p.x_px, p.y_px],
                    segment: p.segment,
                    region: None,
                    dwell_s: 0.0,
                }),
            }
        }
        Ok(GazeTrace { points, fixations })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Contract(format!("csv write: {e}"));
        wr.write_record(["frame_index", "x_px", "y_px", "segment"]).map_err(err)?;
        for p in &self.points {
            wr.write_record([
                p.frame_index.to_string(),
                format!("{}", p.x_px),
                format!("{}", p.y_px),
                p.segment.as_str().to_string(),
            ])
            .map_err(err)?;
        }
        wr.flush().map_err(|e| Error::Contract(format!("csv write: {e}")))?;
        Ok(())
    }

    /// Reads `frame_index,x_px,y_px[,segment]`; rows without a segment are
    /// treated as main-segment labels.
    pub fn read_csv<R: Read>(r: R) -> std::result::Result<Self, String> {
        let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(r);
        let mut points = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let field = |k: usize| rec.get(k).ok_or_else(|| format!("row {i}: missing column {k}"));
            let frame_index: usize = field(0)?.trim().parse().map_err(|e| format!("row {i}: {e}"))?;
            let x_px: f64 = field(1)?.trim().parse().map_err(|e| format!("row {i}: {e}"))?;
            let y_px: f64 = field(2)?.trim().parse().map_err(|e| format!("row {i}: {e}"))?;
            let segment = match rec.get(3).map(str::trim) {
                None | Some("main") => Segment::Main,
                Some("calib") => Segment::Calib,
                Some(other) => return Err(format!("row {i}: unknown segment {other:?}")),
            };
            points.push(TracePoint {
                frame_index,
                x_px,
                y_px,
                segment,
            });
        }
        GazeTrace::from_points(points).map_err(|e| e.to_string())
    }
}

/// Centres of the four corner grid cells and the screen centre.
pub fn calibration_anchors(geom: &ScreenGeometry, proto: &ProtocolSpec) -> [[f64; 2]; 5] {
    let side = f64::from(proto.grid_side());
    let (w, h) = (f64::from(geom.width_px), f64::from(geom.height_px));
    let (cx, cy) = (w / side / 2.0, h / side / 2.0);
    [
        [cx, cy],
        [w - cx, cy],
        [w - cx, h - cy],
        [cx, h - cy],
        geom.center_px(),
    ]
}

/// Generates one session's gaze trace.
pub fn generate_session_trace(
    geom: &ScreenGeometry,
    proto: &ProtocolSpec,
    cfg: &FrameConfig,
    seed: Seed,
) -> Result<GazeTrace> {
    geom.validate()?;
    proto.validate()?;
    let fps = cfg.refresh_rate();
    let to_frame = |t: f64| (t * fps + 1e-9).round() as usize;
    let mut rng = seed.rng();
    let dwell = proto.dwell_distribution()?;

    let mut fixations = Vec::new();
    let mut t = 0.0;
    let per_anchor = proto.calib_duration_s / 5.0;
    for point in calibration_anchors(geom, proto) {
        fixations.push(Fixation {
            start_frame: to_frame(t),
            end_frame: to_frame(t + per_anchor),
            point,
            segment: Segment::Calib,
            region: None,
            dwell_s: per_anchor,
        });
        t += per_anchor;
    }

    let side = proto.grid_side();
    let (cw, ch) = (
        f64::from(geom.width_px) / f64::from(side),
        f64::from(geom.height_px) / f64::from(side),
    );
    let mut order: Vec<u32> = (0..proto.n_regions).collect();
    order.shuffle(&mut rng);
    for region in order {
        let (col, row) = (f64::from(region % side), f64::from(region / side));
        let point = [
            (col + rng.gen::<f64>()) * cw,
            (row + rng.gen::<f64>()) * ch,
        ];
        let d = dwell.sample(&mut rng);
        fixations.push(Fixation {
            start_frame: to_frame(t),
            end_frame: to_frame(t + d),
            point,
            segment: Segment::Main,
            region: Some(region),
            dwell_s: d,
        });
        t += d;
    }

    let mut points = Vec::with_capacity(to_frame(t));
    for f in &fixations {
        for frame_index in f.start_frame..f.end_frame {
            points.push(TracePoint {
                frame_index,
                x_px: f.point[0],
                y_px: f.point[1],
                segment: f.segment,
            });
        }
    }
    Ok(GazeTrace { points, fixations })
}
