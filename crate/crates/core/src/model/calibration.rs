use serde::{Deserialize, Serialize};

use super::ModelArtifact;
use crate::echo::GazeInstance;
use crate::error::{Error, Result};

/// Affine output correction `p' = matrix * p + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub matrix: [[f64; 2]; 2],
    pub offset: [f64; 2],
    /// Set when the anchors could not support a full affine fit.
    pub offset_only: bool,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration::identity()
    }
}

impl Calibration {
    pub fn identity() -> Self {
        Calibration {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            offset: [0.0, 0.0],
            offset_only: false,
        }
    }

    pub fn offset(dx: f64, dy: f64) -> Self {
        Calibration {
            offset: [dx, dy],
            ..Calibration::identity()
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.offset[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.offset[1],
        ]
    }
}

fn mean(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

/// Covariance `[sxx, sxy, syy]` about the mean.
fn cov(points: &[[f64; 2]], m: [f64; 2]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        let (dx, dy) = (p[0] - m[0], p[1] - m[1]);
        c[0] += dx * dx;
        c[1] += dx * dy;
        c[2] += dy * dy;
    }
    c.map(|v| v / n)
}

/// True when the points span a plane rather than a line or a point.
fn spans_plane(c: [f64; 3]) -> bool {
    let det = c[0] * c[2] - c[1] * c[1];
    let tr = c[0] + c[2];
    tr > 0.0 && det > 1e-6 * tr * tr
}

/// Least-squares affine map from raw predictions to true labels.
///
/// Falls back to a pure offset (flagged) when either the labels or the raw
/// predictions are collinear.
pub fn fit_affine(raw: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<Calibration> {
    if raw.len() != truth.len() {
        return Err(Error::contract("raw predictions and labels differ in length"));
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput("no calibration instances".into()));
    }
    let (mp, mt) = (mean(raw), mean(truth));
    let cp = cov(raw, mp);
    let ct = cov(truth, mt);
    if raw.len() < 3 || !spans_plane(ct) || !spans_plane(cp) {
        return Ok(Calibration {
            offset: [mt[0] - mp[0], mt[1] - mp[1]],
            offset_only: true,
            ..Calibration::identity()
        });
    }
    // Cross-covariance of truth against raw: ctp[r][c] = E[(t_r - mt_r)(p_c - mp_c)].
    let n = raw.len() as f64;
    let mut ctp = [[0.0; 2]; 2];
    for (p, t) in raw.iter().zip(truth) {
        for r in 0..2 {
            for c in 0..2 {
                ctp[r][c] += (t[r] - mt[r]) * (p[c] - mp[c]) / n;
            }
        }
    }
    let det = cp[0] * cp[2] - cp[1] * cp[1];
    let inv = [[cp[2] / det, -cp[1] / det], [-cp[1] / det, cp[0] / det]];
    let mut m = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            m[r][c] = ctp[r][0] * inv[0][c] + ctp[r][1] * inv[1][c];
        }
    }
    let offset = [
        mt[0] - m[0][0] * mp[0] - m[0][1] * mp[1],
        mt[1] - m[1][0] * mp[0] - m[1][1] * mp[1],
    ];
    Ok(Calibration {
        matrix: m,
        offset,
        offset_only: false,
    })
}

/// Fits the output correction on a session's calibration instances. The
/// base model is untouched; any previous correction is replaced.
pub fn calibrate(model: &ModelArtifact, calib: &[GazeInstance]) -> Result<ModelArtifact> {
    let raw = calib
        .iter()
        .map(|i| model.predict_raw(i.features()))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<[f64; 2]> = calib.iter().map(|i| i.label).collect();
    let mut out = model.clone();
    out.calibration = fit_affine(&raw, &truth)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::Tensor3;
    use crate::model::{fit_linear_dataset, predict, test_util::linear_dataset, Dataset};

    fn anchors() -> Vec<[f64; 2]> {
        vec![[240.0, 135.0], [1680.0, 135.0], [240.0, 945.0], [1680.0, 945.0], [960.0, 540.0]]
    }

    #[test]
    fn perfect_predictions_give_identity() {
        let a = anchors();
        let c = fit_affine(&a, &a).unwrap();
        for r in 0..2 {
            for k in 0..2 {
                assert!((c.matrix[r][k] - if r == k { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
            assert!(c.offset[r].abs() < 1e-6);
        }
        assert!(!c.offset_only);
    }

    #[test]
    fn pure_shift_recovered() {
        let truth = anchors();
        let raw: Vec<[f64; 2]> = truth.iter().map(|t| [t[0] - 50.0, t[1] + 30.0]).collect();
        let c = fit_affine(&raw, &truth).unwrap();
        for (r, t) in raw.iter().zip(&truth) {
            let p = c.apply(*r);
            assert!((p[0] - t[0]).abs() < 1e-9 && (p[1] - t[1]).abs() < 1e-9);
        }
        assert!((c.offset[0] - 50.0).abs() < 1e-9 && (c.offset[1] + 30.0).abs() < 1e-9);
    }

    #[test]
    fn general_affine_recovered() {
        let truth = anchors();
        // raw = A^-1 (t - b) for a known A, b.
        let a = [[1.1, 0.2], [-0.1, 0.9]];
        let b = [12.0, -7.0];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let raw: Vec<[f64; 2]> = truth
            .iter()
            .map(|t| {
                let (x, y) = (t[0] - b[0], t[1] - b[1]);
                [(a[1][1] * x - a[0][1] * y) / det, (-a[1][0] * x + a[0][0] * y) / det]
            })
            .collect();
        let c = fit_affine(&raw, &truth).unwrap();
        for r in 0..2 {
            for k in 0..2 {
                assert!((c.matrix[r][k] - a[r][k]).abs() < 1e-9);
            }
            assert!((c.offset[r] - b[r]).abs() < 1e-6);
        }
    }

    #[test]
    fn collinear_anchors_fall_back_to_offset() {
        let truth = vec![[100.0, 100.0], [200.0, 200.0], [300.0, 300.0]];
        let raw: Vec<[f64; 2]> = truth.iter().map(|t| [t[0] + 5.0, t[1] - 5.0]).collect();
        let c = fit_affine(&raw, &truth).unwrap();
        assert!(c.offset_only);
        assert_eq!(c.matrix, Calibration::identity().matrix);
        assert_eq!(c.offset, [-5.0, 5.0]);
        // Constant raw predictions are degenerate as well.
        let c = fit_affine(&[[10.0, 10.0]; 5], &anchors()).unwrap();
        assert!(c.offset_only);
    }

    #[test]
    fn offset_calibration_shifts_prediction() {
        let (data, _) = linear_dataset(20, 4, 2);
        let mut m = fit_linear_dataset(&data, 1.0).unwrap();
        let raw = m.predict_raw(data.row(0)).unwrap();
        assert_eq!(m.predict_features(data.row(0)).unwrap(), raw);
        m.calibration = Calibration::offset(10.0, 0.0);
        let p = m.predict_features(data.row(0)).unwrap();
        assert_eq!(p, [raw[0] + 10.0, raw[1]]);
    }

    fn instances(data: &Dataset) -> Vec<GazeInstance> {
        (0..data.n)
            .map(|i| GazeInstance {
                tensor: Tensor3 {
                    frames: 1,
                    rows: data.dims(),
                    channels: 1,
                    data: data.row(i).to_vec(),
                },
                label: data.y[i],
                session_id: 0,
                t_end: i,
            })
            .collect()
    }

    #[test]
    fn calibrating_twice_equals_once() {
        let (data, _) = linear_dataset(40, 6, 4);
        let m = fit_linear_dataset(&data, 5.0).unwrap();
        let (other, _) = linear_dataset(15, 6, 5);
        let mut inst = instances(&other);
        for (k, i) in inst.iter_mut().enumerate() {
            i.label = [i.label[0] + 40.0 + k as f64, i.label[1] - 25.0];
        }
        let once = calibrate(&m, &inst).unwrap();
        let twice = calibrate(&once, &inst).unwrap();
        for r in 0..2 {
            for k in 0..2 {
                assert!((once.calibration.matrix[r][k] - twice.calibration.matrix[r][k]).abs() < 1e-8);
            }
            assert!((once.calibration.offset[r] - twice.calibration.offset[r]).abs() < 1e-8);
        }
        let p = predict(&once, &inst[0]).unwrap();
        assert!(p[0].is_finite());
    }
}
