//! Mean gaze angular error.
//!
//! The eye sits on the perpendicular through the screen centre at
//! `eye_distance_cm`. For a ground-truth point `g` and prediction `p`, the
//! angle at the eye follows from the law of cosines on the triangle
//! eye-g-p.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{px_to_cm, ScreenGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeEvalPoint {
    pub pred: [f64; 2],
    pub truth: [f64; 2],
    pub geom: ScreenGeometry,
}

/// `acos((a^2 + b^2 - c^2) / (2ab))` in degrees, argument clamped to [-1, 1].
pub fn law_of_cosines_deg(d_eg: f64, d_ep: f64, d_gp: f64) -> f64 {
    let cos = (d_eg * d_eg + d_ep * d_ep - d_gp * d_gp) / (2.0 * d_eg * d_ep);
    // acos as 90 - asin, which rounds to exactly 60 at cos = 0.5.
    90.0 - cos.clamp(-1.0, 1.0).asin().to_degrees()
}

/// Angle at the eye between the truth and prediction rays, in degrees.
///
/// Truth must be on screen; predictions may fall anywhere on the screen plane.
pub fn gaze_angular_error(p: &GazeEvalPoint) -> Result<f64> {
    let g = px_to_cm(&p.geom, p.truth)?;
    let q = p.geom.to_cm_unchecked(p.pred);
    let d2 = p.geom.eye_distance_cm * p.geom.eye_distance_cm;
    let d_eg = (g[0] * g[0] + g[1] * g[1] + d2).sqrt();
    let d_ep = (q[0] * q[0] + q[1] * q[1] + d2).sqrt();
    let d_gp = (g[0] - q[0]).hypot(g[1] - q[1]);
    if !(d_eg > 0.0 && d_ep > 0.0) || !d_ep.is_finite() {
        return Err(Error::contract("degenerate eye distance"));
    }
    Ok(law_of_cosines_deg(d_eg, d_ep, d_gp))
}

/// Mean of [`gaze_angular_error`] over the points.
pub fn mgae(points: &[GazeEvalPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::contract("MGAE of an empty point set"));
    }
    let mut sum = 0.0;
    for p in points {
        sum += gaze_angular_error(p)?;
    }
    Ok(sum / points.len() as f64)
}

/// Convenience: MGAE of paired predictions and labels on one screen.
pub fn mgae_pairs(geom: &ScreenGeometry, preds: &[[f64; 2]], truths: &[[f64; 2]]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::contract("prediction and label counts differ"));
    }
    let pts: Vec<GazeEvalPoint> = preds
        .iter()
        .zip(truths)
        .map(|(&pred, &truth)| GazeEvalPoint {
            pred,
            truth,
            geom: *geom,
        })
        .collect();
    mgae(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn point(pred: [f64; 2], truth: [f64; 2]) -> GazeEvalPoint {
        GazeEvalPoint {
            pred,
            truth,
            geom: ScreenGeometry::default(),
        }
    }

    #[test]
    fn zero_error_for_exact_prediction() {
        let p = point([123.0, 456.0], [123.0, 456.0]);
        assert_eq!(gaze_angular_error(&p).unwrap(), 0.0);
    }

    #[test]
    fn equilateral_is_sixty_degrees() {
        assert_eq!(law_of_cosines_deg(7.5, 7.5, 7.5), 60.0);
        assert_eq!(law_of_cosines_deg(3.0, 3.0, 0.0), 0.0);
        // Screen points at +-a with 3a^2 = D^2 make the eye triangle equilateral.
        let geom = ScreenGeometry {
            width_px: 10_000,
            height_px: 100,
            px_size_cm: 0.01,
            eye_distance_cm: 60.0,
        };
        let a_px = 60.0 / 3f64.sqrt() / 0.01;
        let p = GazeEvalPoint {
            pred: [5_000.0 - a_px, 50.0],
            truth: [5_000.0 + a_px, 50.0],
            geom,
        };
        assert!((gaze_angular_error(&p).unwrap() - 60.0).abs() < 1e-9);
    }

    #[test]
    fn ten_cm_from_centre() {
        // 10 cm = 10 / 0.031 px to the right of the centre pixel.
        let p = point([960.0 + 10.0 / 0.031, 540.0], [960.0, 540.0]);
        let expected = (10.0f64 / 60.0).atan().to_degrees();
        assert!((expected - 9.462).abs() < 5e-4);
        assert!((gaze_angular_error(&p).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn mean_and_errors() {
        assert!(matches!(mgae(&[]), Err(Error::Contract(_))));
        let perfect = vec![point([1.0, 1.0], [1.0, 1.0]); 4];
        assert_eq!(mgae(&perfect).unwrap(), 0.0);
        let a = point([960.0 + 10.0 / 0.031, 540.0], [960.0, 540.0]);
        let b = point([960.0, 540.0], [960.0, 540.0]);
        let e = gaze_angular_error(&a).unwrap();
        assert!((mgae(&[a, b]).unwrap() - e / 2.0).abs() < 1e-12);
        assert!(matches!(
            mgae(&[point([0.0, 0.0], [1920.0, 5.0])]),
            Err(Error::Contract(_))
        ));
    }

    fn on_screen() -> impl Strategy<Value = [f64; 2]> {
        (0.0f64..1920.0, 0.0f64..1080.0).prop_map(|(x, y)| [x, y])
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in on_screen(), b in on_screen()) {
            let ab = gaze_angular_error(&point(a, b)).unwrap();
            let ba = gaze_angular_error(&point(b, a)).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..60.0).contains(&ab));
        }

        #[test]
        fn permutation_invariant(pts in proptest::collection::vec((on_screen(), on_screen()), 1..20)) {
            let fwd: Vec<_> = pts.iter().map(|&(p, t)| point(p, t)).collect();
            let rev: Vec<_> = fwd.iter().rev().copied().collect();
            prop_assert!((mgae(&fwd).unwrap() - mgae(&rev).unwrap()).abs() < 1e-9);
        }
    }
}
