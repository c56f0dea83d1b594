use nalgebra::DMatrix;

use super::{Calibration, Dataset, ModelArtifact, ModelParams, Normalization};
use crate::echo::GazeInstance;
use crate::error::{Error, Result};

/// Ridge regression on standardized features.
pub fn fit_linear(train: &[GazeInstance], l2: f64) -> Result<ModelArtifact> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::config(format!("l2 must be a non-negative number, got {l2}")));
    }
    fit_linear_dataset(&Dataset::from_instances(train)?, l2)
}

/// Minimizes `|Z W - (Y - mean Y)|^2 + l2 |W|^2` over standardized features
/// `Z`. With more features than rows the equivalent `n x n` system
/// `W = Z^T (Z Z^T + l2 I)^-1 Yc` is solved instead of the `d x d` one.
pub fn fit_linear_dataset(data: &Dataset, l2: f64) -> Result<ModelArtifact> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::config(format!("l2 must be a non-negative number, got {l2}")));
    }
    if data.n == 0 {
        return Err(Error::EmptyInput("no training instances".into()));
    }
    let (n, d) = (data.n, data.dims());
    let norm = Normalization::fit(data);
    let mut z = vec![0.0f32; n * d];
    for i in 0..n {
        norm.apply(data.row(i), &mut z[i * d..(i + 1) * d]);
    }
    let ym = data.label_mean();
    let yc = DMatrix::from_fn(n, 2, |i, c| data.y[i][c] - ym[c]);

    let weights = if d > n {
        let k = gram(&z, n, d);
        let alpha = spd_solve(k, l2, &yc)?;
        let mut w = vec![[0.0f64; 2]; d];
        for i in 0..n {
            let (a0, a1) = (alpha[(i, 0)], alpha[(i, 1)]);
            for (wj, &zij) in w.iter_mut().zip(&z[i * d..(i + 1) * d]) {
                wj[0] += f64::from(zij) * a0;
                wj[1] += f64::from(zij) * a1;
            }
        }
        w
    } else {
        let mut zt = vec![0.0f32; n * d];
        for i in 0..n {
            for j in 0..d {
                zt[j * n + i] = z[i * d + j];
            }
        }
        let k = gram(&zt, d, n);
        let mut rhs = DMatrix::zeros(d, 2);
        for j in 0..d {
            for i in 0..n {
                let v = f64::from(zt[j * n + i]);
                rhs[(j, 0)] += v * yc[(i, 0)];
                rhs[(j, 1)] += v * yc[(i, 1)];
            }
        }
        let w = spd_solve(k, l2, &rhs)?;
        (0..d).map(|j| [w[(j, 0)], w[(j, 1)]]).collect()
    };

    Ok(ModelArtifact {
        layout: data.layout,
        normalization: norm,
        params: ModelParams::Linear { weights, intercept: ym },
        calibration: Calibration::identity(),
    })
}

/// Solves `(K + l2 I) X = B` for symmetric positive semi-definite `K`,
/// taking the minimum-norm solution when the system is singular.
fn spd_solve(mut k: DMatrix<f64>, l2: f64, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 && l2 == 0.0 {
        return Ok(DMatrix::zeros(k.ncols(), b.ncols()));
    }
    for i in 0..k.nrows() {
        k[(i, i)] += l2;
    }
    if l2 > 0.0 {
        if let Some(ch) = k.clone().cholesky() {
            return Ok(ch.solve(b));
        }
    }
    let svd = k.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    svd.solve(b, eps)
        .map_err(|e| Error::contract(format!("least-squares solve failed: {e}")))
}

/// `A A^T` for a row-major `rows x cols` matrix, in f64.
///
/// Blocked so that pairs of row tiles stay cache-resident; partial dot
/// products run in f32 over short chunks and are summed in f64.
pub(crate) fn gram(a: &[f32], rows: usize, cols: usize) -> DMatrix<f64> {
    const TILE: usize = 16;
    const CHUNK: usize = 2048;
    let mut g = vec![0.0f64; rows * rows];
    for c0 in (0..cols).step_by(CHUNK) {
        let c1 = (c0 + CHUNK).min(cols);
        for i0 in (0..rows).step_by(TILE) {
            for j0 in (0..=i0).step_by(TILE) {
                for i in i0..(i0 + TILE).min(rows) {
                    let ai = &a[i * cols + c0..i * cols + c1];
                    for j in j0..(j0 + TILE).min(i + 1) {
                        g[i * rows + j] += dot(ai, &a[j * cols + c0..j * cols + c1]);
                    }
                }
            }
        }
    }
    DMatrix::from_fn(rows, rows, |i, j| if j <= i { g[i * rows + j] } else { g[j * rows + i] })
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().map(|&v| f64::from(v)).sum::<f64>() + f64::from(tail)
}

#[cfg(test)]
mod tests {
    use super::super::test_util::linear_dataset;
    use super::super::{FeatureLayout, ModelParams};
    use super::*;
    use crate::metrics::mgae_pairs;
    use crate::protocol::ScreenGeometry;
    use proptest::prelude::*;

    #[test]
    fn gram_matches_naive() {
        let (data, _) = linear_dataset(37, 5000, 3);
        let g = gram(&data.x, 37, 5000);
        for i in 0..37 {
            for j in 0..37 {
                let naive: f64 = data
                    .row(i)
                    .iter()
                    .zip(data.row(j))
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                assert!((g[(i, j)] - naive).abs() <= 1e-4 * naive.abs().max(1.0));
            }
        }
    }

    #[test]
    fn realizable_target_recovered_primal_and_dual() {
        let geom = ScreenGeometry::default();
        for (n, d) in [(200, 20), (40, 300)] {
            let (data, _) = linear_dataset(n, d, 7);
            let m = fit_linear_dataset(&data, 1e-9).unwrap();
            let preds = m.predict_all(&data).unwrap();
            let truths: Vec<[f64; 2]> = data.y.iter().map(|y| [y[0].clamp(0.0, 1919.0), y[1].clamp(0.0, 1079.0)]).collect();
            let on_screen: Vec<usize> = (0..n).filter(|&i| truths[i] == data.y[i]).collect();
            let p: Vec<_> = on_screen.iter().map(|&i| preds[i]).collect();
            let t: Vec<_> = on_screen.iter().map(|&i| truths[i]).collect();
            assert!(mgae_pairs(&geom, &p, &t).unwrap() < 0.1, "n={n} d={d}");
        }
    }

    #[test]
    fn single_instance_interpolated() {
        let data = Dataset::new(FeatureLayout::flat(4), vec![0.3, -1.0, 2.0, 5.0], vec![[123.0, 456.0]]).unwrap();
        let m = fit_linear_dataset(&data, 0.0).unwrap();
        assert_eq!(m.predict_features(data.row(0)).unwrap(), [123.0, 456.0]);
    }

    #[test]
    fn zero_variance_feature_gets_zero_weight() {
        let (mut data, _) = linear_dataset(30, 50, 1);
        for i in 0..30 {
            data.x[i * 50 + 7] = 4.25;
        }
        let m = fit_linear_dataset(&data, 1.0).unwrap();
        assert_eq!(m.normalization.std[7], 1.0);
        let ModelParams::Linear { weights, .. } = &m.params else { unreachable!() };
        assert_eq!(weights[7], [0.0, 0.0]);
    }

    #[test]
    fn negative_l2_rejected() {
        let (data, _) = linear_dataset(5, 3, 1);
        assert!(matches!(fit_linear_dataset(&data, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn dual_and_primal_agree() {
        // 60 x 50 solved both ways by transposing the decision.
        let (data, _) = linear_dataset(60, 50, 9);
        let primal = fit_linear_dataset(&data, 2.0).unwrap();
        let norm = Normalization::fit(&data);
        let mut z = vec![0.0f32; 60 * 50];
        for i in 0..60 {
            norm.apply(data.row(i), &mut z[i * 50..(i + 1) * 50]);
        }
        let ym = data.label_mean();
        let yc = DMatrix::from_fn(60, 2, |i, c| data.y[i][c] - ym[c]);
        let alpha = spd_solve(gram(&z, 60, 50), 2.0, &yc).unwrap();
        let ModelParams::Linear { weights, .. } = &primal.params else { unreachable!() };
        for j in 0..50 {
            let w0: f64 = (0..60).map(|i| f64::from(z[i * 50 + j]) * alpha[(i, 0)]).sum();
            assert!((w0 - weights[j][0]).abs() < 1e-4 * w0.abs().max(1.0), "{w0} {}", weights[j][0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn feature_scaling_leaves_predictions_unchanged(scale in 0.01f32..100.0, seed in 0u64..1000) {
            let (data, _) = linear_dataset(25, 60, seed);
            let scaled = Dataset::new(data.layout, data.x.iter().map(|v| v * scale).collect(), data.y.clone()).unwrap();
            let a = fit_linear_dataset(&data, 1.0).unwrap();
            let b = fit_linear_dataset(&scaled, 1.0).unwrap();
            for i in 0..data.n {
                let pa = a.predict_features(data.row(i)).unwrap();
                let pb = b.predict_features(scaled.row(i)).unwrap();
                prop_assert!((pa[0] - pb[0]).abs() < 1e-2 && (pa[1] - pb[1]).abs() < 1e-2);
            }
        }
    }
}
