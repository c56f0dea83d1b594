//! Gaze regressors over flattened echo-profile windows.
//!
//! Two model families share one artifact type: ridge regression on
//! standardized features and gradient-boosted regression trees with one
//! ensemble per output coordinate. Either can carry an affine output
//! correction fitted on a session's calibration segment.

mod calibration;
mod gbrt;
mod linear;

pub use calibration::{calibrate, fit_affine, Calibration};
pub use gbrt::{
    feature_importance, fit_gbrt, fit_gbrt_dataset, BinnedMatrix, ChannelImportance, Ensemble, GbrtParams,
    SplitMethod, Tree, TreeNode,
};
pub use linear::{fit_linear, fit_linear_dataset};

use serde::{Deserialize, Serialize};

use crate::echo::GazeInstance;
use crate::error::{Error, Result};

/// Shape of the tensor a model was trained on; features are flattened
/// channel-major (channel, then frame, then row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub frames: usize,
    pub rows: usize,
    pub channels: usize,
}

impl FeatureLayout {
    pub fn dims(&self) -> usize {
        self.frames * self.rows * self.channels
    }

    pub fn channel_of(&self, feature: usize) -> usize {
        feature / (self.frames * self.rows)
    }

    /// Unstructured layout for plain feature vectors.
    pub fn flat(dims: usize) -> Self {
        FeatureLayout {
            frames: 1,
            rows: dims,
            channels: 1,
        }
    }
}

/// Row-major feature matrix with 2-D labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub layout: FeatureLayout,
    pub x: Vec<f32>,
    pub y: Vec<[f64; 2]>,
}

impl Dataset {
    pub fn new(layout: FeatureLayout, x: Vec<f32>, y: Vec<[f64; 2]>) -> Result<Self> {
        let d = layout.dims();
        if d == 0 || x.len() != y.len() * d {
            return Err(Error::contract(format!(
                "feature matrix of {} values does not hold {} rows of {d}",
                x.len(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite feature or label"));
        }
        Ok(Dataset {
            n: y.len(),
            layout,
            x,
            y,
        })
    }

    pub fn from_instances(instances: &[GazeInstance]) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| Error::EmptyInput("no training instances".into()))?;
        let t = &first.tensor;
        let layout = FeatureLayout {
            frames: t.frames,
            rows: t.rows,
            channels: t.channels,
        };
        let mut x = Vec::with_capacity(instances.len() * layout.dims());
        for inst in instances {
            if inst.tensor.shape() != t.shape() {
                return Err(Error::contract("instances have different tensor shapes"));
            }
            x.extend_from_slice(inst.features());
        }
        Dataset::new(layout, x, instances.iter().map(|i| i.label).collect())
    }

    pub fn dims(&self) -> usize {
        self.layout.dims()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dims();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn label_mean(&self) -> [f64; 2] {
        let n = self.n as f64;
        let s = self.y.iter().fold([0.0, 0.0], |a, y| [a[0] + y[0], a[1] + y[1]]);
        [s[0] / n, s[1] / n]
    }
}

/// Per-feature standardization. Zero-variance features keep std 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn fit(data: &Dataset) -> Self {
        let d = data.dims();
        let mut sum = vec![0.0f64; d];
        for i in 0..data.n {
            for (s, &v) in sum.iter_mut().zip(data.row(i)) {
                *s += f64::from(v);
            }
        }
        let n = data.n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut ss = vec![0.0f64; d];
        for i in 0..data.n {
            for ((s, &v), m) in ss.iter_mut().zip(data.row(i)).zip(&mean) {
                let c = f64::from(v) - m;
                *s += c * c;
            }
        }
        let std = ss
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n).sqrt();
                // Variance at round-off level of the mean counts as zero.
                if sd > 1e-6 * m.abs().max(1e-30) && sd > 0.0 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Normalization {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    pub fn identity(d: usize) -> Self {
        Normalization {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f32], out: &mut [f32]) {
        for (((o, &v), &m), &s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.std) {
            *o = (v - m) / s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Gbrt,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Linear => 1,
            ModelKind::Gbrt => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(ModelKind::Linear),
            2 => Some(ModelKind::Gbrt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    /// `y = intercept + sum_j z_j * weights[j]` on standardized features `z`.
    Linear { weights: Vec<[f64; 2]>, intercept: [f64; 2] },
    Gbrt { ensembles: [Ensemble; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub layout: FeatureLayout,
    pub normalization: Normalization,
    pub params: ModelParams,
    pub calibration: Calibration,
}

impl ModelArtifact {
    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Linear { .. } => ModelKind::Linear,
            ModelParams::Gbrt { .. } => ModelKind::Gbrt,
        }
    }

    pub fn dims(&self) -> usize {
        self.layout.dims()
    }

    /// Model output before the calibration correction.
    pub fn predict_raw(&self, features: &[f32]) -> Result<[f64; 2]> {
        let d = self.dims();
        if features.len() != d {
            return Err(Error::contract(format!(
                "model expects {d} features, got {}",
                features.len()
            )));
        }
        let n = &self.normalization;
        Ok(match &self.params {
            ModelParams::Linear { weights, intercept } => {
                let mut acc = *intercept;
                for (j, w) in weights.iter().enumerate() {
                    let z = f64::from((features[j] - n.mean[j]) / n.std[j]);
                    acc[0] += z * w[0];
                    acc[1] += z * w[1];
                }
                acc
            }
            ModelParams::Gbrt { ensembles } => {
                let z = |j: usize| (features[j] - n.mean[j]) / n.std[j];
                [ensembles[0].predict_with(&z), ensembles[1].predict_with(&z)]
            }
        })
    }

    pub fn predict_features(&self, features: &[f32]) -> Result<[f64; 2]> {
        Ok(self.calibration.apply(self.predict_raw(features)?))
    }

    pub fn predict_all(&self, data: &Dataset) -> Result<Vec<[f64; 2]>> {
        (0..data.n).map(|i| self.predict_features(data.row(i))).collect()
    }
}

/// Calibrated prediction for one instance, in screen pixels.
pub fn predict(model: &ModelArtifact, inst: &GazeInstance) -> Result<[f64; 2]> {
    model.predict_features(inst.features())
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Random features with labels from a fixed linear map.
    pub fn linear_dataset(n: usize, d: usize, seed: u64) -> (Dataset, Vec<[f64; 2]>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<[f64; 2]> = (0..d)
            .map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)])
            .collect();
        let x: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let y = (0..n)
            .map(|i| {
                let r = &x[i * d..(i + 1) * d];
                let mut acc = [960.0, 540.0];
                for (v, wj) in r.iter().zip(&w) {
                    acc[0] += f64::from(*v) * wj[0];
                    acc[1] += f64::from(*v) * wj[1];
                }
                acc
            })
            .collect();
        (Dataset::new(FeatureLayout::flat(d), x, y).unwrap(), w)
    }
}
