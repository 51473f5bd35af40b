//! Registration error metrics.
//!
//! Anisotropic errors compare intrinsic Z-Y-X (yaw, pitch, roll) Euler angles
//! of the predicted and ground-truth rotations, axis by axis, in degrees, and
//! translations component-wise. RMSE and MAE are taken over all
//! axis-samples. Isotropic errors are the relative rotation angle and the
//! Euclidean translation distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mat3_mul, mat3_transpose, Mat3, RigidTransform};
use crate::scalar::Scalar;

/// Pitch within this many degrees of +-90 marks the Euler decomposition as
/// degenerate.
pub const GIMBAL_TOLERANCE_DEG: f64 = 1e-6;

/// Intrinsic Z-Y-X angles `(yaw, pitch, roll)` in degrees.
pub fn euler_zyx_deg<T: Scalar>(m: &Mat3<T>) -> [T; 3] {
    let one = T::one();
    let yaw = m[1][0].atan2(m[0][0]);
    let pitch = (-m[2][0]).max(-one).min(one).asin();
    let roll = m[2][1].atan2(m[2][2]);
    [yaw, pitch, roll].map(|a| a.to_degrees())
}

fn wrap_deg<T: Scalar>(a: T) -> T {
    let full = T::lit(360.0);
    let half = T::lit(180.0);
    let mut w = (a + half) % full;
    if w < T::zero() {
        w += full;
    }
    w - half
}

/// Absolute per-axis errors of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisotropicErrors<T> {
    /// `|yaw|, |pitch|, |roll|` differences in degrees.
    pub rotation_deg: [T; 3],
    /// `|dx|, |dy|, |dz|`.
    pub translation: [T; 3],
    /// Ground truth sits at a gimbal singularity.
    pub degenerate: bool,
}

pub fn anisotropic_errors<T: Scalar>(pred: &RigidTransform<T>, gt: &RigidTransform<T>) -> AnisotropicErrors<T> {
    let ep = euler_zyx_deg(&pred.rotation_matrix());
    let eg = euler_zyx_deg(&gt.rotation_matrix());
    let degenerate = (eg[1].abs() - T::lit(90.0)).abs() <= T::lit(GIMBAL_TOLERANCE_DEG);
    AnisotropicErrors {
        rotation_deg: std::array::from_fn(|i| wrap_deg(ep[i] - eg[i]).abs()),
        translation: std::array::from_fn(|i| (pred.translation[i] - gt.translation[i]).abs()),
        degenerate,
    }
}

/// `(Error(R) in degrees, Error(t))`.
pub fn isotropic_errors<T: Scalar>(pred: &RigidTransform<T>, gt: &RigidTransform<T>) -> (T, T) {
    let rel = mat3_mul(&mat3_transpose(&gt.rotation_matrix()), &pred.rotation_matrix());
    let trace = rel[0][0] + rel[1][1] + rel[2][2];
    let c = ((trace - T::one()) / T::lit(2.0)).max(-T::one()).min(T::one());
    let angle = c.acos().to_degrees();
    let dt: T = (0..3)
        .map(|i| {
            let d = pred.translation[i] - gt.translation[i];
            d * d
        })
        .sum::<T>()
        .sqrt();
    (angle, dt)
}

/// All errors of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub rotation_deg: [f64; 3],
    pub translation: [f64; 3],
    pub error_r_deg: f64,
    pub error_t: f64,
    pub degenerate: bool,
}

impl SampleErrors {
    pub fn evaluate<T: Scalar>(pred: &RigidTransform<T>, gt: &RigidTransform<T>) -> Self {
        let a = anisotropic_errors(pred, gt);
        let (er, et) = isotropic_errors(pred, gt);
        Self {
            rotation_deg: a.rotation_deg.map(|v| v.as_f64()),
            translation: a.translation.map(|v| v.as_f64()),
            error_r_deg: er.as_f64(),
            error_t: et.as_f64(),
            degenerate: a.degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub rmse_r: f64,
    pub mae_r: f64,
    pub rmse_t: f64,
    pub mae_t: f64,
    pub error_r: f64,
    pub error_t: f64,
    pub degenerate_samples: usize,
    pub samples: Vec<SampleErrors>,
}

pub fn rmse(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("error samples"));
    }
    Ok((values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt())
}

pub fn mae(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("error samples"));
    }
    Ok(values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64)
}

pub fn aggregate(samples: &[SampleErrors]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("metrics samples"));
    }
    let rot: Vec<f64> = samples.iter().flat_map(|s| s.rotation_deg).collect();
    let trans: Vec<f64> = samples.iter().flat_map(|s| s.translation).collect();
    let n = samples.len() as f64;
    Ok(MetricsReport {
        count: samples.len(),
        rmse_r: rmse(&rot)?,
        mae_r: mae(&rot)?,
        rmse_t: rmse(&trans)?,
        mae_t: mae(&trans)?,
        error_r: samples.iter().map(|s| s.error_r_deg).sum::<f64>() / n,
        error_t: samples.iter().map(|s| s.error_t).sum::<f64>() / n,
        degenerate_samples: samples.iter().filter(|s| s.degenerate).count(),
        samples: samples.to_vec(),
    })
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 6] = ["RMSE(R)", "MAE(R)", "RMSE(t)", "MAE(t)", "Error(R)", "Error(t)"];

    pub fn row(&self) -> [f64; 6] {
        [self.rmse_r, self.mae_r, self.rmse_t, self.mae_t, self.error_r, self.error_t]
    }

    /// Header plus one aligned row, rotation in degrees.
    pub fn table(&self, label: &str) -> String {
        let mut s = format!("{:<12}", "Method");
        for c in Self::COLUMNS {
            s.push_str(&format!(" {c:>10}"));
        }
        s.push('\n');
        s.push_str(&format!("{label:<12}"));
        let r = self.row();
        for (i, v) in r.iter().enumerate() {
            if i == 0 || i == 1 || i == 4 {
                s.push_str(&format!(" {v:>10.3}"));
            } else {
                s.push_str(&format!(" {v:>10.4}"));
            }
        }
        s.push('\n');
        s
    }
}
