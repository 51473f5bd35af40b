//! Training objectives.
//!
//! * parameter regression: `|q - q_gt|_1 + lambda * |t - t_gt|_2`
//! * transformation sensitivity: a triplet-style term per branch. The
//!   rotation branch treats the translated copy of the source as the positive
//!   and the rotated copy as the negative; the translation branch swaps them.
//!   The loss is `max(d_pos - d_neg + delta, d_pos)`; the usual hinge at zero
//!   is available through [`LossConfig::tsl_hinge_at_zero`].
//! * point-wise feature dropout: distance between global features with and
//!   without randomly zeroed point rows ahead of every max-pool.
//! * total: per-iteration `L_p + beta * L_s + gamma * L_d`, averaged over
//!   iterations.
//!
//! Each term exists twice: a tape version used for training and a plain
//! value version built on top of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Quaternion, RigidTransform};
use crate::nn::{PoolMask, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Triplet margin.
    pub delta: f64,
    /// Weight of the translation term in the parameter loss.
    pub lambda_t: f64,
    /// Weight of the sensitivity loss.
    pub beta: f64,
    /// Weight of the dropout loss.
    pub gamma: f64,
    pub dropout_ratio: f64,
    pub enable_tsl: bool,
    pub enable_pfdl: bool,
    /// Use `max(d_pos - d_neg + delta, 0)` instead of the default form.
    pub tsl_hinge_at_zero: bool,
    /// Drop individual entries instead of whole point rows.
    pub dropout_per_element: bool,
    /// Run the auxiliary passes every this many steps (1 = every step).
    pub aux_every: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            lambda_t: 4.0,
            beta: 1e-3,
            gamma: 1e-3,
            dropout_ratio: 0.3,
            enable_tsl: true,
            enable_pfdl: true,
            tsl_hinge_at_zero: false,
            dropout_per_element: false,
            aux_every: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("lambda_t", self.lambda_t),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::invalid(format!(
                "dropout_ratio must lie in [0, 1), got {}",
                self.dropout_ratio
            )));
        }
        if self.aux_every == 0 {
            return Err(Error::invalid("aux_every must be at least 1"));
        }
        Ok(())
    }
}

/// Sign of `target` that minimizes the l1 distance to `pred`.
pub fn align_hemisphere<T: Scalar>(pred: &[T; 4], target: Quaternion<T>) -> Quaternion<T> {
    let t = target.to_array();
    let plus: T = pred.iter().zip(&t).map(|(a, b)| (*a - *b).abs()).sum();
    let minus: T = pred.iter().zip(&t).map(|(a, b)| (*a + *b).abs()).sum();
    if minus < plus {
        target.neg()
    } else {
        target
    }
}

/// Parameter loss on the tape. `q: 1x4`, `t: 1x3`; the target is constant.
pub fn param_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    t: Var,
    target: &RigidTransform<T>,
    lambda_t: T,
) -> Var {
    let qv = tape.value(q).data();
    let pred = [qv[0], qv[1], qv[2], qv[3]];
    let tq = align_hemisphere(&pred, target.rotation);
    let tq = tape.constant(Tensor::row_vector(tq.to_array().to_vec()));
    let tt = tape.constant(Tensor::row_vector(target.translation.to_vec()));
    let dq = tape.sub(q, tq);
    let l1 = tape.sum_abs(dq);
    let dt = tape.sub(t, tt);
    let l2 = tape.norm2(dt);
    let l2 = tape.scale(l2, lambda_t);
    tape.add(l1, l2)
}

/// One branch of the sensitivity loss.
pub fn tsl_branch_var<T: Scalar>(
    tape: &mut Tape<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    delta: T,
    hinge_at_zero: bool,
) -> Var {
    let dp = tape.sub(anchor, positive);
    let d_pos = tape.norm2(dp);
    let dn = tape.sub(anchor, negative);
    let d_neg = tape.norm2(dn);
    let diff = tape.sub(d_pos, d_neg);
    let margin = tape.constant(Tensor::scalar(delta));
    let hinge = tape.add(diff, margin);
    let floor = if hinge_at_zero {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        d_pos
    };
    tape.max2(hinge, floor)
}

/// Global features of the anchor and both perturbed copies, per branch.
#[derive(Clone, Copy, Debug)]
pub struct SensitivityVars {
    pub anchor: Var,
    pub rotated: Var,
    pub translated: Var,
}

/// `L_s = L_s^r + L_s^t`.
pub fn tsl_var<T: Scalar>(
    tape: &mut Tape<T>,
    rotation: SensitivityVars,
    translation: SensitivityVars,
    delta: T,
    hinge_at_zero: bool,
) -> Var {
    let lr = tsl_branch_var(tape, rotation.anchor, rotation.translated, rotation.rotated, delta, hinge_at_zero);
    let lt = tsl_branch_var(
        tape,
        translation.anchor,
        translation.rotated,
        translation.translated,
        delta,
        hinge_at_zero,
    );
    tape.add(lr, lt)
}

/// `|F^r - F^r_d| + |F^t - F^t_d|` for one cloud.
pub fn pfdl_var<T: Scalar>(tape: &mut Tape<T>, fr: Var, fr_drop: Var, ft: Var, ft_drop: Var) -> Var {
    let a = tape.sub(fr, fr_drop);
    let a = tape.norm2(a);
    let b = tape.sub(ft, ft_drop);
    let b = tape.norm2(b);
    tape.add(a, b)
}

/// Per-iteration loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub param: T,
    pub sensitivity: T,
    pub dropout: T,
}

// ---- value-level API ----

/// Parameter regression loss between two transforms.
pub fn param_loss<T: Scalar>(pred: &RigidTransform<T>, target: &RigidTransform<T>, lambda_t: T) -> T {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::row_vector(pred.rotation.to_array().to_vec()));
    let t = tape.constant(Tensor::row_vector(pred.translation.to_vec()));
    let l = param_loss_var(&mut tape, q, t, target, lambda_t);
    tape.value(l).item()
}

/// Global features entering the sensitivity loss for one branch.
#[derive(Clone, Debug)]
pub struct SensitivityFeatures<T> {
    pub anchor: Vec<T>,
    pub rotated: Vec<T>,
    pub translated: Vec<T>,
}

/// Sensitivity loss `L_s^r + L_s^t` from plain feature vectors.
pub fn tsl<T: Scalar>(
    rotation: &SensitivityFeatures<T>,
    translation: &SensitivityFeatures<T>,
    delta: T,
    hinge_at_zero: bool,
) -> Result<T> {
    let mut tape = Tape::new();
    let mut bind = |f: &SensitivityFeatures<T>| -> Result<SensitivityVars> {
        let n = f.anchor.len();
        if f.rotated.len() != n || f.translated.len() != n {
            return Err(Error::shape("sensitivity features", n, format!("{}/{}", f.rotated.len(), f.translated.len())));
        }
        Ok(SensitivityVars {
            anchor: tape.constant(Tensor::row_vector(f.anchor.clone())),
            rotated: tape.constant(Tensor::row_vector(f.rotated.clone())),
            translated: tape.constant(Tensor::row_vector(f.translated.clone())),
        })
    };
    let r = bind(rotation)?;
    let t = bind(translation)?;
    let l = tsl_var(&mut tape, r, t, delta, hinge_at_zero);
    Ok(tape.value(l).item())
}

/// Dropout loss contribution of one cloud from plain feature vectors.
pub fn pfdl<T: Scalar>(fr: &[T], fr_drop: &[T], ft: &[T], ft_drop: &[T]) -> Result<T> {
    if fr.len() != fr_drop.len() || ft.len() != ft_drop.len() {
        return Err(Error::shape("dropout features", fr.len(), fr_drop.len()));
    }
    let mut tape = Tape::new();
    let v = [fr, fr_drop, ft, ft_drop].map(|f| tape.constant(Tensor::row_vector(f.to_vec())));
    let l = pfdl_var(&mut tape, v[0], v[1], v[2], v[3]);
    Ok(tape.value(l).item())
}

/// Mean over iterations of `L_p + beta * L_s + gamma * L_d`.
pub fn total_loss<T: Scalar>(per_iteration: &[LossTerms<T>], beta: T, gamma: T) -> Result<T> {
    if per_iteration.is_empty() {
        return Err(Error::Empty("per-iteration losses"));
    }
    let sum: T = per_iteration
        .iter()
        .map(|l| l.param + beta * l.sensitivity + gamma * l.dropout)
        .sum();
    Ok(sum / T::from_usize_lossy(per_iteration.len()))
}

/// Rotation-only and translation-only copies of `source` under `pred`.
pub fn build_perturbed_clouds<T: Scalar>(
    source: &PointCloud<T>,
    pred: &RigidTransform<T>,
) -> (PointCloud<T>, PointCloud<T>) {
    (source.rotated(pred.rotation), source.translated(pred.translation))
}

/// Bernoulli pool mask over `rows x cols` features. A mask that would drop
/// everything is redrawn.
pub fn dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    ratio: f64,
    per_element: bool,
    rng: &mut R,
) -> Result<PoolMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("dropout ratio must lie in [0, 1), got {ratio}")));
    }
    let len = if per_element { rows * cols } else { rows };
    if len == 0 {
        return Err(Error::Empty("dropout mask"));
    }
    loop {
        let m: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < ratio).collect();
        if m.iter().any(|d| !d) {
            return Ok(if per_element { PoolMask::Elements(m) } else { PoolMask::Rows(m) });
        }
    }
}
