//! Rigid-transform algebra.
//!
//! Quaternions are scalar-first `(w, x, y, z)` and describe right-handed
//! rotations. `q` and `-q` encode the same rotation; [`Quaternion::canonical`]
//! picks the representative with `w >= 0` and every comparison against
//! ground truth goes through it.
//!
//! A [`RigidTransform`] maps `p -> R p + t`. [`RigidTransform::compose`]`(a, b)`
//! applies `b` first and `a` second.

use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

/// Tolerance on `|q| - 1` accepted by [`Quaternion::to_matrix`].
pub const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Quaternion<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Result<Self> {
        let n = norm3(axis);
        if n == T::zero() || !n.is_finite() {
            return Err(Error::invalid("rotation axis must be nonzero"));
        }
        let half = angle / T::lit(2.0);
        let s = half.sin() / n;
        Ok(Self::new(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s))
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Representative of `{q, -q}` with `w >= 0`. When `w == 0` the first
    /// nonzero vector component is made positive so the choice is unique.
    pub fn canonical(self) -> Self {
        let flip = if self.w != T::zero() {
            self.w < T::zero()
        } else {
            [self.x, self.y, self.z]
                .into_iter()
                .find(|c| *c != T::zero())
                .is_some_and(|c| c < T::zero())
        };
        if flip {
            self.neg()
        } else {
            self
        }
    }

    /// Unit-norm, canonical-hemisphere version of `self`.
    pub fn normalize(self) -> Result<Self> {
        let n = self.norm();
        if n == T::zero() || !n.is_finite() {
            return Err(Error::DegenerateQuaternion);
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n).canonical())
    }

    /// Hamilton product `self * rhs`: rotating by `rhs` then by `self`.
    pub fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotates `p` assuming `self` is unit norm.
    pub fn rotate(&self, p: Vec3<T>) -> Vec3<T> {
        let two = T::lit(2.0);
        let u = [self.x, self.y, self.z];
        // p + 2w (u x p) + 2 u x (u x p)
        let uxp = cross(u, p);
        let uxuxp = cross(u, uxp);
        [
            p[0] + two * (self.w * uxp[0] + uxuxp[0]),
            p[1] + two * (self.w * uxp[1] + uxuxp[1]),
            p[2] + two * (self.w * uxp[2] + uxuxp[2]),
        ]
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(&self) -> Result<Mat3<T>> {
        let n = self.norm();
        if !n.is_finite() || (n - T::one()).abs() > T::lit(UNIT_TOLERANCE) {
            return Err(Error::NonUnitQuaternion { norm: n.as_f64() });
        }
        Ok(self.matrix_unchecked())
    }

    pub(crate) fn matrix_unchecked(&self) -> Mat3<T> {
        let one = T::one();
        let two = T::lit(2.0);
        let Quaternion { w, x, y, z } = *self;
        [
            [
                one - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                one - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                one - two * (x * x + y * y),
            ],
        ]
    }

    /// Quaternion of a rotation matrix (Shepperd's method), canonicalized.
    pub fn from_matrix(m: &Mat3<T>) -> Result<Self> {
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > m[0][0] && trace > m[1][1] && trace > m[2][2] {
            let s = (one + trace).sqrt() * T::lit(2.0);
            Self::new(
                quarter * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new(
                (m[2][1] - m[1][2]) / s,
                quarter * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                quarter * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
            Self::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                quarter * s,
            )
        };
        q.normalize()
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> T {
        let w = self.canonical().w / self.norm();
        T::lit(2.0) * w.min(T::one()).max(-T::one()).acos()
    }

    pub fn cast<U: Scalar>(self) -> Quaternion<U> {
        Quaternion::new(
            U::lit(self.w.as_f64()),
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform<T> {
    pub rotation: Quaternion<T>,
    pub translation: Vec3<T>,
}

impl<T: Scalar> RigidTransform<T> {
    /// Builds a transform, normalizing the rotation.
    pub fn new(rotation: Quaternion<T>, translation: Vec3<T>) -> Result<Self> {
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation: rotation.normalize()?,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::identity(),
            translation: [T::zero(); 3],
        }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self {
            rotation: Quaternion::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(q: Quaternion<T>) -> Self {
        Self {
            rotation: q,
            translation: [T::zero(); 3],
        }
    }

    pub fn apply_point(&self, p: Vec3<T>) -> Vec3<T> {
        let r = self.rotation.rotate(p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn apply(&self, cloud: &PointCloud<T>) -> PointCloud<T> {
        PointCloud {
            points: cloud.points.iter().map(|p| self.apply_point(*p)).collect(),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let rotation = self.rotation.mul(other.rotation);
        // Renormalize to stop drift over long chains.
        let rotation = rotation.normalize().unwrap_or(rotation);
        Self {
            rotation,
            translation: self.apply_point(other.translation),
        }
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.conjugate().canonical();
        let t = inv.rotate(self.translation);
        Self {
            rotation: inv,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn rotation_matrix(&self) -> Mat3<T> {
        self.rotation.matrix_unchecked()
    }

    /// Homogeneous 4x4 form.
    pub fn to_homogeneous(&self) -> [[T; 4]; 4] {
        let r = self.rotation_matrix();
        let t = self.translation;
        let z = T::zero();
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [z, z, z, T::one()],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.to_array().iter().all(|c| c.is_finite())
            && self.translation.iter().all(|c| c.is_finite())
    }

    pub fn cast<U: Scalar>(self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.cast(),
            translation: self.translation.map(|c| U::lit(c.as_f64())),
        }
    }
}

/// Ordered point set with finite coordinates and at least one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud<T> {
    points: Vec<Vec3<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if !points.iter().flatten().all(|c| c.is_finite()) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3<T>> {
        self.points
    }

    pub fn max_abs_coord(&self) -> T {
        self.points
            .iter()
            .flatten()
            .fold(T::zero(), |m, c| m.max(c.abs()))
    }

    pub fn centroid(&self) -> Vec3<T> {
        let n = T::from_usize_lossy(self.len());
        let mut c = [T::zero(); 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Points at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let pts = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pts)
    }

    pub fn translated(&self, t: Vec3<T>) -> Self {
        RigidTransform::from_translation(t).apply(self)
    }

    pub fn rotated(&self, q: Quaternion<T>) -> Self {
        RigidTransform::from_rotation(q).apply(self)
    }

    /// Row-major `N x 3` coordinate buffer.
    pub fn to_flat(&self) -> Vec<T> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| p.map(|c| U::lit(c.as_f64())))
                .collect(),
        }
    }
}

/// Samples a rotation with axis uniform on the sphere and angle uniform in
/// `[0, max_angle_deg]`, and a translation with components uniform in
/// `[-max_translation, max_translation]`.
pub fn random_transform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    max_angle_deg: f64,
    max_translation: f64,
) -> Result<RigidTransform<T>> {
    if !(max_angle_deg > 0.0 && max_angle_deg <= 180.0) {
        return Err(Error::invalid(format!(
            "max_angle must lie in (0, 180], got {max_angle_deg}"
        )));
    }
    if !(max_translation > 0.0) || !max_translation.is_finite() {
        return Err(Error::invalid(format!(
            "max_translation must be positive, got {max_translation}"
        )));
    }
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..=max_angle_deg).to_radians();
    let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-max_translation..=max_translation));
    let q = Quaternion::<f64>::from_axis_angle(axis, angle)?.normalize()?;
    Ok(RigidTransform {
        rotation: q.cast(),
        translation: t.map(T::lit),
    })
}

/// Remaining transform that takes the already-aligned cloud to the target:
/// `compose(residual, accumulated) == gt`.
pub fn residual_transform<T: Scalar>(
    gt: &RigidTransform<T>,
    accumulated: &RigidTransform<T>,
) -> RigidTransform<T> {
    gt.compose(&accumulated.inverse())
}

pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3<T: Scalar>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

pub fn sub3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dist3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    norm3(sub3(a, b))
}

pub fn mat3_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub fn mat3_transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

pub fn mat3_det<T: Scalar>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        let q = Quaternion::new(2.0, 0.0, 0.0, 0.0).normalize().unwrap();
        assert_eq!(q, Quaternion::identity());
        let q = Quaternion::new(-1.0, 0.0, 0.0, 0.0).normalize().unwrap();
        assert_eq!(q, Quaternion::identity());
        let q = Quaternion::new(1.0, 1.0, 1.0, 1.0).normalize().unwrap();
        assert_eq!(q.to_array(), [0.5; 4]);
        assert!(matches!(
            Quaternion::<f64>::new(0.0, 0.0, 0.0, 0.0).normalize(),
            Err(Error::DegenerateQuaternion)
        ));
    }

    #[test]
    fn canonical_is_idempotent_at_w_zero() {
        let q = Quaternion::new(0.0, -1.0, 0.0, 0.0);
        assert_eq!(q.canonical(), Quaternion::new(0.0, 1.0, 0.0, 0.0));
        assert_eq!(q.canonical().canonical(), q.canonical());
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = Quaternion::new(h.cos(), 0.0, 0.0, h.sin());
        let m = q.to_matrix().unwrap();
        let p = [1.0, 0.0, 0.0];
        let r: Vec<f64> = (0..3).map(|i| dot3(m[i], p)).collect();
        assert!(close(r[0], 0.0, 1e-12) && close(r[1], 1.0, 1e-12) && close(r[2], 0.0, 1e-12));
        let rq = q.rotate(p);
        assert!(close(rq[0], 0.0, 1e-12) && close(rq[1], 1.0, 1e-12));
    }

    #[test]
    fn to_matrix_rejects_non_unit() {
        let q = Quaternion::new(1.001, 0.0, 0.0, 0.0);
        assert!(matches!(q.to_matrix(), Err(Error::NonUnitQuaternion { .. })));
    }

    #[test]
    fn inverse_of_translation_negates() {
        let t = RigidTransform::from_translation([0.1, -0.2, 0.3]);
        assert_eq!(t.inverse().translation, [-0.1, 0.2, -0.3]);
        assert_eq!(RigidTransform::<f64>::identity().inverse(), RigidTransform::identity());
    }

    #[test]
    fn random_transform_respects_bounds_and_replays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut max_angle = 0.0f64;
        for _ in 0..10_000 {
            let t: RigidTransform<f64> = random_transform(&mut rng, 45.0, 0.5).unwrap();
            max_angle = max_angle.max(t.rotation.angle().to_degrees());
            assert!(t.translation.iter().all(|c| c.abs() <= 0.5));
        }
        assert!(max_angle <= 45.0 + 1e-6, "{max_angle}");

        let a: RigidTransform<f64> = random_transform(&mut ChaCha8Rng::seed_from_u64(9), 45.0, 0.5).unwrap();
        let b: RigidTransform<f64> = random_transform(&mut ChaCha8Rng::seed_from_u64(9), 45.0, 0.5).unwrap();
        assert_eq!(a, b);

        let tiny: RigidTransform<f64> = random_transform(&mut rng, 0.001, 1e-6).unwrap();
        assert!(tiny.rotation.angle().to_degrees() <= 0.001 + 1e-9);
        assert!(tiny.translation.iter().all(|c| c.abs() <= 1e-6));

        assert!(random_transform::<f64, _>(&mut rng, 0.0, 0.5).is_err());
        assert!(random_transform::<f64, _>(&mut rng, 181.0, 0.5).is_err());
        assert!(random_transform::<f64, _>(&mut rng, 45.0, 0.0).is_err());
    }

    #[test]
    fn residual_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: RigidTransform<f64> = random_transform(&mut rng, 45.0, 0.5).unwrap();
        let r = residual_transform(&gt, &RigidTransform::identity());
        assert!(close(r.rotation.angle(), gt.rotation.angle(), 1e-12));
        let r = residual_transform(&gt, &gt);
        assert!(r.rotation.angle() < 1e-6);
        assert!(norm3(r.translation) < 1e-9);
    }

    #[test]
    fn point_cloud_validation() {
        assert!(PointCloud::<f64>::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        let c = PointCloud::new(vec![[1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(c.max_abs_coord(), 2.0);
    }
}
